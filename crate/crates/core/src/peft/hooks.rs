//! Compiled adapter attachments.
//!
//! A `HookSet` is the path-level description the model forward consumes: it
//! says *where* extra computation attaches and which store paths hold the
//! trainable tensors, without knowing anything about PEFT methods. The peft
//! module compiles applied specs into one of these.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Low-rank patch on a linear site: `out[:, cols] += scale * (x . down) . up`.
/// `cols = None` patches the full output width.
#[derive(Clone, Debug)]
pub struct LoraPatch {
    pub down: String,
    pub up: String,
    pub scale: f64,
    pub cols: Option<(usize, usize)>,
}

/// Bottleneck ReLU adapter added in parallel to `out_proj` in every layer:
/// `out += scale * relu(h . down) . up` where `h` is `out_proj`'s input.
#[derive(Clone, Debug)]
pub struct ParallelAdapterHook {
    pub down: String,
    pub up: String,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffixPosition {
    BeforeInproj,
    AfterInproj,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffixPlacement {
    Prefix,
    Infix,
}

/// Per-layer token source for affix insertion.
#[derive(Clone, Debug)]
pub enum AffixTokens {
    /// One raw token tensor per layer.
    PerLayer(Vec<String>),
    /// Shared token embedding projected per layer into the insertion width.
    Projected {
        shared: String,
        projections: Vec<String>,
    },
}

/// Tokens inserted into each layer's sequence and dropped downstream so the
/// layer's output length always equals its input length.
#[derive(Clone, Debug)]
pub struct AffixHook {
    pub n: usize,
    pub position: AffixPosition,
    pub placement: AffixPlacement,
    pub tokens: AffixTokens,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPlacement {
    Prefix,
    Infix,
    Suffix,
    #[serde(rename = "prefix+suffix")]
    PrefixSuffix,
}

/// Learnable tokens inserted once into the embedded sequence before layer 1;
/// they persist through all layers.
#[derive(Clone, Debug)]
pub struct PromptHook {
    pub n: usize,
    pub placement: PromptPlacement,
    pub tokens: String,
}

/// Which end of the state axis new dimensions attach to. `Top` is the
/// slow-decay (long-memory) end where the smallest pretrained decay rates
/// live; `Bottom` is the fast-decay end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanEnd {
    Top,
    Bottom,
}

/// State-width extension: per layer, extra columns for the decay rates and
/// extra `x_proj` output columns producing the B/C extensions.
#[derive(Clone, Debug)]
pub struct ScanExtensionHook {
    pub n_prime: usize,
    pub end: ScanEnd,
    /// `a_ext[i]` is `[d_inner, n_prime]` for layer `i`.
    pub a_ext: Vec<String>,
    /// `x_proj_ext[i]` is `[d_inner, 2*n_prime]`: B columns then C columns.
    pub x_proj_ext: Vec<String>,
}

/// Everything the forward pass needs to know about active adapters.
///
/// LoRA patches are keyed by linear site name: `embedding`, `in_proj`,
/// `x_proj`, `dt_proj`, `out_proj`. Patches on one site stack additively in
/// insertion order.
#[derive(Clone, Debug, Default)]
pub struct HookSet {
    pub lora: BTreeMap<String, Vec<LoraPatch>>,
    pub parallel: Vec<ParallelAdapterHook>,
    pub affix: Vec<AffixHook>,
    pub prompt: Vec<PromptHook>,
    pub scan_ext: Vec<ScanExtensionHook>,
}

impl HookSet {
    pub fn is_empty(&self) -> bool {
        self.lora.is_empty()
            && self.parallel.is_empty()
            && self.affix.is_empty()
            && self.prompt.is_empty()
            && self.scan_ext.is_empty()
    }

    pub fn push_lora(&mut self, site: &str, patch: LoraPatch) {
        self.lora.entry(site.to_string()).or_default().push(patch);
    }
}

/// Insertion indices (in output coordinates) for placing `n` tokens at equal
/// intervals into a sequence of current length `len`:
/// `floor(k * (len + n) / (n + 1))` for `k = 1..=n`.
pub fn infix_positions(len: usize, n: usize) -> Vec<usize> {
    (1..=n).map(|k| k * (len + n) / (n + 1)).collect()
}

/// Insertion indices for prompt tokens into a sequence of length `len`.
/// `prefix+suffix` splits `n` as `ceil(n/2)` front, rest at the end.
pub fn prompt_positions(placement: PromptPlacement, len: usize, n: usize) -> Vec<usize> {
    match placement {
        PromptPlacement::Prefix => (0..n).collect(),
        PromptPlacement::Suffix => (len..len + n).collect(),
        PromptPlacement::Infix => infix_positions(len, n),
        PromptPlacement::PrefixSuffix => {
            let front = n.div_ceil(2);
            let back = n - front;
            let out_len = len + n;
            (0..front).chain(out_len - back..out_len).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infix_single_token_lands_in_middle() {
        assert_eq!(infix_positions(5, 1), vec![3]);
        assert_eq!(infix_positions(4, 1), vec![2]);
    }

    #[test]
    fn prompt_prefix_and_split_placement() {
        // Two prefix tokens on a length-5 sequence occupy indices 0 and 1 of
        // the length-7 result.
        assert_eq!(prompt_positions(PromptPlacement::Prefix, 5, 2), vec![0, 1]);
        // prefix+suffix with n=2: one token at the front, one at the end.
        assert_eq!(
            prompt_positions(PromptPlacement::PrefixSuffix, 5, 2),
            vec![0, 6]
        );
        assert_eq!(prompt_positions(PromptPlacement::Suffix, 5, 2), vec![5, 6]);
    }

    #[test]
    fn infix_positions_strictly_increase_and_stay_in_bounds() {
        for len in 1..20 {
            for n in 1..8 {
                let pos = infix_positions(len, n);
                assert_eq!(pos.len(), n);
                for w in pos.windows(2) {
                    assert!(w[1] > w[0]);
                }
                assert!(*pos.last().unwrap() < len + n);
            }
        }
    }
}
