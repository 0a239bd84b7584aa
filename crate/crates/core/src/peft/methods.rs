//! The 20 method variants under search: canonical keys, the fixed
//! parameter-minimal settings used while searching combinations, and each
//! method's hyperparameter ranges for the follow-up search.

use super::{PeftSpec, Placement, ScanInit};

#[derive(Clone, Copy, Debug)]
pub enum HyperKind {
    /// Inclusive integer range.
    Int(i64, i64),
    /// Log-uniform range.
    Log(f64, f64),
}

#[derive(Clone, Copy, Debug)]
pub struct Hyper {
    /// Spec field the sampled value lands in: r, s, n, n_prime, lr, wd.
    pub field: &'static str,
    pub kind: HyperKind,
}

const LR: Hyper = Hyper {
    field: "lr",
    kind: HyperKind::Log(1e-4, 5e-3),
};
const WD_ADDITIVE: Hyper = Hyper {
    field: "wd",
    kind: HyperKind::Log(1e-6, 1e-3),
};
const WD_PARTIAL: Hyper = Hyper {
    field: "wd",
    kind: HyperKind::Log(1e-5, 1e-2),
};
const SCALE: Hyper = Hyper {
    field: "s",
    kind: HyperKind::Log(1e-2, 1.0),
};
const RANK_16: Hyper = Hyper {
    field: "r",
    kind: HyperKind::Int(4, 16),
};
const RANK_12: Hyper = Hyper {
    field: "r",
    kind: HyperKind::Int(4, 12),
};
const N_TOKENS: Hyper = Hyper {
    field: "n",
    kind: HyperKind::Int(1, 3),
};
const N_PRIME: Hyper = Hyper {
    field: "n_prime",
    kind: HyperKind::Int(1, 4),
};

const LORA_DIMS: &[Hyper] = &[RANK_16, SCALE, LR, WD_ADDITIVE];
const LORA_B_DIMS: &[Hyper] = &[RANK_12, SCALE, LR, WD_ADDITIVE];
const PARTIAL_DIMS: &[Hyper] = &[LR, WD_PARTIAL];
const TOKEN_DIMS: &[Hyper] = &[N_TOKENS, LR, WD_ADDITIVE];
const SCAN_DIMS: &[Hyper] = &[N_PRIME, LR, WD_ADDITIVE];

#[derive(Clone, Copy, Debug)]
pub struct MethodVariant {
    pub key: &'static str,
    pub step2: &'static [Hyper],
}

/// All 20 variants, in the order the combination search exposes them.
pub const ALL: [MethodVariant; 20] = [
    MethodVariant { key: "cls_token_tuning", step2: PARTIAL_DIMS },
    MethodVariant { key: "bias_tuning", step2: PARTIAL_DIMS },
    MethodVariant { key: "pos_embed_tuning", step2: PARTIAL_DIMS },
    MethodVariant { key: "d_tuning", step2: PARTIAL_DIMS },
    MethodVariant { key: "a_tuning", step2: PARTIAL_DIMS },
    MethodVariant { key: "conv1d_tuning", step2: PARTIAL_DIMS },
    MethodVariant { key: "prompt_tuning", step2: TOKEN_DIMS },
    MethodVariant { key: "affix_tuning", step2: TOKEN_DIMS },
    MethodVariant { key: "additional_scan", step2: SCAN_DIMS },
    MethodVariant { key: "parallel_adapter", step2: LORA_DIMS },
    MethodVariant { key: "lora_embedding", step2: LORA_DIMS },
    MethodVariant { key: "lora_x_proj", step2: LORA_DIMS },
    MethodVariant { key: "lora_dt_proj", step2: LORA_DIMS },
    MethodVariant { key: "lora_out_proj", step2: LORA_DIMS },
    MethodVariant { key: "lora_in_proj", step2: LORA_DIMS },
    MethodVariant { key: "lora_p_dt", step2: LORA_DIMS },
    MethodVariant { key: "lora_p_c", step2: LORA_DIMS },
    MethodVariant { key: "lora_p_b", step2: LORA_B_DIMS },
    MethodVariant { key: "lora_p_z", step2: LORA_DIMS },
    MethodVariant { key: "lora_p_x", step2: LORA_DIMS },
];

pub fn by_key(key: &str) -> Option<&'static MethodVariant> {
    ALL.iter().find(|v| v.key == key)
}

impl MethodVariant {
    /// The spec at its fixed parameter-minimal setting (used while searching
    /// combinations and as the defaults trial of the hyperparameter search).
    /// `use_projection` only affects affix tuning.
    pub fn default_spec(&self, use_projection: bool) -> PeftSpec {
        match self.key {
            "cls_token_tuning" => PeftSpec::partial_tuning("cls_token"),
            "bias_tuning" => PeftSpec::partial_tuning("bias"),
            "pos_embed_tuning" => PeftSpec::partial_tuning("pos_embed"),
            "d_tuning" => PeftSpec::partial_tuning("d"),
            "a_tuning" => PeftSpec::partial_tuning("a"),
            "conv1d_tuning" => PeftSpec::partial_tuning("conv1d"),
            "prompt_tuning" => PeftSpec::prompt_tuning(1, Placement::Prefix),
            "affix_tuning" => PeftSpec::affix_tuning(
                1,
                Placement::AfterInproj,
                Placement::Prefix,
                use_projection,
            ),
            "additional_scan" => {
                PeftSpec::additional_scan(1, Placement::Top, ScanInit::Neighbor)
            }
            "parallel_adapter" => PeftSpec::parallel_adapter(8, 0.1),
            "lora_embedding" => PeftSpec::lora("embedding", 8, 0.1),
            "lora_x_proj" => PeftSpec::lora("x_proj", 8, 0.1),
            "lora_dt_proj" => PeftSpec::lora("dt_proj", 4, 0.1),
            "lora_out_proj" => PeftSpec::lora("out_proj", 8, 0.1),
            "lora_in_proj" => PeftSpec::lora("in_proj", 8, 0.1),
            "lora_p_dt" => PeftSpec::partial_lora("dt", 4, 0.1),
            "lora_p_c" => PeftSpec::partial_lora("c", 4, 0.1),
            "lora_p_b" => PeftSpec::partial_lora("b", 4, 0.1),
            "lora_p_z" => PeftSpec::partial_lora("z", 8, 0.1),
            "lora_p_x" => PeftSpec::partial_lora("x", 8, 0.1),
            other => unreachable!("unknown method key {other}"),
        }
    }
}

/// Writes a sampled hyperparameter into the matching spec field.
pub fn set_hyper(spec: &mut PeftSpec, field: &str, value: f64) {
    match field {
        "r" => spec.r = Some(value.round() as usize),
        "s" => spec.s = Some(value),
        "n" => spec.n = Some(value.round() as usize),
        "n_prime" => spec.n_prime = Some(value.round() as usize),
        "lr" => spec.lr = Some(value),
        "wd" => spec.wd = Some(value),
        other => panic!("unknown hyperparameter field {other}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_variants_with_unique_keys() {
        assert_eq!(ALL.len(), 20);
        let mut keys: Vec<_> = ALL.iter().map(|v| v.key).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), 20);
    }

    #[test]
    fn fixed_settings_match_the_search_table() {
        // Spot checks of the parameter-minimal column.
        let dt = by_key("lora_dt_proj").unwrap().default_spec(true);
        assert_eq!(dt.r, Some(4));
        assert_eq!(dt.s, Some(0.1));
        let px = by_key("lora_p_x").unwrap().default_spec(true);
        assert_eq!(px.r, Some(8));
        let affix = by_key("affix_tuning").unwrap().default_spec(true);
        assert_eq!(affix.n, Some(1));
        assert_eq!(affix.position, Some(Placement::AfterInproj));
        let scan = by_key("additional_scan").unwrap().default_spec(true);
        assert_eq!(scan.n_prime, Some(1));
        assert_eq!(scan.init, Some(ScanInit::Neighbor));
    }

    #[test]
    fn lora_p_b_searches_a_narrower_rank() {
        let b = by_key("lora_p_b").unwrap();
        match b.step2[0].kind {
            HyperKind::Int(lo, hi) => {
                assert_eq!((lo, hi), (4, 12));
            }
            _ => panic!("rank dim expected"),
        }
    }
}
