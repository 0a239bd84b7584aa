//! Checkpoint format "MPK1": a text header listing `(path, shape, trainable)`
//! per line, followed by a little-endian fp64 blob in header order. The
//! pretrained snapshot is stored as extra `pretrained:<path>` entries so the
//! round trip is bit-exact for values, shapes, flags, and the snapshot.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::mamba::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MPK1";
const PRETRAINED_PREFIX: &str = "pretrained:";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"MPK1\"")]
    BadMagic,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed header (line {line}): {msg}")]
    Header { line: usize, msg: String },
    #[error("blob holds {got} values but the header declares {expected}")]
    BlobLength { expected: usize, got: usize },
    #[error("shape mismatch for `{path}`: header {header:?} vs {got} values")]
    ShapeHeader {
        path: String,
        header: Vec<usize>,
        got: usize,
    },
}

fn format_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(s: &str, line: usize) -> Result<Vec<usize>, CheckpointError> {
    s.split('x')
        .map(|d| {
            d.parse::<usize>().map_err(|_| CheckpointError::Header {
                line,
                msg: format!("bad shape `{s}`"),
            })
        })
        .collect()
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut entries: Vec<(String, &Tensor, bool)> = Vec::new();
    for (p, t, trainable) in store.iter() {
        entries.push((p.clone(), t, trainable));
    }
    let mut pretrained: Vec<(String, &Tensor)> = store
        .pretrained_paths()
        .map(|p| (p.clone(), store.pretrained(p).expect("listed")))
        .collect();
    pretrained.sort_by(|a, b| a.0.cmp(&b.0));
    for (p, t) in pretrained {
        entries.push((format!("{PRETRAINED_PREFIX}{p}"), t, false));
    }

    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(b"\n")?;
    writeln!(w, "{}", entries.len())?;
    for (name, t, trainable) in &entries {
        writeln!(
            w,
            "{name} {} {}",
            format_shape(t.shape()),
            u8::from(*trainable)
        )?;
    }
    for (_, t, _) in &entries {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, CheckpointError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 5 || &bytes[0..4] != MAGIC || bytes[4] != b'\n' {
        return Err(CheckpointError::BadMagic);
    }
    let mut pos = 5usize;
    let mut line_no = 1usize;
    let mut read_line = |pos: &mut usize| -> Result<String, CheckpointError> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(CheckpointError::Header {
                line: line_no,
                msg: "unexpected end of header".into(),
            });
        }
        let line = std::str::from_utf8(&bytes[start..*pos])
            .map_err(|_| CheckpointError::Header {
                line: line_no,
                msg: "header is not utf-8".into(),
            })?
            .to_string();
        *pos += 1;
        line_no += 1;
        Ok(line)
    };

    let count_line = read_line(&mut pos)?;
    let n_entries: usize = count_line.trim().parse().map_err(|_| CheckpointError::Header {
        line: 1,
        msg: format!("bad entry count `{count_line}`"),
    })?;

    let mut headers: Vec<(String, Vec<usize>, bool)> = Vec::with_capacity(n_entries);
    for i in 0..n_entries {
        let line = read_line(&mut pos)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(CheckpointError::Header {
                line: i + 2,
                msg: format!("expected `name shape flag`, got `{line}`"),
            });
        }
        let shape = parse_shape(parts[1], i + 2)?;
        let trainable = match parts[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(CheckpointError::Header {
                    line: i + 2,
                    msg: format!("bad trainable flag `{other}`"),
                })
            }
        };
        headers.push((parts[0].to_string(), shape, trainable));
    }

    let declared: usize = headers
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum();
    let blob = &bytes[pos..];
    if blob.len() != declared * 8 {
        return Err(CheckpointError::BlobLength {
            expected: declared,
            got: blob.len() / 8,
        });
    }

    let mut store = ParamStore::new();
    let mut pretrained: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut offset = 0usize;
    for (name, shape, trainable) in headers {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let start = offset + i * 8;
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&blob[start..start + 8]);
            data.push(f64::from_le_bytes(buf));
        }
        offset += n * 8;
        let tensor = Tensor::new(shape.clone(), data).map_err(|_| CheckpointError::ShapeHeader {
            path: name.clone(),
            header: shape,
            got: n,
        })?;
        if let Some(base) = name.strip_prefix(PRETRAINED_PREFIX) {
            pretrained.insert(base.to_string(), tensor);
        } else {
            store.insert(&name, tensor, trainable);
        }
    }
    store.restore_pretrained(pretrained);
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mamba::{init_store, MambaConfig};

    fn sample_store() -> ParamStore {
        let mut cfg = MambaConfig::desk_default();
        cfg.d_model = 8;
        cfg.dt_rank = 1;
        cfg.d_state = 2;
        cfg.vocab_size = 5;
        cfg.n_layers = 1;
        cfg.max_seq_len = 8;
        let mut store = init_store(&cfg, 3).unwrap();
        store.snapshot_pretrained().unwrap();
        store.freeze_all();
        store.set_trainable("head.weight", true).unwrap();
        store.insert("peft.lora.in_proj.0.down", Tensor::full(vec![8, 2], 0.5), true);
        store
    }

    #[test]
    fn round_trip_is_bit_exact_and_save_is_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.mpk");
        let p2 = dir.path().join("b.mpk");
        let store = sample_store();
        save_checkpoint(&store, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        for (path, tensor, trainable) in store.iter() {
            let t2 = loaded.get(path).unwrap();
            assert!(tensor.bit_eq(t2), "{path} values changed");
            assert_eq!(trainable, loaded.is_trainable(path), "{path} flag changed");
        }
        for path in store.pretrained_paths() {
            assert!(store
                .pretrained(path)
                .unwrap()
                .bit_eq(loaded.pretrained(path).unwrap()));
        }
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_magic_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mpk");
        save_checkpoint(&sample_store(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("MPK1"));
    }

    #[test]
    fn truncated_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trunc.mpk");
        save_checkpoint(&sample_store(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::BlobLength { .. })
        ));
    }

    #[test]
    fn header_blob_disagreement_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grown.mpk");
        save_checkpoint(&sample_store(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::BlobLength { .. })
        ));
    }
}
