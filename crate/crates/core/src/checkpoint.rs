//! Parameter archive: a text manifest (tensor name, shape, element type and
//! the model configuration) followed by the raw little-endian IEEE-754
//! binary64 payload, one file per model. Round-trips are bitwise.
//!
//! Layout:
//!
//! ```text
//! aussm-archive v1
//! meta pattern ma
//! meta vocab_size 4
//! ...
//! tensor embed 4x2 f64
//! tensor block0.norm_g 2 f64
//! ...
//! end
//! <payload: concatenated f64 LE in tensor order>
//! ```

use crate::blocks::{ModelConfig, ModelParams};
use crate::kernels::TensorVisit;
use crate::{Error, Result};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

const MAGIC: &str = "aussm-archive v1";

/// True multi-dimensional shape of a named model tensor.
fn tensor_shape(cfg: &ModelConfig, name: &str) -> Vec<usize> {
    let (dm, di, n, v, w) = (
        cfg.d_model,
        cfg.expand * cfg.d_model,
        cfg.n_state,
        cfg.vocab_size,
        cfg.conv_width,
    );
    let suffix = name.rsplit('.').next().unwrap_or(name);
    let in_kernel = name.contains(".aussm.") || name.contains(".s6.");
    match (in_kernel, suffix) {
        (false, "embed") | (false, "head") => vec![v, dm],
        (false, "head_b") => vec![v],
        (false, "norm_g") | (false, "final_norm_g") | (false, "b_out") => vec![dm],
        (false, "w_x") | (false, "w_z") => vec![di, dm],
        (false, "b_x") | (false, "b_z") | (false, "conv_b") => vec![di],
        (false, "conv_w") => vec![di, w],
        (false, "w_out") => vec![dm, di],
        // Kernel tensors (channel dimension is d_inner).
        (true, "r_b") | (true, "theta_b") | (true, "r_c") | (true, "theta_c") => vec![n],
        (true, "chi") => vec![di, n, di],
        (true, "chi_bias") | (true, "a") => vec![di, n],
        (true, "chi_delta") | (true, "w_delta") => vec![di, di],
        (true, "chi_delta_bias") | (true, "b_delta") | (true, "d_skip") => vec![di],
        (true, "w_b") | (true, "w_c") => vec![n, di],
        _ => vec![],
    }
}

fn fmt_shape(shape: &[usize], flat_len: usize) -> String {
    if shape.is_empty() || shape.iter().product::<usize>() != flat_len {
        // Fall back to the flat length for anything unrecognized.
        return flat_len.to_string();
    }
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// Write one model archive.
pub fn save_model(path: &Path, model: &ModelParams) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let cfg = &model.cfg;
    writeln!(f, "{MAGIC}")?;
    writeln!(f, "meta pattern {}", cfg.pattern)?;
    writeln!(f, "meta vocab_size {}", cfg.vocab_size)?;
    writeln!(f, "meta d_model {}", cfg.d_model)?;
    writeln!(f, "meta n_state {}", cfg.n_state)?;
    writeln!(f, "meta expand {}", cfg.expand)?;
    writeln!(f, "meta conv_width {}", cfg.conv_width)?;
    writeln!(f, "meta tie_embedding {}", cfg.tie_embedding)?;
    let mut order: Vec<(String, usize)> = Vec::new();
    model.visit(&mut |name, t| order.push((name.to_string(), t.len())));
    for (name, len) in &order {
        writeln!(f, "tensor {} {} f64", name, fmt_shape(&tensor_shape(cfg, name), *len))?;
    }
    writeln!(f, "end")?;
    let mut payload = Vec::new();
    model.visit(&mut |_, t| {
        for v in t {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    f.write_all(&payload)?;
    Ok(())
}

fn meta<'a>(map: &'a [(String, String)], key: &str) -> Result<&'a str> {
    map.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Input(format!("archive missing meta key {key:?}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Input(format!("bad {what} in archive: {s:?}")))
}

/// Read one model archive.
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let f = std::fs::File::open(path)?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Input(format!("not a model archive: {:?}", line.trim_end())));
    }
    let mut metas: Vec<(String, String)> = Vec::new();
    let mut tensors: Vec<(String, usize)> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Input("archive truncated before 'end'".into()));
        }
        let t = line.trim_end();
        if t == "end" {
            break;
        }
        let mut parts = t.split_whitespace();
        match parts.next() {
            Some("meta") => {
                let k = parts.next().ok_or_else(|| Error::Input("bad meta line".into()))?;
                let v = parts.next().ok_or_else(|| Error::Input("bad meta line".into()))?;
                metas.push((k.to_string(), v.to_string()));
            }
            Some("tensor") => {
                let name = parts.next().ok_or_else(|| Error::Input("bad tensor line".into()))?;
                let shape = parts.next().ok_or_else(|| Error::Input("bad tensor line".into()))?;
                let dtype = parts.next().unwrap_or("f64");
                if dtype != "f64" {
                    return Err(Error::Input(format!("unsupported element type {dtype:?}")));
                }
                let len = shape
                    .split('x')
                    .map(|d| parse_num::<usize>(d, "shape"))
                    .product::<Result<usize>>()?;
                tensors.push((name.to_string(), len));
            }
            _ => return Err(Error::Input(format!("unexpected archive line {t:?}"))),
        }
    }

    let cfg = ModelConfig {
        pattern: meta(&metas, "pattern")?.to_string(),
        vocab_size: parse_num(meta(&metas, "vocab_size")?, "vocab_size")?,
        d_model: parse_num(meta(&metas, "d_model")?, "d_model")?,
        n_state: parse_num(meta(&metas, "n_state")?, "n_state")?,
        expand: parse_num(meta(&metas, "expand")?, "expand")?,
        conv_width: parse_num(meta(&metas, "conv_width")?, "conv_width")?,
        tie_embedding: meta(&metas, "tie_embedding")? == "true",
    };
    let mut model = ModelParams::zeros(cfg)?;

    let total: usize = tensors.iter().map(|(_, l)| l).sum();
    let mut payload = vec![0u8; total * 8];
    reader.read_exact(&mut payload)?;
    let mut extra = Vec::new();
    reader.read_to_end(&mut extra)?;
    if !extra.is_empty() {
        return Err(Error::Input("trailing bytes after archive payload".into()));
    }

    let mut offset = 0usize;
    let mut idx = 0usize;
    let mut fail: Option<String> = None;
    model.visit_mut(&mut |name, t| {
        if fail.is_some() {
            return;
        }
        let Some((tname, tlen)) = tensors.get(idx) else {
            fail = Some("archive lists too few tensors".into());
            return;
        };
        if tname != name || *tlen != t.len() {
            fail = Some(format!(
                "tensor mismatch: archive has {tname} ({tlen}), model expects {name} ({})",
                t.len()
            ));
            return;
        }
        for v in t.iter_mut() {
            let bytes: [u8; 8] = payload[offset..offset + 8].try_into().unwrap();
            *v = f64::from_le_bytes(bytes);
            offset += 8;
        }
        idx += 1;
    });
    if let Some(msg) = fail {
        return Err(Error::Input(msg));
    }
    if idx != tensors.len() {
        return Err(Error::Input("archive lists too many tensors".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn archive_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = ModelConfig::new("ma", 6, 4, 3);
        let model = ModelParams::init(cfg, &mut rng).unwrap();
        let dir = std::env::temp_dir().join("aussm_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.aussm");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        let a = model.named_tensors();
        let b = loaded.named_tensors();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.len(), tb.len());
            for (x, y) in ta.iter().zip(tb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{na} differs");
            }
        }
        assert_eq!(loaded.cfg, model.cfg);
    }

    #[test]
    fn manifest_lists_true_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = ModelConfig::new("a", 5, 3, 2);
        let model = ModelParams::init(cfg, &mut rng).unwrap();
        let dir = std::env::temp_dir().join("aussm_ckpt_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.aussm");
        save_model(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_end = bytes.windows(4).position(|w| w == b"end\n").unwrap();
        let text = std::str::from_utf8(&bytes[..header_end]).unwrap();
        assert!(text.contains("tensor embed 5x3 f64"));
        // d_inner = 6, n = 2: chi is (6, 2, 6).
        assert!(text.contains("tensor block0.aussm.chi 6x2x6 f64"));
        assert!(text.contains("tensor block0.conv_w 6x4 f64"));
    }

    #[test]
    fn corrupted_archive_is_rejected() {
        let dir = std::env::temp_dir().join("aussm_ckpt_test3");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.aussm");
        std::fs::write(&path, b"not an archive\n").unwrap();
        assert!(load_model(&path).is_err());
    }
}
