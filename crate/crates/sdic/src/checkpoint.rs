//! Checkpoints: a directory of NTF tensors plus a plain-text manifest.
//!
//! Layout: `manifest.tsv` with one `name<TAB>file<TAB>shape` line per
//! parameter, `config.ini` with the full run configuration, and `step.txt`
//! with the step counter. Round-trips are bit-exact within one precision.

use crate::config::RunConfig;
use crate::ntf::{self, NtfScalar};
use crate::{Error, Result};
use ndarray::ArrayD;
use std::collections::BTreeMap;
use std::path::Path;
use tapegrad::Scalar;

fn file_for(name: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    s.push_str(".ntf");
    s
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

/// Write all parameters enumerated by `visit`, the config, and the step.
pub fn save_params<S: NtfScalar>(
    dir: &Path,
    cfg: &RunConfig,
    step: usize,
    visit: impl FnOnce(&mut dyn FnMut(&str, &ArrayD<S>)),
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut err: Option<Error> = None;
    visit(&mut |name, value| {
        if err.is_some() {
            return;
        }
        let file = file_for(name);
        if let Err(e) = ntf::write(&dir.join(&file), value) {
            err = Some(e);
            return;
        }
        manifest.push_str(&format!("{name}\t{file}\t{}\n", shape_str(value.shape())));
    });
    if let Some(e) = err {
        return Err(e);
    }
    std::fs::write(dir.join("manifest.tsv"), manifest)?;
    std::fs::write(dir.join("config.ini"), cfg.to_ini())?;
    std::fs::write(dir.join("step.txt"), format!("{step}\n"))?;
    Ok(())
}

/// Read the config and step of a checkpoint without loading tensors.
pub fn load_meta(dir: &Path) -> Result<(RunConfig, usize)> {
    let cfg = RunConfig::parse_ini(&std::fs::read_to_string(dir.join("config.ini"))?)?;
    let step: usize = std::fs::read_to_string(dir.join("step.txt"))?
        .trim()
        .parse()
        .map_err(|_| Error::Format("bad step counter".into()))?;
    Ok((cfg, step))
}

/// Load a checkpoint's tensors into parameters enumerated by `visit_mut`.
/// Every manifest entry must be consumed and every parameter must be found.
pub fn load_params<S: NtfScalar>(
    dir: &Path,
    visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut ArrayD<S>)),
) -> Result<(RunConfig, usize)> {
    let meta = load_meta(dir)?;
    let manifest = std::fs::read_to_string(dir.join("manifest.tsv"))?;
    let mut files = BTreeMap::new();
    for line in manifest.lines() {
        let mut parts = line.split('\t');
        match (parts.next(), parts.next()) {
            (Some(name), Some(file)) => files.insert(name.to_string(), file.to_string()),
            _ => return Err(Error::Format(format!("bad manifest line: {line}"))),
        };
    }
    let mut err: Option<Error> = None;
    let mut seen = Vec::new();
    visit_mut(&mut |name, value| {
        if err.is_some() {
            return;
        }
        seen.push(name.to_string());
        let Some(file) = files.get(name) else {
            err = Some(Error::Format(format!("checkpoint missing parameter {name}")));
            return;
        };
        match ntf::read(&dir.join(file)) {
            Ok(t) => {
                if t.shape() != value.shape() {
                    err = Some(Error::Shape {
                        context: format!("checkpoint tensor {name}"),
                        expected: format!("{:?}", value.shape()),
                        got: format!("{:?}", t.shape()),
                    });
                    return;
                }
                let wide = t.to_f64();
                value.zip_mut_with(&wide, |dst, src| *dst = S::lit(*src));
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    for name in files.keys() {
        if !seen.contains(name) {
            return Err(Error::Format(format!("unexpected checkpoint tensor {name}")));
        }
    }
    Ok(meta)
}

/// FNV-1a digest over parameter names and exact value bit patterns; used to
/// assert that frozen parameter sets never change.
pub fn checksum<S: Scalar>(visit: impl FnOnce(&mut dyn FnMut(&str, &ArrayD<S>))) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    visit(&mut |name, value| {
        eat(name.as_bytes());
        for v in value.iter() {
            eat(&v.to_f64_lossy().to_bits().to_le_bytes());
        }
    });
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::dicn::SdicModels;

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let cfg = RunConfig::reduced();
        let models: SdicModels<f64> = SdicModels::new(&cfg.model, Variant::Full);
        let dir = tempfile::tempdir().unwrap();
        save_params::<f64>(dir.path(), &cfg, 17, |f| {
            models.dipn.visit(f);
            models.dicn.visit(f);
        })
        .unwrap();
        let mut other: SdicModels<f64> = SdicModels::new(&cfg.model, Variant::Full);
        // scramble, then restore from disk
        other.dipn.visit_mut(&mut |_, v| v.fill(9.0));
        let (loaded_cfg, step) = load_params::<f64>(dir.path(), |f| {
            other.dipn.visit_mut(f);
            other.dicn.visit_mut(f);
        })
        .unwrap();
        assert_eq!(step, 17);
        assert_eq!(loaded_cfg, cfg);
        let a = checksum::<f64>(|f| {
            models.dipn.visit(f);
            models.dicn.visit(f);
        });
        let b = checksum::<f64>(|f| {
            other.dipn.visit(f);
            other.dicn.visit(f);
        });
        assert_eq!(a, b);
    }

    #[test]
    fn checksum_sensitive_to_any_entry() {
        let cfg = RunConfig::reduced();
        let mut models: SdicModels<f64> = SdicModels::new(&cfg.model, Variant::Full);
        let before = checksum::<f64>(|f| models.dicn.visit(f));
        let mut flipped = false;
        models.dicn.visit_mut(&mut |_, v| {
            if !flipped {
                if let Some(x) = v.iter_mut().next() {
                    *x += 1e-9;
                    flipped = true;
                }
            }
        });
        let after = checksum::<f64>(|f| models.dicn.visit(f));
        assert_ne!(before, after);
    }

    #[test]
    fn variant_mismatch_detected() {
        let cfg = RunConfig::reduced();
        let models: SdicModels<f64> = SdicModels::new(&cfg.model, Variant::Full);
        let dir = tempfile::tempdir().unwrap();
        save_params::<f64>(dir.path(), &cfg, 0, |f| models.dicn.visit(f)).unwrap();
        let mut other: SdicModels<f64> = SdicModels::new(&cfg.model, Variant::NoAtt);
        assert!(load_params::<f64>(dir.path(), |f| other.dicn.visit_mut(f)).is_err());
    }
}
