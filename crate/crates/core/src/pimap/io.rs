//! `PIMAP1` parameter files.
//!
//! Layout (little-endian): magic `PIMAP1`, `u32` format version, `u32`
//! d_joint, d_tok and hidden width, `u8` activation-name length and the
//! name, `u8` learned-skip flag, `u64` value count, then every tensor as
//! row-major `f64` in the order of [`super::TENSOR_NAMES`].

use std::path::Path;

use crate::encoder::EncoderPairDescriptor;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pimap::{Activation, PiMapParams};
use crate::scalar::Scalar;

pub const PARAMS_MAGIC: &[u8; 6] = b"PIMAP1";
pub const PARAMS_VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(params: &PiMapParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    for d in [params.d_joint, params.d_tok, params.hidden] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let name = params.activation.name();
    out.push(name.len() as u8);
    out.extend_from_slice(name.as_bytes());
    out.push(params.skip1.is_some() as u8);
    let count = params.num_parameters() as u64;
    out.extend_from_slice(&count.to_le_bytes());
    for (_, t) in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

pub fn save_params<T: Scalar>(params: &PiMapParams<T>, path: &Path) -> Result<()> {
    crate::io::atomic_write(path, &to_bytes(params))
}

/// Loads a parameter file; when `expect` is given, its dimensions must
/// match the active encoder pair.
pub fn load_params<T: Scalar>(path: &Path, expect: Option<&EncoderPairDescriptor>) -> Result<PiMapParams<T>> {
    let bytes = std::fs::read(path)?;
    let params = from_bytes(&bytes, path)?;
    if let Some(d) = expect {
        if params.d_joint != d.d_joint || params.d_tok != d.d_tok {
            return Err(Error::Config(format!(
                "{} was trained for d_joint={}, d_tok={}; encoder `{}` has d_joint={}, d_tok={}",
                path.display(),
                params.d_joint,
                params.d_tok,
                d.encoder_id,
                d.d_joint,
                d.d_tok
            )));
        }
    }
    Ok(params)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8], path: &Path) -> Result<PiMapParams<T>> {
    let corrupt = |why: &str| Error::corrupt(path, why.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(corrupt("truncated"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(PARAMS_MAGIC.len())? != PARAMS_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != PARAMS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: PARAMS_VERSION,
        });
    }
    let d_joint = u32_at(take(4)?) as usize;
    let d_tok = u32_at(take(4)?) as usize;
    let hidden = u32_at(take(4)?) as usize;
    let name_len = take(1)?[0] as usize;
    let name = std::str::from_utf8(take(name_len)?).map_err(|_| corrupt("activation name is not UTF-8"))?;
    let activation = Activation::from_name(name).map_err(|e| corrupt(&e.to_string()))?;
    let has_skip = match take(1)?[0] {
        0 => false,
        1 => true,
        _ => return Err(corrupt("bad skip flag")),
    };
    if d_joint == 0 || d_tok == 0 || hidden == 0 || has_skip == (hidden == d_joint) {
        return Err(corrupt("inconsistent header"));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let expected = hidden * d_joint * (1 + has_skip as usize) + 2 * hidden * hidden + 5 * hidden + d_tok * hidden;
    if count != expected {
        return Err(corrupt("value count does not match header dimensions"));
    }
    let raw = take(count * 8)?;
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    let values: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite parameter"));
    }
    let mut it = values.into_iter().map(T::lit);
    let mut vec = |n: usize| -> Vec<T> { it.by_ref().take(n).collect() };
    let w1 = Matrix::from_vec(hidden, d_joint, vec(hidden * d_joint))?;
    let b1 = vec(hidden);
    let skip1 = if has_skip {
        Some(Matrix::from_vec(hidden, d_joint, vec(hidden * d_joint))?)
    } else {
        None
    };
    let w2 = Matrix::from_vec(hidden, hidden, vec(hidden * hidden))?;
    let b2 = vec(hidden);
    let w3 = Matrix::from_vec(hidden, hidden, vec(hidden * hidden))?;
    let b3 = vec(hidden);
    let cond1 = vec(hidden);
    let cond2 = vec(hidden);
    let proj = Matrix::from_vec(d_tok, hidden, vec(d_tok * hidden))?;
    let params = PiMapParams {
        d_joint,
        d_tok,
        hidden,
        activation,
        w1,
        b1,
        skip1,
        w2,
        b2,
        w3,
        b3,
        cond1,
        cond2,
        proj,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::substream;

    fn params() -> PiMapParams<f64> {
        PiMapParams::init(6, 4, 6, Activation::Tanh, &mut substream(5, "init")).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.pimap");
        let b = dir.path().join("b.pimap");
        let p = params();
        save_params(&p, &a).unwrap();
        let loaded: PiMapParams<f64> = load_params(&a, None).unwrap();
        assert_eq!(loaded, p);
        save_params(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn wrong_dimensions_for_encoder_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.pimap");
        save_params(&params(), &a).unwrap();
        let d = EncoderPairDescriptor {
            encoder_id: "x".into(),
            d_joint: 8,
            d_tok: 4,
            normalizes_output: true,
        };
        assert!(matches!(load_params::<f64>(&a, Some(&d)), Err(Error::Config(_))));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = to_bytes(&params());
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(
                from_bytes::<f64>(&bytes[..cut], Path::new("p")),
                Err(Error::Corrupt { .. })
            ));
        }
    }

    #[test]
    fn future_version_is_rejected() {
        let mut bytes = to_bytes(&params());
        bytes[6..10].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            from_bytes::<f64>(&bytes, Path::new("p")),
            Err(Error::Version { found: 9, .. })
        ));
    }
}
