//! `AMTP` checkpoint files.
//!
//! ```text
//! magic     "AMTP"
//! version   u32 = 1
//! config    variant u8, feature_dim u32, whole_dim u32, d_a u32,
//!           head_hidden u32, n_tasks u32, dropout_rate f64,
//!           per_model_primary_attention u8, hidden_activation u8,
//!           shared_hidden_sizes (u32 count, u32 × count),
//!           task_hidden_sizes (u32 count, u32 × count),
//!           init_seed u64, projection_seed u64
//! count     u64
//! values    f64 × count, in flat parameter order
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::{HiddenActivation, ModelConfig, Variant};
use super::params::ModelParams;
use crate::error::{Error, FormatError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AMTP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn u32_of(v: usize, field: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{field} = {v} does not fit in u32")))
}

pub fn encode_checkpoint<W: Write>(mut w: W, params: &ModelParams) -> Result<()> {
    let c = params.config();
    let mut buf = Vec::with_capacity(64 + params.len() * 8);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(c.variant.tag());
    for (v, name) in [
        (c.feature_dim, "feature_dim"),
        (c.whole_dim, "whole_dim"),
        (c.d_a, "d_a"),
        (c.head_hidden, "head_hidden"),
        (c.n_tasks, "n_tasks"),
    ] {
        buf.extend_from_slice(&u32_of(v, name)?.to_le_bytes());
    }
    buf.extend_from_slice(&c.dropout_rate.to_le_bytes());
    buf.push(u8::from(c.per_model_primary_attention));
    buf.push(c.hidden_activation.tag());
    for (sizes, name) in [
        (&c.shared_hidden_sizes, "shared_hidden_sizes"),
        (&c.task_hidden_sizes, "task_hidden_sizes"),
    ] {
        buf.extend_from_slice(&u32_of(sizes.len(), name)?.to_le_bytes());
        for &s in sizes {
            buf.extend_from_slice(&u32_of(s, name)?.to_le_bytes());
        }
    }
    buf.extend_from_slice(&c.init_seed.to_le_bytes());
    buf.extend_from_slice(&c.projection_seed.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io("<writer>", e))
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> std::result::Result<[u8; N], FormatError> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| FormatError::Truncated { context: what.into() })?;
        Ok(b)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, FormatError> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn f64(&mut self, what: &str) -> std::result::Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn sizes(&mut self, what: &str) -> std::result::Result<Vec<usize>, FormatError> {
        let n = self.u32(what)?;
        (0..n).map(|_| self.u32(what).map(|v| v as usize)).collect()
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> FormatError {
    FormatError::InvalidField {
        field: field.into(),
        reason: reason.into(),
    }
}

pub fn decode_checkpoint<R: Read>(reader: R) -> std::result::Result<ModelParams, FormatError> {
    let mut r = Cursor { inner: reader };
    let magic = r.bytes::<4>("magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let tag = r.u8("variant")?;
    let variant = Variant::from_tag(tag).ok_or_else(|| invalid("variant", format!("unknown tag {tag}")))?;
    let feature_dim = r.u32("feature_dim")? as usize;
    let whole_dim = r.u32("whole_dim")? as usize;
    let d_a = r.u32("d_a")? as usize;
    let head_hidden = r.u32("head_hidden")? as usize;
    let n_tasks = r.u32("n_tasks")? as usize;
    let dropout_rate = r.f64("dropout_rate")?;
    let per_model_primary_attention = match r.u8("per_model_primary_attention")? {
        0 => false,
        1 => true,
        other => return Err(invalid("per_model_primary_attention", format!("{other} is not a bool"))),
    };
    let act = r.u8("hidden_activation")?;
    let hidden_activation = HiddenActivation::from_tag(act)
        .ok_or_else(|| invalid("hidden_activation", format!("unknown tag {act}")))?;
    let shared_hidden_sizes = r.sizes("shared_hidden_sizes")?;
    let task_hidden_sizes = r.sizes("task_hidden_sizes")?;
    let init_seed = r.u64("init_seed")?;
    let projection_seed = r.u64("projection_seed")?;
    let config = ModelConfig {
        variant,
        feature_dim,
        whole_dim,
        d_a,
        head_hidden,
        n_tasks,
        dropout_rate,
        per_model_primary_attention,
        hidden_activation,
        shared_hidden_sizes,
        task_hidden_sizes,
        init_seed,
        projection_seed,
    };
    let mut params = ModelParams::zeros(&config).map_err(|e| invalid("config", e.to_string()))?;
    let count = r.u64("parameter count")?;
    if count != params.len() as u64 {
        return Err(invalid(
            "parameter count",
            format!("{count} stored, config implies {}", params.len()),
        ));
    }
    let mut raw = vec![0u8; params.len() * 8];
    r.inner
        .read_exact(&mut raw)
        .map_err(|_| FormatError::Truncated { context: "parameters".into() })?;
    for (dst, chunk) in params.values_mut().iter_mut().zip(raw.chunks_exact(8)) {
        *dst = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(params)
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_checkpoint(&mut w, params).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(BufReader::new(file)).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use proptest::prelude::*;

    fn tiny(variant: Variant, seed: u64) -> ModelConfig {
        let mut c = ModelConfig::for_variant(variant);
        c.feature_dim = 6;
        c.whole_dim = 10;
        c.d_a = 2;
        c.head_hidden = 3;
        c.shared_hidden_sizes = vec![5];
        c.task_hidden_sizes = vec![4, 3];
        c.init_seed = seed;
        c.dropout_rate = 0.25;
        c
    }

    #[test]
    fn truncated_and_bad_header() {
        let p = init_params(&tiny(Variant::AttentiveMtl, 1)).unwrap();
        let mut bytes = Vec::new();
        encode_checkpoint(&mut bytes, &p).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[3] = b'F';
        assert!(matches!(decode_checkpoint(&bad[..]), Err(FormatError::BadMagic { .. })));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad[..]), Err(FormatError::VersionMismatch { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn roundtrip_is_bit_exact(seed in any::<u64>(), v in 0usize..5, per_model in any::<bool>()) {
            let variant = Variant::ALL[v];
            let mut config = tiny(variant, seed);
            config.per_model_primary_attention = per_model && variant.is_attentive();
            let p = init_params(&config).unwrap();
            let mut bytes = Vec::new();
            encode_checkpoint(&mut bytes, &p).unwrap();
            let back = decode_checkpoint(&bytes[..]).unwrap();
            prop_assert_eq!(back.config(), p.config());
            let a: Vec<u64> = p.values().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = back.values().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
