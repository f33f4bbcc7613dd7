//! Model and checkpoint files.
//!
//! Model file layout: magic `REAN`, format version u32, model kind u32
//! (1 = attention pooler, 2 = scalar quality MLP, 3 = last-state pooler),
//! D u32, H u32, layer count u32, then a shape manifest (block count u32,
//! each block as rows u32 / cols u32) followed by every parameter block as
//! little-endian f32 in the canonical flat order documented on
//! `AggregatorParams::visit`.
//!
//! Checkpoints append an `ADAM` block (step u64, lr f64, then first and
//! second moments as f64) after the model payload.

use std::fs;
use std::path::Path;

use crate::aggregator::{AggregatorParams, QualityMlpParams};
use crate::data::{put_u32, Reader};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::training::{AdamState, Model};

pub const MODEL_MAGIC: [u8; 4] = *b"REAN";
pub const MODEL_VERSION: u32 = 1;
const ADAM_MAGIC: [u8; 4] = *b"ADAM";

fn kind_code<T>(model: &Model<T>) -> u32 {
    match model {
        Model::Rean(_) => 1,
        Model::QualityPool(_) => 2,
        Model::NaiveLstm(_) => 3,
    }
}

/// (rows, cols) of every parameter block in canonical flat order. Bias
/// vectors are 1 x len.
fn block_shapes(kind: u32, dim: usize, hidden: usize) -> Vec<(usize, usize)> {
    if kind == 2 {
        return vec![(dim, hidden), (1, hidden), (hidden, 1), (1, 1)];
    }
    let mut shapes = Vec::new();
    for layer_input in [dim, 2 * hidden] {
        for _direction in 0..2 {
            for _gate in 0..4 {
                shapes.push((layer_input, hidden)); // w_x
                shapes.push((hidden, hidden)); // w_h
                shapes.push((1, hidden)); // b
            }
        }
    }
    shapes.push((2 * hidden, dim)); // head_w
    shapes.push((1, dim)); // head_b
    shapes
}

pub fn encode_model<T: Real>(model: &Model<T>) -> Vec<u8> {
    let kind = kind_code(model);
    let (dim, hidden, layers) = match model {
        Model::Rean(p) | Model::NaiveLstm(p) => (p.dim, p.hidden, p.layers.len()),
        Model::QualityPool(p) => (p.dim, p.hidden, 0),
    };
    let shapes = block_shapes(kind, dim, hidden);
    let flat = model.to_flat();
    let mut buf = Vec::with_capacity(32 + shapes.len() * 8 + flat.len() * 4);
    buf.extend_from_slice(&MODEL_MAGIC);
    put_u32(&mut buf, MODEL_VERSION);
    put_u32(&mut buf, kind);
    put_u32(&mut buf, dim as u32);
    put_u32(&mut buf, hidden as u32);
    put_u32(&mut buf, layers as u32);
    put_u32(&mut buf, shapes.len() as u32);
    for (r, c) in &shapes {
        put_u32(&mut buf, *r as u32);
        put_u32(&mut buf, *c as u32);
    }
    for v in flat {
        buf.extend_from_slice(&(v.to_f64().unwrap() as f32).to_le_bytes());
    }
    buf
}

pub fn decode_model<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader::new(bytes);
    let model = decode_model_from(&mut r)?;
    Ok(model)
}

fn decode_model_from<T: Real>(r: &mut Reader<'_>) -> Result<Model<T>> {
    let magic = r.take(4)?;
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            expected: MODEL_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let kind = r.u32()?;
    let dim = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let layers = r.u32()? as usize;
    if matches!(kind, 1 | 3) && layers != 2 {
        return Err(Error::Config(format!(
            "unsupported layer count {layers} (this build is fixed at 2)"
        )));
    }
    let expected = block_shapes(kind, dim, hidden);
    let blocks = r.u32()? as usize;
    if blocks != expected.len() {
        return Err(Error::Config(format!(
            "shape manifest lists {blocks} blocks, expected {}",
            expected.len()
        )));
    }
    let mut total = 0usize;
    for (i, &(er, ec)) in expected.iter().enumerate() {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if (rows, cols) != (er, ec) {
            return Err(Error::Config(format!(
                "block {i} has shape {rows}x{cols}, expected {er}x{ec}"
            )));
        }
        total += rows * cols;
    }
    let mut flat = Vec::with_capacity(total);
    for _ in 0..total {
        flat.push(T::c(r.f32()? as f64));
    }
    let mut model = match kind {
        1 => Model::Rean(AggregatorParams::zeros(dim, hidden)),
        2 => Model::QualityPool(QualityMlpParams::zeros(dim, hidden)),
        3 => Model::NaiveLstm(AggregatorParams::zeros(dim, hidden)),
        other => return Err(Error::Config(format!("unknown model kind {other}"))),
    };
    model.assign_from_flat(&flat);
    Ok(model)
}

pub fn save_model<T: Real>(path: &Path, model: &Model<T>) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    decode_model(&fs::read(path).map_err(|e| Error::file(path, e))?)
}

/// Model payload plus optimizer state, for resumable training.
pub fn encode_checkpoint<T: Real>(model: &Model<T>, adam: &AdamState<T>) -> Vec<u8> {
    let mut buf = encode_model(model);
    buf.extend_from_slice(&ADAM_MAGIC);
    buf.extend_from_slice(&adam.step.to_le_bytes());
    buf.extend_from_slice(&adam.lr.to_f64().unwrap().to_le_bytes());
    put_u32(&mut buf, adam.m.len() as u32);
    for v in adam.m.iter().chain(adam.v.iter()) {
        buf.extend_from_slice(&v.to_f64().unwrap().to_le_bytes());
    }
    buf
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(Model<T>, AdamState<T>)> {
    let mut r = Reader::new(bytes);
    let model = decode_model_from(&mut r)?;
    let magic = r.take(4)?;
    if magic != ADAM_MAGIC {
        return Err(Error::BadMagic {
            expected: ADAM_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let step = {
        let b = r.take(8)?;
        u64::from_le_bytes(b.try_into().unwrap())
    };
    let f64_at = |r: &mut Reader<'_>| -> Result<f64> {
        let b = r.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    };
    let lr = f64_at(&mut r)?;
    let n = r.u32()? as usize;
    if n != model.num_params() {
        return Err(Error::Config(format!(
            "optimizer state holds {n} moments, model has {} parameters",
            model.num_params()
        )));
    }
    let mut adam = AdamState::new(n, T::c(lr));
    adam.step = step;
    for k in 0..n {
        adam.m[k] = T::c(f64_at(&mut r)?);
    }
    for k in 0..n {
        adam.v[k] = T::c(f64_at(&mut r)?);
    }
    Ok((model, adam))
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, adam: &AdamState<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, adam))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Model<T>, AdamState<T>)> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::file(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn roundtrip(model: Model<f64>) {
        let bytes = encode_model(&model);
        let back: Model<f64> = decode_model(&bytes).unwrap();
        assert_eq!(encode_model(&back), bytes);
        assert_eq!(back.to_flat().len(), model.num_params());
        // values survive at f32 precision
        for (a, b) in model.to_flat().iter().zip(back.to_flat()) {
            assert_eq!(*a as f32, b as f32);
        }
    }

    #[test]
    fn model_roundtrips_all_kinds() {
        let mut rng = StdRng::seed_from_u64(3);
        roundtrip(Model::Rean(AggregatorParams::init(5, 3, &mut rng)));
        roundtrip(Model::QualityPool(QualityMlpParams::init(5, 4, &mut rng)));
        roundtrip(Model::NaiveLstm(AggregatorParams::init(4, 2, &mut rng)));
    }

    #[test]
    fn model_bad_magic_and_version() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut bytes = encode_model(&Model::Rean(AggregatorParams::<f64>::init(3, 2, &mut rng)));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            decode_model::<f64>(&wrong),
            Err(Error::BadMagic { .. })
        ));
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_model::<f64>(&bytes),
            Err(Error::UnsupportedVersion(7))
        ));
    }

    #[test]
    fn model_truncation_detected() {
        let mut rng = StdRng::seed_from_u64(5);
        let bytes = encode_model(&Model::QualityPool(QualityMlpParams::<f64>::init(3, 2, &mut rng)));
        assert!(matches!(
            decode_model::<f64>(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_adam_state() {
        let mut rng = StdRng::seed_from_u64(6);
        let model = Model::Rean(AggregatorParams::<f64>::init(3, 2, &mut rng));
        let mut adam = AdamState::new(model.num_params(), 0.005);
        adam.step = 17;
        for (k, v) in adam.m.iter_mut().enumerate() {
            *v = k as f64 * 0.1;
        }
        for (k, v) in adam.v.iter_mut().enumerate() {
            *v = k as f64 * 0.01;
        }
        let bytes = encode_checkpoint(&model, &adam);
        let (back_model, back_adam) = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(back_adam.step, 17);
        assert_eq!(back_adam.lr, 0.005);
        assert_eq!(back_adam.m, adam.m);
        assert_eq!(back_adam.v, adam.v);
        assert_eq!(encode_model(&back_model), encode_model(&model));
    }
}
