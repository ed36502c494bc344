//! Binary model checkpoints: a fixed header followed by little-endian `f32`
//! parameter blocks in declaration order.

use std::io::{Read, Write};

use super::{ChartModel, ModelConfig, OutputFrame};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"CCMD";
pub const VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format { path: "<checkpoint>".into(), msg: msg.into() }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

pub fn write_checkpoint<T: Real>(model: &ChartModel<T>, w: &mut impl Write) -> Result<()> {
    let cfg = model.config();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [cfg.m, cfg.c, cfg.conv1_channels, cfg.conv2_channels, cfg.fc1_units, cfg.fc2_units] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let frame = model.output_frame();
    for v in [frame.center[0], frame.center[1], frame.scale] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(model.num_params() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(4 * model.num_params());
    for v in model.params() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<T: Real>(r: &mut impl Read) -> Result<ChartModel<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(format_err("not a model checkpoint"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let config = ModelConfig {
        m: dims[0],
        c: dims[1],
        conv1_channels: dims[2],
        conv2_channels: dims[3],
        fc1_units: dims[4],
        fc2_units: dims[5],
    };
    config.validate()?;
    let output = OutputFrame {
        center: [read_f64(r)?, read_f64(r)?],
        scale: read_f64(r)?,
    };
    let count = read_u64(r)? as usize;
    if count != config.num_params() {
        return Err(format_err(format!(
            "header declares {count} parameters, layer dims imply {}",
            config.num_params()
        )));
    }
    let mut buf = vec![0u8; 4 * count];
    r.read_exact(&mut buf)?;
    let params = buf
        .chunks_exact(4)
        .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    ChartModel::from_params(config, params, output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let mut model = ChartModel::<f32>::init(3, 10, 9).unwrap();
        model.set_output_frame(OutputFrame { center: [20.0, 10.0], scale: 10.0 });
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();
        let back: ChartModel<f32> = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, model);
        let bits = |m: &ChartModel<f32>| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&model));
    }

    #[test]
    fn corrupt_headers_rejected() {
        let model = ChartModel::<f32>::init(2, 4, 0).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<f32>(&mut bad.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(read_checkpoint::<f32>(&mut bad.as_slice()).is_err());
        let truncated = &bytes[..bytes.len() - 4];
        assert!(read_checkpoint::<f32>(&mut &truncated[..]).is_err());
    }
}
