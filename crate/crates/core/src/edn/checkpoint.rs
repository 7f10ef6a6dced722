//! Model checkpoints:
//!
//! ```text
//! "EDNM" u16 version
//! u32 height, u32 width, u32 c1, u32 c2, u32 c3, u8 upsample,
//! f64 noise scale, f64 residual scale
//! u32 parameter count, then each parameter as f32 in declaration order
//! u32 norm count, then running mean and running variance of each
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::model::{EdnConfig, EdnModel, Upsample};
use crate::error::{Error, Result};
use crate::format::{ByteReader, ByteWriter};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 4] = b"EDNM";
pub const MODEL_VERSION: u16 = 1;

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &mut EdnModel<T>, w: W) -> Result<W> {
    let cfg = *model.config();
    let mut w = ByteWriter::new(w);
    w.bytes(MODEL_MAGIC)?;
    w.u16(MODEL_VERSION)?;
    w.u32(dim(cfg.height)?)?;
    w.u32(dim(cfg.width)?)?;
    for c in cfg.channels {
        w.u32(dim(c)?)?;
    }
    w.u8(match cfg.upsample {
        Upsample::PixelShuffle => 0,
        Upsample::TransposedConv => 1,
    })?;
    w.f64(cfg.noise_scale)?;
    w.f64(cfg.residual_scale)?;
    let params = model.params_mut();
    w.u32(dim(params.len())?)?;
    for p in params {
        w.f32_array(p.value.data())?;
    }
    let norms = model.norms_mut();
    w.u32(dim(norms.len())?)?;
    for bn in norms {
        w.f32_array(bn.running_mean.data())?;
        w.f32_array(bn.running_var.data())?;
    }
    Ok(w.into_inner())
}

pub fn read_checkpoint<T: Scalar, R: Read>(r: R) -> Result<EdnModel<T>> {
    let mut r = ByteReader::new(r);
    r.magic(MODEL_MAGIC)?;
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let channels = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let upsample = match r.u8()? {
        0 => Upsample::PixelShuffle,
        1 => Upsample::TransposedConv,
        u => return Err(Error::Format(format!("unknown upsampling code {u}"))),
    };
    let config = EdnConfig {
        height,
        width,
        channels,
        upsample,
        noise_scale: r.f64()?,
        residual_scale: r.f64()?,
    };
    let mut model = EdnModel::new(config, 0).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, configuration expects {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = r.tensor(&shape)?;
    }
    let count = r.u32()? as usize;
    let mut norms = model.norms_mut();
    if count != norms.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} norm layers, configuration expects {}",
            norms.len()
        )));
    }
    for bn in norms.iter_mut() {
        let shape = bn.running_mean.shape().to_vec();
        bn.running_mean = r.tensor(&shape)?;
        bn.running_var = r.tensor(&shape)?;
    }
    r.expect_end()?;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &mut EdnModel<T>, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(model, Vec::new())?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<EdnModel<T>> {
    read_checkpoint(std::fs::read(path)?.as_slice())
}
