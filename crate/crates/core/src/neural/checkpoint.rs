//! Binary checkpoint container.
//!
//! ```text
//! "SKCK" | u32 version | u32 len | header JSON (config, role)
//! u32 tensor count | per tensor: u32 name len, name, u32 ndim, u32 dims.., f32 data..
//! ```
//! All integers and floats little-endian; tensor data row-major.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Role, UNet, UNetConfig, UNetModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SKCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_NAME: usize = 1 << 12;

#[derive(Serialize, Deserialize)]
struct Header {
    role: Role,
    config: UNetConfig,
}

fn fmt(message: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        message: message.into(),
    }
}

fn put_u32(out: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| fmt(format!("value {v} exceeds u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(input: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint(model: &UNetModel, mut out: impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header {
        role: model.role,
        config: model.config.clone(),
    })?;
    put_u32(&mut out, header.len())?;
    out.write_all(&header)?;
    put_u32(&mut out, model.params.len() + model.buffers.len())?;
    for p in model.params.iter().chain(&model.buffers) {
        put_u32(&mut out, p.name.len())?;
        out.write_all(p.name.as_bytes())?;
        put_u32(&mut out, p.shape.len())?;
        for &d in &p.shape {
            put_u32(&mut out, d)?;
        }
        let mut bytes = Vec::with_capacity(4 * p.value.len());
        for v in &p.value {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    Ok(())
}

/// Reads a checkpoint, rebuilding the graph from the stored config and
/// requiring every tensor to match it by name and shape.
pub fn read_checkpoint(mut input: impl Read) -> Result<UNetModel> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = get_u32(&mut input)? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let len = get_u32(&mut input)?;
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    header.config.validate()?;
    let mut model: UNetModel = UNet::new(header.config, header.role, 0);

    let count = get_u32(&mut input)?;
    let expected = model.params.len() + model.buffers.len();
    if count != expected {
        return Err(fmt(format!("expected {expected} tensors, found {count}")));
    }
    for slot in model.params.iter_mut().chain(model.buffers.iter_mut()) {
        let n = get_u32(&mut input)?;
        if n > MAX_NAME {
            return Err(fmt("tensor name too long"));
        }
        let mut name = vec![0u8; n];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| fmt("tensor name is not UTF-8"))?;
        if name != slot.name {
            return Err(fmt(format!("expected tensor `{}`, found `{name}`", slot.name)));
        }
        let ndim = get_u32(&mut input)?;
        let shape = (0..ndim).map(|_| get_u32(&mut input)).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape {
            return Err(fmt(format!("tensor `{name}` has shape {shape:?}, expected {:?}", slot.shape)));
        }
        let mut bytes = vec![0u8; 4 * slot.value.len()];
        input.read_exact(&mut bytes)?;
        for (v, b) in slot.value.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(fmt(format!("tensor `{name}` contains non-finite values")));
            }
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &UNetModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::file(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<UNetModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e.to_string()))?;
    read_checkpoint(bytes.as_slice()).map_err(|e| Error::file(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::build_unet;

    #[test]
    fn round_trip_and_corruption() {
        let cfg = UNetConfig::flownet(16).with_widths(&[4, 8, 8]);
        let mut model = build_unet(cfg, Role::FlowNet, 5).unwrap();
        model.buffers[0].value[0] = 0.25;
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, model);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
