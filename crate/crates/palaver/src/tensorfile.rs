//! Binary container for named tensors: a versioned JSON header followed by
//! (name, shape, little-endian f32 data) blobs in a fixed order. Model
//! checkpoints and optimizer state both use it, so files are byte-stable
//! across platforms.

use crate::model::{ModelConfig, ModelParameters, Tensor};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"PLVT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad tensor file: {0}")]
    Corrupt(String),
    #[error("header json: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
}

pub fn write_tensors<W: Write>(
    mut w: W,
    header: &serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<(), TensorFileError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header_bytes = serde_json::to_vec(header)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
        for &dim in &tensor.shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in &tensor.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(
    mut r: R,
) -> Result<(serde_json::Value, Vec<(String, Tensor)>), TensorFileError> {
    let corrupt = |msg: &str| TensorFileError::Corrupt(msg.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    if u32::from_le_bytes(buf4) != VERSION {
        return Err(corrupt("unsupported version"));
    }
    r.read_exact(&mut buf4)?;
    let header_len = u32::from_le_bytes(buf4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: serde_json::Value = serde_json::from_slice(&header_bytes)?;

    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf4)?;
        let name_len = u32::from_le_bytes(buf4) as usize;
        if name_len > 4096 {
            return Err(corrupt("tensor name too long"));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| corrupt("name not utf-8"))?;
        r.read_exact(&mut buf4)?;
        let ndim = u32::from_le_bytes(buf4) as usize;
        if ndim > 8 {
            return Err(corrupt("too many dimensions"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut buf4)?;
            shape.push(u32::from_le_bytes(buf4) as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 30 {
            return Err(corrupt("tensor too large"));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut buf4)?;
            data.push(f32::from_le_bytes(buf4) as f64);
        }
        tensors.push((name, Tensor { shape, data }));
    }
    Ok((header, tensors))
}

/// Write a model checkpoint: config in the header, every parameter tensor in
/// `named_tensors` order.
pub fn save_model(path: &Path, params: &ModelParameters) -> Result<(), TensorFileError> {
    let header = serde_json::json!({
        "format": "model",
        "config": params.config,
    });
    let file = std::fs::File::create(path)?;
    write_tensors(
        std::io::BufWriter::new(file),
        &header,
        &params.named_tensors(),
    )
}

/// Load a model checkpoint, validating every tensor name and shape against
/// the stored config.
pub fn load_model(path: &Path) -> Result<ModelParameters, TensorFileError> {
    let file = std::fs::File::open(path)?;
    let (header, tensors) = read_tensors(std::io::BufReader::new(file))?;
    if header.get("format").and_then(|f| f.as_str()) != Some("model") {
        return Err(TensorFileError::Corrupt("not a model checkpoint".into()));
    }
    let config: ModelConfig = serde_json::from_value(
        header
            .get("config")
            .cloned()
            .ok_or_else(|| TensorFileError::Corrupt("missing config".into()))?,
    )?;
    config
        .validate()
        .map_err(|e| TensorFileError::Mismatch(e.to_string()))?;

    let mut params = crate::model::init_params(&config, config.init_seed)
        .map_err(|e| TensorFileError::Mismatch(e.to_string()))?;
    fill_from_tensors(&mut params, &tensors)?;
    Ok(params)
}

/// Copy loaded (name, tensor) pairs into a parameter container, insisting on
/// exact name and shape agreement.
pub fn fill_from_tensors(
    params: &mut ModelParameters,
    tensors: &[(String, Tensor)],
) -> Result<(), TensorFileError> {
    let mut slots = params.named_tensors_mut();
    if slots.len() != tensors.len() {
        return Err(TensorFileError::Mismatch(format!(
            "expected {} tensors, file has {}",
            slots.len(),
            tensors.len()
        )));
    }
    for ((expected_name, slot), (name, tensor)) in slots.iter_mut().zip(tensors) {
        if expected_name != name {
            return Err(TensorFileError::Mismatch(format!(
                "tensor {name} where {expected_name} was expected"
            )));
        }
        if slot.shape != tensor.shape {
            return Err(TensorFileError::Mismatch(format!(
                "tensor {name}: shape {:?} does not match {:?}",
                tensor.shape, slot.shape
            )));
        }
        slot.data.copy_from_slice(&tensor.data);
    }
    Ok(())
}
