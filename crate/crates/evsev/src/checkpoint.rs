//! Model checkpoint file: a small binary container holding the config
//! echo (JSON) and the named parameter tensors as little-endian f64.
//! Loading rebuilds the model through the same shape validation as a
//! fresh initialization, so an incompatible checkpoint fails loudly.

use std::collections::BTreeMap;
use std::path::Path;

use evsev_core::model::ModelParams;
use evsev_core::Tensor;

use crate::config::RunConfig;
use crate::error::AppError;

const MAGIC: &[u8; 8] = b"EVSEVCK1";

pub fn save(path: &Path, model: &ModelParams, echo: &BTreeMap<String, String>) -> Result<(), AppError> {
    let echo_json = serde_json::to_vec(echo)
        .map_err(|e| AppError::usage(format!("config echo serialization: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(echo_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&echo_json);
    out.extend_from_slice(&(model.len() as u32).to_le_bytes());
    for p in model.params() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| AppError::usage(format!("{}: {e}", path.display())))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AppError> {
        if self.pos + n > self.bytes.len() {
            return Err(AppError::usage(format!(
                "{}: checkpoint truncated at byte {}",
                self.path, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<usize, AppError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize)
    }

    fn u32(&mut self) -> Result<usize, AppError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn load(path: &Path) -> Result<(ModelParams, RunConfig, BTreeMap<String, String>), AppError> {
    let bytes =
        std::fs::read(path).map_err(|e| AppError::usage(format!("{}: {e}", path.display())))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path: path.display().to_string() };
    if r.take(8)? != MAGIC {
        return Err(AppError::usage(format!("{}: not an evsev checkpoint", path.display())));
    }
    let echo_len = r.u32()?;
    let echo: BTreeMap<String, String> = serde_json::from_slice(r.take(echo_len)?)
        .map_err(|e| AppError::usage(format!("{}: config echo: {e}", path.display())))?;
    let config = RunConfig::from_echo(&echo)?;
    let n_params = r.u32()?;
    let mut tensors = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u16()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| AppError::usage(format!("{}: bad parameter name", path.display())))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(8 * count)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(AppError::usage(format!(
            "{}: {} trailing bytes after parameters",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    let model = ModelParams::from_tensors(config.model_config(), tensors)?;
    Ok((model, config, echo))
}
