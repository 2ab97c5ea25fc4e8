//! Named-tensor containers (safetensors, little-endian `f64`) with JSON
//! sidecars.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use gunsight_autograd::{Params, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn save_params(path: &Path, params: &Params) -> Result<()> {
    save_params_with_metadata(path, params, None)
}

/// As [`save_params`], with string metadata in the container header.
pub fn save_params_with_metadata(
    path: &Path,
    params: &Params,
    metadata: Option<HashMap<String, String>>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .iter()
        .map(|(name, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), t.shape().to_vec(), raw)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, raw)| {
            TensorView::new(Dtype::F64, shape.clone(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Load(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(views, &metadata, path)
        .map_err(|e| Error::Load(format!("writing {}: {e}", path.display())))
}

/// Header metadata of a parameter container.
pub fn read_metadata(path: &Path) -> Result<HashMap<String, String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    Ok(meta.metadata().clone().unwrap_or_default())
}

pub fn load_params(path: &Path) -> Result<Params> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    st.tensors()
        .into_iter()
        .map(|(name, view)| {
            let data: Vec<f64> = match view.dtype() {
                Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => {
                    return Err(Error::Load(format!(
                        "{name}: unsupported dtype {other:?} (expected F32 or F64)"
                    )))
                }
            };
            Ok((name, Tensor::new(view.shape().to_vec(), data)))
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::validation(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Params::new();
        p.insert("conv0.weight", Tensor::new(vec![2, 1, 1, 1], vec![0.1, -3.5e-12]));
        p.insert("fc.bias", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, 7.0]));
        let path = dir.path().join("m.safetensors");
        save_params(&path, &p).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
    }

    #[test]
    fn garbage_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(load_params(&path), Err(Error::Load(_))));
    }
}
