//! Model checkpoint format.
//!
//! Layout (all integers little-endian): magic `SDCK`, u32 version = 1,
//! u32 layer count, per-layer records of (u32 kind tag, u32 dim count,
//! u32 dims), u32 parameter count, then per-parameter tensor records
//! (name length + UTF-8 name, u32 rank, u32 extents, raw little-endian
//! 32-bit floats, row-major). Round-trips are bit-exact for 32-bit models.

use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::fileio::{put_tensor_record, put_u32, Reader};
use crate::models::{LayerSpec, Model, Param};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"SDCK";
const VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, model.layers().len() as u32);
    for layer in model.layers() {
        put_u32(&mut out, layer.kind_tag());
        let dims = layer.dims();
        put_u32(&mut out, dims.len() as u32);
        for d in dims {
            put_u32(&mut out, d);
        }
    }
    put_u32(&mut out, model.params().len() as u32);
    for p in model.params() {
        put_tensor_record(&mut out, &p.name, &p.tensor);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let mut r = Reader::open(path)?;
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;

    let layer_count = r.read_u32()? as usize;
    if layer_count == 0 || layer_count > 1024 {
        return Err(r.err(format!("implausible layer count {layer_count}")));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let tag = r.read_u32()?;
        let ndims = r.read_u32()? as usize;
        if ndims > 16 {
            return Err(r.err(format!("implausible dim count {ndims}")));
        }
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.read_u32()?);
        }
        layers.push(LayerSpec::from_tag_dims(tag, &dims).map_err(|e| r.err(e.to_string()))?);
    }

    let param_count = r.read_u32()? as usize;
    let mut records = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        records.push(crate::fileio::read_tensor_record::<T>(&mut r)?);
    }
    r.done()?;

    // Rebuild the parameter list in layer order, validating names and shapes
    // against the layer specs and re-deriving prunable flags.
    let mut params = Vec::with_capacity(param_count);
    let mut next = 0usize;
    for (li, layer) in layers.iter().enumerate() {
        let expected: Vec<(String, Vec<usize>)> = match *layer {
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                (format!("{li}.weight"), vec![in_features, out_features]),
                (format!("{li}.bias"), vec![out_features]),
            ],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kh,
                kw,
                ..
            } => vec![
                (
                    format!("{li}.weight"),
                    vec![out_channels, in_channels, kh, kw],
                ),
                (format!("{li}.bias"), vec![out_channels]),
            ],
            _ => vec![],
        };
        for (name, shape) in expected {
            let Some((got_name, tensor)) = records.get(next) else {
                return Err(r.err(format!("missing parameter record for {name}")));
            };
            if *got_name != name || tensor.shape() != shape.as_slice() {
                return Err(r.err(format!(
                    "parameter record {next} is {got_name:?} {:?}, expected {name:?} {shape:?}",
                    tensor.shape()
                )));
            }
            params.push(Param {
                name,
                tensor: tensor.clone().with_requires_grad(true),
                prunable: got_name.ends_with(".weight"),
            });
            next += 1;
        }
    }
    if next != records.len() {
        return Err(r.err(format!(
            "{} parameter records but layers account for {next}",
            records.len()
        )));
    }

    let input_shape = derive_input_shape(&layers)
        .ok_or_else(|| r.err("cannot derive input shape: no parameterized layers"))?;
    crate::models::validate_flow(&layers, &input_shape).map_err(|e| r.err(e.to_string()))?;
    Ok(Model::from_parts(layers, params, input_shape))
}

fn derive_input_shape(layers: &[LayerSpec]) -> Option<Vec<usize>> {
    match layers.first()? {
        LayerSpec::Conv2d {
            in_channels,
            in_h,
            in_w,
            ..
        } => Some(vec![*in_channels, *in_h, *in_w]),
        _ => layers.iter().find_map(|l| match l {
            LayerSpec::Linear { in_features, .. } => Some(vec![*in_features]),
            _ => None,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::models::{build_model, Architecture, ModelConfig};
    use tempfile::tempdir;

    fn cfg(arch: Architecture) -> ModelConfig {
        ModelConfig {
            arch,
            input_shape: vec![1, 8, 8],
            classes: 4,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        for arch in Architecture::ALL {
            let (model, _) = build_model::<f32>(&cfg(arch), 42).unwrap();
            let path = dir.path().join(format!("{arch}.ckpt"));
            save_checkpoint(&model, &path).unwrap();
            let loaded = load_checkpoint::<f32>(&path).unwrap();
            assert_eq!(model.param_bytes(), loaded.param_bytes(), "{arch}");
            assert_eq!(model.layers(), loaded.layers(), "{arch}");
            // Saving the loaded model reproduces identical file bytes.
            let path2 = dir.path().join(format!("{arch}-2.ckpt"));
            save_checkpoint(&loaded, &path2).unwrap();
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&path2).unwrap()
            );
        }
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let (model, _) = build_model::<f32>(&cfg(Architecture::MlpSmall), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn truncated_file_names_the_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let (model, _) = build_model::<f32>(&cfg(Architecture::CnnSmall), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() - 7;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        match err {
            Error::Format { offset, msg, .. } => {
                assert!(offset > 0 && offset <= cut as u64, "offset {offset}");
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn smaller_model_produces_smaller_file() {
        let dir = tempdir().unwrap();
        let (small, _) = build_model::<f32>(&cfg(Architecture::CnnSmall), 0).unwrap();
        let (teacher, _) = build_model::<f32>(&cfg(Architecture::CnnTeacher), 0).unwrap();
        let ps = dir.path().join("s.ckpt");
        let pt = dir.path().join("t.ckpt");
        save_checkpoint(&small, &ps).unwrap();
        save_checkpoint(&teacher, &pt).unwrap();
        let ls = std::fs::metadata(&ps).unwrap().len();
        let lt = std::fs::metadata(&pt).unwrap().len();
        assert!(ls < lt, "{ls} vs {lt}");
    }

    #[test]
    fn loaded_model_still_runs_forward() {
        let dir = tempdir().unwrap();
        let (model, _) = build_model::<f32>(&cfg(Architecture::CnnTeacher), 3).unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        let x = crate::tensor::Tensor::zeros(vec![2, 1, 8, 8]);
        let a = model.infer_logits(&x).unwrap();
        let b = loaded.infer_logits(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
