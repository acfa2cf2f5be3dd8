//! Tensor container, model manifests and atomic file output.
//!
//! Tensor files (`.mqt`) are a 8-byte header, `ndim` little-endian `u32`
//! dimensions and a row-major little-endian `f32` payload:
//!
//! ```text
//! "MQT1" | dtype: u8 (0 = f32) | ndim: u8 | 0u8 | 0u8 | dims... | values...
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::GroupAxis;

pub const MAGIC: &[u8; 4] = b"MQT1";
pub const DTYPE_F32: u8 = 0;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            dims: vec![values.len()],
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn matrix(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(m.row(r).iter().map(|&v| v as f32));
        }
        Tensor {
            dims: vec![rows, cols],
            data,
        }
    }

    pub fn to_vector(&self) -> Option<Vec<f64>> {
        (self.dims.len() == 1).then(|| self.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn to_matrix(&self) -> Option<DMatrix<f64>> {
        match self.dims[..] {
            [rows, cols] => Some(DMatrix::from_row_iterator(
                rows,
                cols,
                self.data.iter().map(|&v| f64::from(v)),
            )),
            _ => None,
        }
    }
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.dims.len() > usize::from(u8::MAX) {
        return Err(Error::InvalidTensor(format!("{} dimensions", t.dims.len())));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[DTYPE_F32, t.dims.len() as u8, 0, 0]);
    for &d in &t.dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidTensor(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a tensor file's bytes. `path` only labels errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(path.into()));
    }
    if bytes.len() < 8 {
        return Err(Error::InvalidTensor(format!("truncated header in {}", path.display())));
    }
    let dtype = bytes[4];
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype {
            path: path.into(),
            dtype,
        });
    }
    let ndim = usize::from(bytes[5]);
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::InvalidTensor(format!(
            "non-zero reserved bytes in {}",
            path.display()
        )));
    }
    let header = 8 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::InvalidTensor(format!("truncated dims in {}", path.display())));
    }
    let dims: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidTensor(format!("dims overflow in {}", path.display())))?;
    let payload = &bytes[header..];
    if Some(payload.len()) != count.checked_mul(4) {
        return Err(Error::PayloadLength {
            path: path.into(),
            expected: count.saturating_mul(4),
            actual: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(path.into()));
    }
    Ok(Tensor { dims, data })
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.into()),
        _ => Error::io(path, e),
    })?;
    decode_tensor(&bytes, path)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t)?)
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so `path` only ever holds a complete file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.into()),
        _ => Error::io(path, e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertEntry {
    pub expert_id: usize,
    /// Absent when the pre-trained router was not kept.
    #[serde(default)]
    pub router_init: Option<String>,
    pub router_final: String,
    pub w1: String,
    /// Whether neurons are the rows or the columns of `w1`.
    pub neuron_axis: GroupAxis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub layer_id: usize,
    pub experts: Vec<ExpertEntry>,
}

/// `manifest.json`: tensor paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub model_name: String,
    pub layers: Vec<LayerEntry>,
}

impl ModelManifest {
    pub fn validate(&self) -> Result<()> {
        let mut layer_ids = HashSet::new();
        for layer in &self.layers {
            if !layer_ids.insert(layer.layer_id) {
                return Err(Error::Manifest(format!("duplicate layer_id {}", layer.layer_id)));
            }
            if layer.experts.is_empty() {
                return Err(Error::Manifest(format!("layer {} has no experts", layer.layer_id)));
            }
            let mut ids = HashSet::new();
            for e in &layer.experts {
                if !ids.insert(e.expert_id) {
                    return Err(Error::DuplicateExpert(e.expert_id));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedExpert {
    pub expert_id: usize,
    pub router_init: Option<Vec<f64>>,
    pub router_final: Vec<f64>,
    pub w1: DMatrix<f64>,
    pub neuron_axis: GroupAxis,
}

impl LoadedExpert {
    /// Token dimension: the length of the router and of every neuron.
    pub fn dim(&self) -> usize {
        self.router_final.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedLayer {
    pub layer_id: usize,
    pub experts: Vec<LoadedExpert>,
}

impl LoadedLayer {
    /// Some expert lacks its initial router, so Λ falls back to `‖w_T‖`.
    pub fn needs_surrogate(&self) -> bool {
        self.experts.iter().any(|e| e.router_init.is_none())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    pub manifest: ModelManifest,
    pub layers: Vec<LoadedLayer>,
}

fn load_vector(dir: &Path, rel: &str) -> Result<Vec<f64>> {
    let path = dir.join(rel);
    let t = read_tensor(&path)?;
    t.to_vector()
        .ok_or_else(|| Error::ShapeMismatch(format!("{}: router must be 1-D, got {:?}", path.display(), t.dims)))
}

fn load_expert(dir: &Path, layer_id: usize, e: &ExpertEntry) -> Result<LoadedExpert> {
    let router_final = load_vector(dir, &e.router_final)?;
    let router_init = e.router_init.as_deref().map(|p| load_vector(dir, p)).transpose()?;
    let w1_path = dir.join(&e.w1);
    let t = read_tensor(&w1_path)?;
    let w1 = t
        .to_matrix()
        .ok_or_else(|| Error::ShapeMismatch(format!("{}: w1 must be 2-D, got {:?}", w1_path.display(), t.dims)))?;
    let d = match e.neuron_axis {
        GroupAxis::Row => w1.ncols(),
        GroupAxis::Column => w1.nrows(),
    };
    let label = format!("layer {layer_id} expert {}", e.expert_id);
    if router_final.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "{label}: router length {} but w1 has {d} inputs per neuron",
            router_final.len()
        )));
    }
    if let Some(init) = &router_init {
        if init.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "{label}: initial router length {} but final router length {d}",
                init.len()
            )));
        }
    }
    Ok(LoadedExpert {
        expert_id: e.expert_id,
        router_init,
        router_final,
        w1,
        neuron_axis: e.neuron_axis,
    })
}

/// Reads `dir/manifest.json` and every tensor it names.
pub fn load_manifest(dir: &Path) -> Result<LoadedModel> {
    let manifest: ModelManifest = read_json(&dir.join(MANIFEST_FILE)).map_err(|e| match e {
        Error::Json(j) => Error::Manifest(j.to_string()),
        other => other,
    })?;
    manifest.validate()?;
    let layers = manifest
        .layers
        .iter()
        .map(|l| {
            let experts = l
                .experts
                .iter()
                .map(|e| load_expert(dir, l.layer_id, e))
                .collect::<Result<Vec<_>>>()?;
            Ok(LoadedLayer {
                layer_id: l.layer_id,
                experts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedModel { manifest, layers })
}

/// Writes `model` under `dir` with one file per tensor and a manifest that
/// names them. Existing files are replaced.
pub fn save_model(dir: &Path, model_name: &str, layers: &[LoadedLayer]) -> Result<ModelManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = ModelManifest {
        model_name: model_name.to_string(),
        layers: Vec::with_capacity(layers.len()),
    };
    for layer in layers {
        let mut entries = Vec::with_capacity(layer.experts.len());
        for e in &layer.experts {
            let stem = format!("l{}_e{}", layer.layer_id, e.expert_id);
            let router_init = match &e.router_init {
                Some(r) => {
                    let name = format!("{stem}_router_init.mqt");
                    write_tensor(&dir.join(&name), &Tensor::vector(r))?;
                    Some(name)
                }
                None => None,
            };
            let router_final = format!("{stem}_router_final.mqt");
            write_tensor(&dir.join(&router_final), &Tensor::vector(&e.router_final))?;
            let w1 = format!("{stem}_w1.mqt");
            write_tensor(&dir.join(&w1), &Tensor::matrix(&e.w1))?;
            entries.push(ExpertEntry {
                expert_id: e.expert_id,
                router_init,
                router_final,
                w1,
                neuron_axis: e.neuron_axis,
            });
        }
        manifest.layers.push(LayerEntry {
            layer_id: layer.layer_id,
            experts: entries,
        });
    }
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let t = sample();
        let back = decode_tensor(&encode_tensor(&t).unwrap(), Path::new("x")).unwrap();
        assert_eq!(back.dims, t.dims);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.data), bits(&t.data));
    }

    #[test]
    fn header_layout() {
        let bytes = encode_tensor(&sample()).unwrap();
        assert_eq!(&bytes[..8], b"MQT1\x00\x02\x00\x00");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 6 * 4);
    }

    #[test]
    fn distinct_errors() {
        let p = Path::new("t.mqt");
        let good = encode_tensor(&sample()).unwrap();

        let truncated = &good[..good.len() - 3];
        let err = decode_tensor(truncated, p).unwrap_err();
        assert_eq!(err.code(), "payload_length_mismatch");
        assert!(err.to_string().contains("payload length mismatch"));

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode_tensor(&bad, p).unwrap_err().code(), "bad_magic");

        let mut bad = good.clone();
        bad[4] = 7;
        assert_eq!(decode_tensor(&bad, p).unwrap_err().code(), "unsupported_dtype");

        let mut bad = good.clone();
        bad[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(decode_tensor(&bad, p).unwrap_err().code(), "non_finite");

        assert_eq!(
            read_tensor(Path::new("/nonexistent/t.mqt")).unwrap_err().code(),
            "missing_file"
        );
    }

    #[test]
    fn matrix_is_row_major() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let t = Tensor::matrix(&m);
        assert_eq!(t.data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.to_matrix().unwrap(), m);
        assert!(t.to_vector().is_none());
    }
}
