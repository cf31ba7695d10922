//! Binary tensor container and model/predictor checkpoints built on it.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0   magic "TSPKCKPT"
//! 8   format version (u32)
//! 12  byte order of the payload (u8, 0 = little-endian)
//! 13  three zero bytes
//! 16  header length H (u64)
//! 24  header: JSON {metadata, tensors: [{name, dtype, shape, offset, nbytes}]}
//! 24+H payload; tensor offsets are relative to its start
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sparsetune_core::model::Model;
use sparsetune_core::predictor::{PredictorConfig, PredictorSet};
use sparsetune_core::{DType, Element, Tensor, ThresholdSet};

use crate::config::RunConfig;
use crate::error::{io, HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"TSPKCKPT";
pub const VERSION: u32 = 1;
const LITTLE_ENDIAN: u8 = 0;
const PREAMBLE: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()),
            DType::F64 => TensorData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
        }
    }

    pub fn from_slice<T: Element>(data: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(data.iter().map(|x| x.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(data.iter().map(|x| x.as_f64()).collect()),
        }
    }

    /// Values as `T`; the stored dtype must be `T`'s.
    pub fn to_vec<T: Element>(&self) -> Option<Vec<T>> {
        match (self, T::DTYPE) {
            (TensorData::F32(v), DType::F32) => Some(v.iter().map(|&x| T::of_f64(x as f64)).collect()),
            (TensorData::F64(v), DType::F64) => Some(v.iter().map(|&x| T::of_f64(x)).collect()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<DirEntry>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut dir = Vec::with_capacity(self.tensors.len());
        let mut seen = HashSet::new();
        let mut offset = 0u64;
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(HarnessError::Contract(format!("duplicate tensor name {}", t.name)));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(HarnessError::Contract(format!("tensor {} has shape {:?} but {} values", t.name, t.shape, t.data.len())));
            }
            let nbytes = (t.data.len() * t.data.dtype().size()) as u64;
            dir.push(DirEntry { name: t.name.clone(), dtype: t.data.dtype(), shape: t.shape.clone(), offset, nbytes });
            offset += nbytes;
        }
        let header = serde_json::to_vec(&Header { metadata: self.metadata.clone(), tensors: dir }).map_err(|e| HarnessError::Contract(e.to_string()))?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&[LITTLE_ENDIAN, 0, 0, 0]);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            t.data.write_le(&mut out);
        }
        Ok(out)
    }

    /// Parses and validates a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| HarnessError::Checkpoint { path: path.to_path_buf(), msg };
        if bytes.len() < PREAMBLE {
            return Err(bad(format!("truncated: {} bytes is shorter than the fixed preamble", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("bad magic; not a checkpoint container".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("format version {version}, this build reads version {VERSION}")));
        }
        if bytes[12] != LITTLE_ENDIAN {
            return Err(bad(format!("unsupported byte-order marker {}", bytes[12])));
        }
        let hlen = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
        let body = PREAMBLE as u64 + hlen;
        if body > bytes.len() as u64 {
            return Err(bad(format!("truncated: header of {hlen} bytes runs past the end of the file")));
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..body as usize]).map_err(|e| bad(format!("unreadable header: {e}")))?;
        let payload = &bytes[body as usize..];
        let mut entries: Vec<&DirEntry> = header.tensors.iter().collect();
        entries.sort_by_key(|e| e.offset);
        let mut end = 0u64;
        let mut names = HashSet::new();
        for e in &entries {
            if !names.insert(e.name.as_str()) {
                return Err(bad(format!("tensor {} listed twice", e.name)));
            }
            let numel = e.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
            if numel.and_then(|n| n.checked_mul(e.dtype.size() as u64)) != Some(e.nbytes) {
                return Err(bad(format!("tensor {}: {} bytes do not match shape {:?}", e.name, e.nbytes, e.shape)));
            }
            if e.offset < end {
                return Err(bad(format!("tensor {} at offset {} overlaps the previous entry ending at {end}", e.name, e.offset)));
            }
            end = e.offset.checked_add(e.nbytes).ok_or_else(|| bad(format!("tensor {} offset overflows", e.name)))?;
            if end > payload.len() as u64 {
                return Err(bad(format!("truncated: tensor {} ends at {end}, payload has {} bytes", e.name, payload.len())));
            }
        }
        if end != payload.len() as u64 {
            return Err(bad(format!("{} trailing payload bytes", payload.len() as u64 - end)));
        }
        let tensors = header
            .tensors
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: TensorData::read_le(e.dtype, &payload[e.offset as usize..(e.offset + e.nbytes) as usize]),
            })
            .collect();
        Ok(Container { metadata: header.metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        io(&tmp, std::fs::write(&tmp, bytes))?;
        io(path, std::fs::rename(&tmp, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io(path, std::fs::read(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Directory entries as stored, for inspection.
    pub fn directory(bytes: &[u8]) -> Option<Vec<DirEntry>> {
        let hlen = u64::from_le_bytes(bytes.get(16..24)?.try_into().ok()?) as usize;
        let header: Header = serde_json::from_slice(bytes.get(PREAMBLE..PREAMBLE + hlen)?).ok()?;
        Some(header.tensors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorState {
    pub active1: Vec<bool>,
    pub active2: Vec<bool>,
    pub zeros1: Vec<u64>,
    pub zeros2: Vec<u64>,
    pub observed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorMeta {
    pub config: PredictorConfig,
    pub hidden: usize,
    /// `[q, k]` per layer.
    pub layers: Vec<[PredictorState; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub artifact_hash: String,
    pub has_model: bool,
    pub predictor: Option<PredictorMeta>,
    pub thresholds: Option<ThresholdSet>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// What a checkpoint file holds once loaded.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub model: Option<Model<T>>,
    pub predictors: Option<PredictorSet<T>>,
}

fn predictor_state<T: Element>(p: &sparsetune_core::predictor::Predictor<T>) -> PredictorState {
    let (a1, a2) = p.active_masks();
    let (z1, z2, observed) = p.zero_counts();
    PredictorState { active1: a1.to_vec(), active2: a2.to_vec(), zeros1: z1.to_vec(), zeros2: z2.to_vec(), observed }
}

/// Writes any of a model, a predictor set and a threshold set.
pub fn save_checkpoint<T: Element>(
    path: &Path,
    config: &RunConfig,
    model: Option<&Model<T>>,
    predictors: Option<&PredictorSet<T>>,
    thresholds: Option<&ThresholdSet>,
    extra: serde_json::Value,
) -> Result<()> {
    let mut tensors = Vec::new();
    if let Some(m) = model {
        for (name, shape, data) in m.state() {
            tensors.push(NamedTensor { name: format!("model.{name}"), shape, data: TensorData::from_slice(data) });
        }
    }
    let predictor = predictors.map(|set| {
        for (name, t) in set.named_tensors() {
            tensors.push(NamedTensor { name, shape: t.shape().to_vec(), data: TensorData::from_slice(t.data()) });
        }
        PredictorMeta {
            config: set.config,
            hidden: set.layers.first().map_or(0, |p| p.q.hidden()),
            layers: set.layers.iter().map(|p| [predictor_state(&p.q), predictor_state(&p.k)]).collect(),
        }
    });
    let meta = CheckpointMeta {
        config: config.clone(),
        artifact_hash: config.artifact_hash(),
        has_model: model.is_some(),
        predictor,
        thresholds: thresholds.cloned(),
        extra,
    };
    let metadata = serde_json::to_value(&meta).map_err(|e| HarnessError::Contract(e.to_string()))?;
    Container { metadata, tensors }.save(path)
}

fn take<T: Element>(by_name: &mut BTreeMap<String, NamedTensor>, name: &str, shape: &[usize], path: &Path) -> Result<Vec<T>> {
    let bad = |msg: String| HarnessError::Checkpoint { path: path.to_path_buf(), msg };
    let t = by_name.remove(name).ok_or_else(|| bad(format!("tensor {name} is missing")))?;
    if t.shape != shape {
        return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
    }
    t.data.to_vec().ok_or_else(|| bad(format!("tensor {name} is {:?}, expected {:?}", t.data.dtype(), T::DTYPE)))
}

/// Reads a checkpoint. Nothing is returned unless every tensor matches the
/// structure described by the stored config.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let c = Container::load(path)?;
    let bad = |msg: String| HarnessError::Checkpoint { path: path.to_path_buf(), msg };
    let meta: CheckpointMeta = serde_json::from_value(c.metadata).map_err(|e| bad(format!("unreadable metadata: {e}")))?;
    let mut by_name: BTreeMap<String, NamedTensor> = c.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    let model = if meta.has_model {
        let mut m = Model::<T>::new(meta.config.model.clone(), meta.config.training.seed)?;
        let shapes: Vec<(String, Vec<usize>)> = m.state().into_iter().map(|(n, s, _)| (n, s)).collect();
        let mut values = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            values.push(take::<T>(&mut by_name, &format!("model.{name}"), shape, path)?);
        }
        for ((_, dst), src) in m.state_mut().into_iter().zip(values) {
            dst.copy_from_slice(&src);
        }
        Some(m)
    } else {
        None
    };
    let predictors = match &meta.predictor {
        Some(pm) => {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            let mut set = PredictorSet::<T>::new(pm.layers.len(), pm.hidden, pm.config, &mut rng);
            for (l, states) in pm.layers.iter().enumerate() {
                let pair = &mut set.layers[l];
                for (side, p, st) in [("q", &mut pair.q, &states[0]), ("k", &mut pair.k, &states[1])] {
                    for (w, t) in [("w1", &mut p.w1), ("w2", &mut p.w2), ("w3", &mut p.w3)] {
                        let data = take::<T>(&mut by_name, &format!("predictor.{l}.{side}.{w}"), t.shape(), path)?;
                        *t = Tensor::from_vec(t.shape(), data)?;
                    }
                    p.restore_state(st.active1.clone(), st.active2.clone(), st.zeros1.clone(), st.zeros2.clone(), st.observed)?;
                }
            }
            Some(set)
        }
        None => None,
    };
    if let Some(extra) = by_name.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { meta, model, predictors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Container {
        Container {
            metadata: serde_json::json!({"k": 1}),
            tensors: vec![
                NamedTensor { name: "a".into(), shape: vec![2, 2], data: TensorData::F32(vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE]) },
                NamedTensor { name: "b".into(), shape: vec![3], data: TensorData::F64(vec![0.1, 1e-300, -0.0]) },
            ],
        }
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let c = small();
        let back = Container::from_bytes(&c.to_bytes().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back.metadata, c.metadata);
        for (a, b) in back.tensors.iter().zip(&c.tensors) {
            assert_eq!(a.name, b.name);
            match (&a.data, &b.data) {
                (TensorData::F64(x), TensorData::F64(y)) => assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())),
                (TensorData::F32(x), TensorData::F32(y)) => assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())),
                _ => panic!("dtype changed"),
            }
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = small().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(Container::from_bytes(&bytes[..cut], Path::new("x")).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn header_corruptions_are_rejected() {
        let bytes = small().to_bytes().unwrap();
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(Container::from_bytes(&m, Path::new("x")).unwrap_err().to_string().contains("magic"));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(Container::from_bytes(&v, Path::new("x")).unwrap_err().to_string().contains("version"));
        let mut e = bytes;
        e[12] = 1;
        assert!(Container::from_bytes(&e, Path::new("x")).is_err());
    }
}
