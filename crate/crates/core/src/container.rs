//! Bit-specified container format for weight bundles.
//!
//! Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON
//! header mapping tensor names to `{dtype, shape, data_offsets}` plus a
//! `__metadata__` object, then a contiguous little-endian row-major data
//! region indexed by the offsets. Saving sorts tensors by name so the byte
//! layout is deterministic. The vocabulary lives in a `<stem>.vocab.json`
//! sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{BundleError, LayerWeights, WeightBundle};
use crate::matrix::MatrixError;
use crate::Mat;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed header: {reason}")]
    MalformedHeader { reason: String },
    #[error("tensor {name}: unsupported dtype {dtype:?} (only \"f32\" and \"f64\")")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor {name}: offsets [{begin}, {end}) invalid for data region of {region} bytes")]
    OffsetRange {
        name: String,
        begin: u64,
        end: u64,
        region: u64,
    },
    #[error("tensors {first} and {second} overlap in the data region")]
    OverlappingTensors { first: String, second: String },
    #[error("tensor {name}: byte span {got} does not match dtype and shape ({want})")]
    ByteLength { name: String, got: u64, want: u64 },
    #[error("tensor {name}: expected {want} dimensions, got {got}")]
    Rank { name: String, want: usize, got: usize },
    #[error("unknown tensor name {name:?}")]
    UnknownTensor { name: String },
    #[error("missing mandatory tensor {name}")]
    MissingTensor { name: String },
    #[error("metadata field {field} is missing or not a string-encoded number")]
    BadMetadata { field: &'static str },
    #[error("vocabulary file {path}: {reason}")]
    BadVocab { path: PathBuf, reason: String },
    #[error("bundle invariant violated: {0}")]
    Invalid(#[from] BundleError),
    #[error(transparent)]
    Shape(#[from] MatrixError),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

const METADATA_KEY: &str = "__metadata__";

/// Sidecar vocabulary path: `<stem>.vocab.json` next to the bundle file.
pub fn vocab_path(bundle_path: &Path) -> PathBuf {
    bundle_path.with_extension("vocab.json")
}

/// Loads and validates a weight bundle (tensors plus vocabulary sidecar).
/// All tensors come back as 64-bit floats regardless of the stored dtype.
pub fn load_bundle(path: &Path) -> Result<WeightBundle, ContainerError> {
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 8 {
        return Err(ContainerError::MalformedHeader {
            reason: format!("file is {} bytes, need at least 8", bytes.len()),
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let data_start = (header_len as usize).checked_add(8).ok_or_else(|| {
        ContainerError::MalformedHeader {
            reason: "header length overflows".to_string(),
        }
    })?;
    if header_len == 0 || data_start > bytes.len() {
        return Err(ContainerError::MalformedHeader {
            reason: format!(
                "header length {header_len} incompatible with file of {} bytes",
                bytes.len()
            ),
        });
    }
    let header: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..data_start]).map_err(|e| {
            ContainerError::MalformedHeader {
                reason: e.to_string(),
            }
        })?;
    let data = &bytes[data_start..];
    let region = data.len() as u64;

    let metadata = header
        .get(METADATA_KEY)
        .and_then(|v| v.as_object())
        .ok_or(ContainerError::BadMetadata {
            field: METADATA_KEY,
        })?;
    let meta_f64 = |field: &'static str| -> Result<f64, ContainerError> {
        metadata
            .get(field)
            .and_then(|v| v.as_str())
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or(ContainerError::BadMetadata { field })
    };
    let rope_base = meta_f64("rope_base")?;
    let norm_epsilon = meta_f64("norm_epsilon")?;
    let num_layers = metadata
        .get("num_layers")
        .and_then(|v| v.as_str())
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or(ContainerError::BadMetadata {
            field: "num_layers",
        })?;

    // decode entries, validate offsets, reject unknown names
    let mut spans: Vec<(u64, u64, String)> = Vec::new();
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for (name, value) in &header {
        if name == METADATA_KEY {
            continue;
        }
        parse_tensor_name(name, num_layers)?;
        let entry: TensorEntry = serde_json::from_value(value.clone()).map_err(|e| {
            ContainerError::MalformedHeader {
                reason: format!("tensor {name}: {e}"),
            }
        })?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > region {
            return Err(ContainerError::OffsetRange {
                name: name.clone(),
                begin,
                end,
                region,
            });
        }
        let elem_size: u64 = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => {
                return Err(ContainerError::UnsupportedDtype {
                    name: name.clone(),
                    dtype: other.to_string(),
                })
            }
        };
        let count: usize = entry.shape.iter().product();
        let want = count as u64 * elem_size;
        if end - begin != want {
            return Err(ContainerError::ByteLength {
                name: name.clone(),
                got: end - begin,
                want,
            });
        }
        spans.push((begin, end, name.clone()));
        let raw = &data[begin as usize..end as usize];
        let values: Vec<f64> = match entry.dtype.as_str() {
            "f32" => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            _ => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        tensors.insert(name.clone(), (entry.shape, values));
    }

    spans.sort();
    for pair in spans.windows(2) {
        let (_, end_a, name_a) = &pair[0];
        let (begin_b, _, name_b) = &pair[1];
        if begin_b < end_a {
            return Err(ContainerError::OverlappingTensors {
                first: name_a.clone(),
                second: name_b.clone(),
            });
        }
    }

    fn take_matrix(
        tensors: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
        name: &str,
    ) -> Result<Option<Mat>, ContainerError> {
        match tensors.remove(name) {
            None => Ok(None),
            Some((shape, values)) => {
                if shape.len() != 2 {
                    return Err(ContainerError::Rank {
                        name: name.to_string(),
                        want: 2,
                        got: shape.len(),
                    });
                }
                Ok(Some(Mat::from_vec(shape[0], shape[1], values)?))
            }
        }
    }

    let embedding =
        take_matrix(&mut tensors, "embedding")?.ok_or(ContainerError::MissingTensor {
            name: "embedding".to_string(),
        })?;
    let lm_head = take_matrix(&mut tensors, "lm_head")?;
    let mut layers = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let mandatory_matrix = |m: Option<Mat>, field: &str| {
            m.ok_or(ContainerError::MissingTensor {
                name: format!("layers.{l}.{field}"),
            })
        };
        let q = mandatory_matrix(take_matrix(&mut tensors, &format!("layers.{l}.q"))?, "q")?;
        let k = mandatory_matrix(take_matrix(&mut tensors, &format!("layers.{l}.k"))?, "k")?;
        let v = take_matrix(&mut tensors, &format!("layers.{l}.v"))?;
        let o = take_matrix(&mut tensors, &format!("layers.{l}.o"))?;
        let ffn_up = take_matrix(&mut tensors, &format!("layers.{l}.ffn_up"))?;
        let ffn_gate = take_matrix(&mut tensors, &format!("layers.{l}.ffn_gate"))?;
        let ffn_down = take_matrix(&mut tensors, &format!("layers.{l}.ffn_down"))?;
        fn take_vector(
            tensors: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
            layer: usize,
            field: &str,
        ) -> Result<Vec<f64>, ContainerError> {
            let name = format!("layers.{layer}.{field}");
            match tensors.remove(&name) {
                None => Err(ContainerError::MissingTensor { name }),
                Some((shape, values)) => {
                    if shape.len() != 1 {
                        return Err(ContainerError::Rank {
                            name,
                            want: 1,
                            got: shape.len(),
                        });
                    }
                    Ok(values)
                }
            }
        }
        let attn_norm = take_vector(&mut tensors, l, "attn_norm")?;
        let ffn_norm = take_vector(&mut tensors, l, "ffn_norm")?;
        layers.push(LayerWeights {
            q,
            k,
            v,
            o,
            attn_norm,
            ffn_norm,
            ffn_up,
            ffn_gate,
            ffn_down,
        });
    }

    let vocab = load_vocab(&vocab_path(path))?;
    let bundle = WeightBundle {
        vocab,
        embedding,
        layers,
        lm_head,
        rope_base,
        norm_epsilon,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes a validated bundle with a deterministic byte layout (tensors
/// sorted by name), plus the vocabulary sidecar.
pub fn save_bundle(bundle: &WeightBundle, path: &Path) -> Result<(), ContainerError> {
    bundle.validate()?;

    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    let mat = |m: &Mat| (vec![m.rows(), m.cols()], m.data().to_vec());
    tensors.insert("embedding".to_string(), mat(&bundle.embedding));
    if let Some(head) = &bundle.lm_head {
        tensors.insert("lm_head".to_string(), mat(head));
    }
    for (l, layer) in bundle.layers.iter().enumerate() {
        tensors.insert(format!("layers.{l}.q"), mat(&layer.q));
        tensors.insert(format!("layers.{l}.k"), mat(&layer.k));
        for (field, opt) in [
            ("v", &layer.v),
            ("o", &layer.o),
            ("ffn_up", &layer.ffn_up),
            ("ffn_gate", &layer.ffn_gate),
            ("ffn_down", &layer.ffn_down),
        ] {
            if let Some(m) = opt {
                tensors.insert(format!("layers.{l}.{field}"), mat(m));
            }
        }
        tensors.insert(
            format!("layers.{l}.attn_norm"),
            (vec![layer.attn_norm.len()], layer.attn_norm.clone()),
        );
        tensors.insert(
            format!("layers.{l}.ffn_norm"),
            (vec![layer.ffn_norm.len()], layer.ffn_norm.clone()),
        );
    }

    let mut header: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    let mut offset = 0u64;
    for (name, (shape, values)) in &tensors {
        let bytes = values.len() as u64 * 8;
        header.insert(
            name.clone(),
            serde_json::to_value(TensorEntry {
                dtype: "f64".to_string(),
                shape: shape.clone(),
                data_offsets: [offset, offset + bytes],
            })
            .expect("tensor entry serializes"),
        );
        offset += bytes;
    }
    let mut metadata = serde_json::Map::new();
    metadata.insert(
        "rope_base".to_string(),
        serde_json::Value::String(bundle.rope_base.to_string()),
    );
    metadata.insert(
        "norm_epsilon".to_string(),
        serde_json::Value::String(bundle.norm_epsilon.to_string()),
    );
    metadata.insert(
        "num_layers".to_string(),
        serde_json::Value::String(bundle.layers.len().to_string()),
    );
    header.insert(
        METADATA_KEY.to_string(),
        serde_json::Value::Object(metadata),
    );

    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let io_err = |source: std::io::Error| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&header_bytes).map_err(io_err)?;
    for (_, values) in tensors.values() {
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf).map_err(io_err)?;
    }
    file.flush().map_err(io_err)?;

    let vocab_json =
        serde_json::to_vec_pretty(&bundle.vocab).expect("vocabulary serializes");
    fs::write(vocab_path(path), vocab_json).map_err(|source| ContainerError::Io {
        path: vocab_path(path),
        source,
    })?;
    Ok(())
}

/// Loads a token -> row-index map and checks it is a bijection onto 0..V-1.
pub fn load_vocab(path: &Path) -> Result<BTreeMap<String, usize>, ContainerError> {
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: String| ContainerError::BadVocab {
        path: path.to_path_buf(),
        reason,
    };
    let raw: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut vocab = BTreeMap::new();
    let size = raw.len();
    let mut seen = vec![false; size];
    for (token, value) in raw {
        let idx = value
            .as_u64()
            .ok_or_else(|| bad(format!("token {token:?} has a non-integer index")))?
            as usize;
        if idx >= size {
            return Err(bad(format!(
                "index {idx} for token {token:?} leaves a gap in 0..{size}"
            )));
        }
        if seen[idx] {
            return Err(bad(format!("index {idx} assigned to more than one token")));
        }
        seen[idx] = true;
        vocab.insert(token, idx);
    }
    Ok(vocab)
}

fn parse_tensor_name(name: &str, num_layers: usize) -> Result<(), ContainerError> {
    if name == "embedding" || name == "lm_head" {
        return Ok(());
    }
    let unknown = || ContainerError::UnknownTensor {
        name: name.to_string(),
    };
    let rest = name.strip_prefix("layers.").ok_or_else(unknown)?;
    let (index, field) = rest.split_once('.').ok_or_else(unknown)?;
    let layer: usize = index.parse().map_err(|_| unknown())?;
    if layer >= num_layers {
        return Err(ContainerError::UnknownTensor {
            name: format!("{name} (only {num_layers} layers declared)"),
        });
    }
    match field {
        "q" | "k" | "v" | "o" | "attn_norm" | "ffn_norm" | "ffn_up" | "ffn_gate" | "ffn_down" => {
            Ok(())
        }
        _ => Err(unknown()),
    }
}
