//! In-memory transformer weight bundles and their validation rules. All
//! tensors are held as 64-bit floats regardless of how a file stored them:
//! the unbiased estimator downstream subtracts near-equal large terms and
//! needs the headroom.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::Mat;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BundleError {
    #[error("vocabulary has {vocab} entries but the embedding has {rows} rows")]
    VocabSize { vocab: usize, rows: usize },
    #[error("vocabulary indices are not a bijection onto 0..{size}: index {index} {problem}")]
    VocabNotBijective {
        size: usize,
        index: usize,
        problem: &'static str,
    },
    #[error("layer {layer} tensor {tensor} is {got_rows}x{got_cols}, expected {want_rows}x{want_cols}")]
    LayerShape {
        layer: usize,
        tensor: &'static str,
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("layer {layer} {tensor} has odd row count {dim}; rotary blocks need an even one")]
    OddHeadDim {
        layer: usize,
        tensor: &'static str,
        dim: usize,
    },
    #[error("layer {layer} norm vector {tensor} has length {got}, expected {want}")]
    NormLength {
        layer: usize,
        tensor: &'static str,
        got: usize,
        want: usize,
    },
    #[error("layer {layer} has only part of the v/o/ffn tensor group")]
    PartialForwardGroup { layer: usize },
    #[error("lm head is {got_rows}x{got_cols}, expected {want_rows}x{want_cols}")]
    LmHeadShape {
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("{tensor} contains a non-finite value")]
    NonFinite { tensor: String },
    #[error("rope base must be positive, got {value}")]
    NonPositiveRopeBase { value: String },
    #[error("norm epsilon must be positive, got {value}")]
    NonPositiveEpsilon { value: String },
}

/// Per-layer attention and feed-forward weights. Q/K and the two norm
/// vectors are mandatory; the v/o/ffn group is only needed for the
/// reference forward pass and must be all-present or all-absent.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub q: Mat,
    pub k: Mat,
    pub v: Option<Mat>,
    pub o: Option<Mat>,
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
    pub ffn_up: Option<Mat>,
    pub ffn_gate: Option<Mat>,
    pub ffn_down: Option<Mat>,
}

impl LayerWeights {
    /// True when the v/o/ffn group needed by the forward pass is present.
    pub fn has_forward_tensors(&self) -> bool {
        self.v.is_some()
            && self.o.is_some()
            && self.ffn_up.is_some()
            && self.ffn_gate.is_some()
            && self.ffn_down.is_some()
    }

    fn any_forward_tensor(&self) -> bool {
        self.v.is_some()
            || self.o.is_some()
            || self.ffn_up.is_some()
            || self.ffn_gate.is_some()
            || self.ffn_down.is_some()
    }
}

/// A transformer's weights plus the two scalars the manipulation algebra
/// touches (rotary frequency base and norm epsilon).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub vocab: BTreeMap<String, usize>,
    pub embedding: Mat,
    pub layers: Vec<LayerWeights>,
    pub lm_head: Option<Mat>,
    pub rope_base: f64,
    pub norm_epsilon: f64,
}

impl WeightBundle {
    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        if !self.rope_base.is_finite() || self.rope_base <= 0.0 {
            return Err(BundleError::NonPositiveRopeBase {
                value: self.rope_base.to_string(),
            });
        }
        if !self.norm_epsilon.is_finite() || self.norm_epsilon <= 0.0 {
            return Err(BundleError::NonPositiveEpsilon {
                value: self.norm_epsilon.to_string(),
            });
        }

        let v = self.vocab_size();
        let n = self.hidden_dim();
        if self.vocab.len() != v {
            return Err(BundleError::VocabSize {
                vocab: self.vocab.len(),
                rows: v,
            });
        }
        let mut seen = vec![false; v];
        for &idx in self.vocab.values() {
            if idx >= v {
                return Err(BundleError::VocabNotBijective {
                    size: v,
                    index: idx,
                    problem: "out of range",
                });
            }
            if seen[idx] {
                return Err(BundleError::VocabNotBijective {
                    size: v,
                    index: idx,
                    problem: "duplicated",
                });
            }
            seen[idx] = true;
        }

        check_finite("embedding", &self.embedding)?;
        if let Some(head) = &self.lm_head {
            if head.rows() != v || head.cols() != n {
                return Err(BundleError::LmHeadShape {
                    got_rows: head.rows(),
                    got_cols: head.cols(),
                    want_rows: v,
                    want_cols: n,
                });
            }
            check_finite("lm_head", head)?;
        }

        for (l, layer) in self.layers.iter().enumerate() {
            for (name, m) in [("q", &layer.q), ("k", &layer.k)] {
                if m.cols() != n {
                    return Err(BundleError::LayerShape {
                        layer: l,
                        tensor: name,
                        got_rows: m.rows(),
                        got_cols: m.cols(),
                        want_rows: m.rows(),
                        want_cols: n,
                    });
                }
                if m.rows() % 2 != 0 || m.rows() == 0 {
                    return Err(BundleError::OddHeadDim {
                        layer: l,
                        tensor: name,
                        dim: m.rows(),
                    });
                }
                check_finite_layer(l, name, m)?;
            }
            for (name, vecr) in [("attn_norm", &layer.attn_norm), ("ffn_norm", &layer.ffn_norm)] {
                if vecr.len() != n {
                    return Err(BundleError::NormLength {
                        layer: l,
                        tensor: name,
                        got: vecr.len(),
                        want: n,
                    });
                }
                if vecr.iter().any(|x| !x.is_finite()) {
                    return Err(BundleError::NonFinite {
                        tensor: format!("layers.{l}.{name}"),
                    });
                }
            }
            if layer.any_forward_tensor() {
                if !layer.has_forward_tensors() {
                    return Err(BundleError::PartialForwardGroup { layer: l });
                }
                let vmat = layer.v.as_ref().unwrap();
                let omat = layer.o.as_ref().unwrap();
                let up = layer.ffn_up.as_ref().unwrap();
                let gate = layer.ffn_gate.as_ref().unwrap();
                let down = layer.ffn_down.as_ref().unwrap();
                if vmat.cols() != n {
                    return Err(layer_shape(l, "v", vmat, vmat.rows(), n));
                }
                if omat.rows() != n || omat.cols() != vmat.rows() {
                    return Err(layer_shape(l, "o", omat, n, vmat.rows()));
                }
                if up.cols() != n {
                    return Err(layer_shape(l, "ffn_up", up, up.rows(), n));
                }
                if gate.rows() != up.rows() || gate.cols() != n {
                    return Err(layer_shape(l, "ffn_gate", gate, up.rows(), n));
                }
                if down.rows() != n || down.cols() != up.rows() {
                    return Err(layer_shape(l, "ffn_down", down, n, up.rows()));
                }
                for (name, m) in [
                    ("v", vmat),
                    ("o", omat),
                    ("ffn_up", up),
                    ("ffn_gate", gate),
                    ("ffn_down", down),
                ] {
                    check_finite_layer(l, name, m)?;
                }
            }
        }
        Ok(())
    }
}

fn layer_shape(
    layer: usize,
    tensor: &'static str,
    got: &Mat,
    want_rows: usize,
    want_cols: usize,
) -> BundleError {
    BundleError::LayerShape {
        layer,
        tensor,
        got_rows: got.rows(),
        got_cols: got.cols(),
        want_rows,
        want_cols,
    }
}

fn check_finite(name: &str, m: &Mat) -> Result<(), BundleError> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(BundleError::NonFinite {
            tensor: name.to_string(),
        })
    }
}

fn check_finite_layer(layer: usize, name: &str, m: &Mat) -> Result<(), BundleError> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(BundleError::NonFinite {
            tensor: format!("layers.{layer}.{name}"),
        })
    }
}
