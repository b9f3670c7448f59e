//! End-to-end lineage detection: restrict two bundles to their shared
//! vocabulary, recover the hidden-dimension permutation and signs from the
//! embedding cosine structure via maximum-weight assignment, score each
//! layer's q/k projections with unbiased CKA, pair layers when depths
//! differ, and aggregate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{solve_max_assignment, AssignmentError};
use crate::bundle::{LayerWeights, WeightBundle};
use crate::kernel::{cka_unbiased, KernelError};
use crate::matrix::{cosine_matrix, MatrixError};
use crate::Mat;

#[derive(Debug, Error)]
pub enum FingerprintError {
    #[error("the two vocabularies share no tokens")]
    EmptyIntersection,
    #[error("shared vocabulary of {got} rows is too small, need at least {min}")]
    SharedVocabTooSmall { got: usize, min: usize },
    #[error("only {got} matched hidden dimensions, need at least {min} for the estimator")]
    TooFewMatchedDims { got: usize, min: usize },
    #[error("bundle has no layers to compare")]
    NoLayers,
    #[error("every matched layer pair had a degenerate similarity estimate")]
    AllLayersDegenerate,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Recovered column correspondence between two embedding matrices: an
/// injective source-to-target map with a sign per match. An exact zero
/// cosine counts as +1 so the result is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnAlignment {
    /// (column of A, column of B) pairs, sorted by the A column.
    pub perm: Vec<(usize, usize)>,
    /// +1 or -1 per matched pair.
    pub signs: Vec<i8>,
    /// Mean absolute cosine over the matched pairs, in [0, 1].
    pub mean_abs_cosine: f64,
}

/// Similarity of one matched layer pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer_a: usize,
    pub layer_b: usize,
    pub s_q: f64,
    pub s_k: f64,
}

/// Full comparison outcome: per-layer scores, the layer pairing when the
/// models differ in depth, the recovered alignment, and the aggregate
/// similarity in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub per_layer: Vec<LayerScore>,
    pub layer_map: Option<Vec<(usize, usize)>>,
    pub similarity: f64,
    pub alignment: ColumnAlignment,
    pub shared_vocab_size: usize,
}

/// Rows of each embedding that carry the shared tokens, ordered by token
/// string so the result is deterministic. Row i of both lists refers to the
/// same token.
pub fn shared_vocab_rows(
    vocab_a: &BTreeMap<String, usize>,
    vocab_b: &BTreeMap<String, usize>,
) -> Result<(Vec<usize>, Vec<usize>), FingerprintError> {
    let mut rows_a = Vec::new();
    let mut rows_b = Vec::new();
    for (token, &idx_a) in vocab_a {
        if let Some(&idx_b) = vocab_b.get(token) {
            rows_a.push(idx_a);
            rows_b.push(idx_b);
        }
    }
    if rows_a.is_empty() {
        return Err(FingerprintError::EmptyIntersection);
    }
    Ok((rows_a, rows_b))
}

/// Recovers the permutation and signs relating the columns of two
/// shared-vocabulary embeddings: maximum-weight assignment on the absolute
/// cosine matrix, signs read off the matched cosines.
pub fn extract_alignment(
    emb_a_shared: &Mat,
    emb_b_shared: &Mat,
) -> Result<ColumnAlignment, FingerprintError> {
    if emb_a_shared.rows() < 2 {
        return Err(FingerprintError::SharedVocabTooSmall {
            got: emb_a_shared.rows(),
            min: 2,
        });
    }
    let cosines = cosine_matrix(emb_a_shared, emb_b_shared)?;
    let abs = Mat::from_fn(cosines.rows(), cosines.cols(), |i, j| {
        cosines.get(i, j).abs()
    });
    let assignment = solve_max_assignment(&abs)?;
    let signs: Vec<i8> = assignment
        .matches
        .iter()
        .map(|&(k, l)| if cosines.get(k, l) < 0.0 { -1 } else { 1 })
        .collect();
    let mean_abs_cosine = assignment.total_weight / assignment.matches.len() as f64;
    Ok(ColumnAlignment {
        perm: assignment.matches,
        signs,
        mean_abs_cosine,
    })
}

/// Unbiased CKA of one layer's q and k projections under the recovered
/// alignment. Samples are hidden dimensions: the A side takes the matched,
/// sign-flipped columns of its projections, the B side the corresponding
/// target columns.
pub fn layer_similarity(
    layer_a: &LayerWeights,
    layer_b: &LayerWeights,
    align: &ColumnAlignment,
) -> Result<(f64, f64), FingerprintError> {
    if align.perm.len() < 4 {
        return Err(FingerprintError::TooFewMatchedDims {
            got: align.perm.len(),
            min: 4,
        });
    }
    let sources: Vec<usize> = align.perm.iter().map(|&(a, _)| a).collect();
    let targets: Vec<usize> = align.perm.iter().map(|&(_, b)| b).collect();
    let project = |w_a: &Mat, w_b: &Mat| -> Result<f64, FingerprintError> {
        let samples_a = w_a
            .transpose()
            .select_rows_signed(&sources, &align.signs)?;
        let samples_b = w_b.transpose().select_rows(&targets)?;
        Ok(cka_unbiased(&samples_a, &samples_b)?)
    };
    let s_q = project(&layer_a.q, &layer_b.q)?;
    let s_k = project(&layer_a.k, &layer_b.k)?;
    Ok((s_q, s_k))
}

/// Maximum-weight pairing of layers from a score matrix (rows: model A
/// layers, columns: model B layers).
pub fn pair_layers(scores: &Mat) -> Result<Vec<(usize, usize)>, FingerprintError> {
    Ok(solve_max_assignment(scores)?.matches)
}

/// Runs the whole detection pipeline on two bundles.
pub fn compare(
    bundle_a: &WeightBundle,
    bundle_b: &WeightBundle,
) -> Result<SimilarityReport, FingerprintError> {
    if bundle_a.layers.is_empty() || bundle_b.layers.is_empty() {
        return Err(FingerprintError::NoLayers);
    }
    let (rows_a, rows_b) = shared_vocab_rows(&bundle_a.vocab, &bundle_b.vocab)?;
    let emb_a = bundle_a.embedding.select_rows(&rows_a)?;
    let emb_b = bundle_b.embedding.select_rows(&rows_b)?;
    let alignment = extract_alignment(&emb_a, &emb_b)?;

    let l_a = bundle_a.layers.len();
    let l_b = bundle_b.layers.len();

    // a degenerate layer estimate carries no evidence either way; score it
    // zero and only fail when every matched pair degenerates
    let score_pair = |la: usize, lb: usize| -> Result<Option<(f64, f64)>, FingerprintError> {
        match layer_similarity(&bundle_a.layers[la], &bundle_b.layers[lb], &alignment) {
            Ok(pair) => Ok(Some(pair)),
            Err(FingerprintError::Kernel(KernelError::DegenerateDenominator)) => Ok(None),
            Err(other) => Err(other),
        }
    };

    let (per_layer, layer_map) = if l_a == l_b {
        let mut scores = Vec::with_capacity(l_a);
        let mut any_ok = false;
        for l in 0..l_a {
            let cell = score_pair(l, l)?;
            any_ok |= cell.is_some();
            let (s_q, s_k) = cell.unwrap_or((0.0, 0.0));
            scores.push(LayerScore {
                layer_a: l,
                layer_b: l,
                s_q,
                s_k,
            });
        }
        if !any_ok {
            return Err(FingerprintError::AllLayersDegenerate);
        }
        (scores, None)
    } else {
        let mut cell_scores = vec![vec![(0.0, 0.0); l_b]; l_a];
        let mut any_ok = false;
        for la in 0..l_a {
            for lb in 0..l_b {
                if let Some(pair) = score_pair(la, lb)? {
                    cell_scores[la][lb] = pair;
                    any_ok = true;
                }
            }
        }
        if !any_ok {
            return Err(FingerprintError::AllLayersDegenerate);
        }
        let weight = Mat::from_fn(l_a, l_b, |la, lb| {
            let (s_q, s_k) = cell_scores[la][lb];
            (s_q.abs() + s_k.abs()) / 2.0
        });
        let pairing = pair_layers(&weight)?;
        let scores = pairing
            .iter()
            .map(|&(la, lb)| {
                let (s_q, s_k) = cell_scores[la][lb];
                LayerScore {
                    layer_a: la,
                    layer_b: lb,
                    s_q,
                    s_k,
                }
            })
            .collect();
        (scores, Some(pairing))
    };

    let matched = per_layer.len() as f64;
    let similarity = per_layer
        .iter()
        .map(|s| s.s_q.abs() + s.s_k.abs())
        .sum::<f64>()
        / (2.0 * matched);

    Ok(SimilarityReport {
        per_layer,
        layer_map,
        similarity,
        alignment,
        shared_vocab_size: rows_a.len(),
    })
}
