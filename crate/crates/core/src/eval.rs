//! Separation metrics over labeled similarity scores (absolute z-scores,
//! ROC curve, AUC, partial AUC, TPR at a fixed FPR) and the synthetic
//! testbed runner that mass-produces positive and negative model pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprint::compare;
use crate::forge::{
    apply_manipulation, generate_base, ForgeConfig, ManipulationSpec, PermSpec, PruneSpec,
    RotationSpec, SignSpec,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("need at least {min} negative scores, got {got}")]
    TooFewNegatives { got: usize, min: usize },
    #[error("negative scores have zero variance")]
    ZeroNegativeVariance,
    #[error("both positive and negative scores are required")]
    SingleLabel,
    #[error("testbed config produces no positive pairs")]
    NoPositives,
    #[error("testbed config invalid: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

/// One scored model pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub pair_id: String,
    pub label: Label,
    pub similarity: f64,
    pub category: String,
}

/// Labeled score collection, sorted by pair id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn positives(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.label == Label::Positive)
            .map(|e| e.similarity)
            .collect()
    }

    pub fn negatives(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.label == Label::Negative)
            .map(|e| e.similarity)
            .collect()
    }
}

/// Summary metrics over a score set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub z_per_positive: Vec<f64>,
    pub mean_abs_z: f64,
    pub roc: Vec<(f64, f64)>,
    pub auc: f64,
    pub pauc: f64,
    pub tpr_at_1pct_fpr: f64,
}

/// Absolute z-score of each positive against the negative population,
/// using the unbiased (n-1) standard deviation.
pub fn z_scores(positives: &[f64], negatives: &[f64]) -> Result<Vec<f64>, EvalError> {
    if negatives.len() < 2 {
        return Err(EvalError::TooFewNegatives {
            got: negatives.len(),
            min: 2,
        });
    }
    let n = negatives.len() as f64;
    let mean = negatives.iter().sum::<f64>() / n;
    let var = negatives.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    if std == 0.0 {
        return Err(EvalError::ZeroNegativeVariance);
    }
    Ok(positives.iter().map(|s| (s - mean).abs() / std).collect())
}

/// Standard threshold sweep, higher similarity meaning more positive. Tied
/// scores are grouped; the curve starts at (0, 0) and ends at (1, 1).
pub fn roc_points(scores: &ScoreSet) -> Result<Vec<(f64, f64)>, EvalError> {
    let pos_total = scores.positives().len();
    let neg_total = scores.negatives().len();
    if pos_total == 0 || neg_total == 0 {
        return Err(EvalError::SingleLabel);
    }
    let mut labeled: Vec<(f64, Label)> = scores
        .entries
        .iter()
        .map(|e| (e.similarity, e.label))
        .collect();
    labeled.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite similarities"));

    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < labeled.len() {
        let threshold = labeled[i].0;
        while i < labeled.len() && labeled[i].0 == threshold {
            match labeled[i].1 {
                Label::Positive => tp += 1,
                Label::Negative => fp += 1,
            }
            i += 1;
        }
        points.push((fp as f64 / neg_total as f64, tp as f64 / pos_total as f64));
    }
    Ok(points)
}

/// Trapezoidal area under the curve.
pub fn auc(roc: &[(f64, f64)]) -> f64 {
    roc.windows(2)
        .map(|w| {
            let (x1, y1) = w[0];
            let (x2, y2) = w[1];
            (x2 - x1) * (y1 + y2) / 2.0
        })
        .sum()
}

/// Partial area for fpr in [0, fpr_max], normalized by fpr_max so a perfect
/// detector scores 1.
pub fn pauc(roc: &[(f64, f64)], fpr_max: f64) -> f64 {
    let mut area = 0.0;
    for w in roc.windows(2) {
        let (x1, y1) = w[0];
        let (x2, y2) = w[1];
        if x1 >= fpr_max {
            break;
        }
        if x2 <= x1 {
            continue;
        }
        let x2c = x2.min(fpr_max);
        let y2c = y1 + (y2 - y1) * (x2c - x1) / (x2 - x1);
        area += (x2c - x1) * (y1 + y2c) / 2.0;
    }
    area / fpr_max
}

/// TPR at the given FPR, linearly interpolated between bracketing points
/// (small negative sets rarely achieve the target FPR exactly).
pub fn tpr_at_fpr(roc: &[(f64, f64)], fpr: f64) -> f64 {
    let mut idx = 0;
    for (i, &(x, _)) in roc.iter().enumerate() {
        if x <= fpr {
            idx = i;
        } else {
            break;
        }
    }
    let (x1, y1) = roc[idx];
    if x1 == fpr || idx + 1 >= roc.len() {
        return y1;
    }
    let (x2, y2) = roc[idx + 1];
    y1 + (y2 - y1) * (fpr - x1) / (x2 - x1)
}

/// Computes the full report for a labeled score set.
pub fn evaluate(scores: &ScoreSet) -> Result<EvalReport, EvalError> {
    let positives = scores.positives();
    let negatives = scores.negatives();
    let z_per_positive = z_scores(&positives, &negatives)?;
    let mean_abs_z = z_per_positive.iter().sum::<f64>() / z_per_positive.len().max(1) as f64;
    let roc = roc_points(scores)?;
    let auc_val = auc(&roc);
    let pauc_val = pauc(&roc, 0.05);
    let tpr_val = tpr_at_fpr(&roc, 0.01);
    Ok(EvalReport {
        z_per_positive,
        mean_abs_z,
        roc,
        auc: auc_val,
        pauc: pauc_val,
        tpr_at_1pct_fpr: tpr_val,
    })
}

/// Manipulation families the testbed exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Identity,
    Scale,
    PermuteSign,
    Rotate,
    HiddenPrune,
    LayerPrune,
}

impl Category {
    pub fn name(&self) -> &'static str {
        match self {
            Category::Identity => "identity",
            Category::Scale => "scale",
            Category::PermuteSign => "permute-sign",
            Category::Rotate => "rotate",
            Category::HiddenPrune => "hidden-prune",
            Category::LayerPrune => "layer-prune",
        }
    }
}

/// Testbed plan: one positive pair per (category, noise level), negatives
/// from pairs of independent seeds. `model.seed` anchors the positive base
/// seeds; everything downstream is derived deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedConfig {
    pub model: ForgeConfig,
    pub categories: Vec<Category>,
    pub noise_levels: Vec<f64>,
    pub negatives: usize,
    pub negative_seed: u64,
}

impl TestbedConfig {
    /// The desk-scale default: five manipulation families swept over four
    /// noise levels against thirty independent pairs.
    pub fn default_desk() -> Self {
        TestbedConfig {
            model: ForgeConfig {
                vocab_size: 128,
                hidden: 64,
                layers: 3,
                head_dim: 8,
                ffn_dim: 128,
                rope_base: 10_000.0,
                norm_epsilon: 1e-5,
                seed: 11_000,
            },
            categories: vec![
                Category::Scale,
                Category::PermuteSign,
                Category::Rotate,
                Category::HiddenPrune,
                Category::LayerPrune,
            ],
            noise_levels: vec![0.0, 0.02, 0.05, 0.1],
            negatives: 30,
            negative_seed: 77_000,
        }
    }
}

/// A pair that failed to compare, kept alongside the scores instead of
/// being dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub pair_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedOutcome {
    pub scores: ScoreSet,
    pub failures: Vec<PairFailure>,
    pub report: EvalReport,
}

fn derive_seed(base: u64, salt: u64) -> u64 {
    base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn spec_for(category: Category, pair_seed: u64, noise: f64, layers: usize) -> ManipulationSpec {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(pair_seed);
    let mut spec = ManipulationSpec {
        noise_sigma_rel: noise,
        noise_seed: derive_seed(pair_seed, 5),
        ..ManipulationSpec::identity()
    };
    match category {
        Category::Identity => {}
        Category::Scale => {
            let magnitude = rng.gen_range(0.2..5.0);
            spec.scale = if rng.gen::<bool>() { magnitude } else { -magnitude };
        }
        Category::PermuteSign => {
            spec.perm_seed = Some(PermSpec::Seed(derive_seed(pair_seed, 1)));
            spec.sign_seed = Some(SignSpec::Seed(derive_seed(pair_seed, 2)));
        }
        Category::Rotate => {
            spec.rotation_seed = Some(RotationSpec::Seed(derive_seed(pair_seed, 3)));
        }
        Category::HiddenPrune => {
            spec.perm_seed = Some(PermSpec::Seed(derive_seed(pair_seed, 4)));
            spec.prune = Some(PruneSpec {
                hidden_keep: 0.75,
                layers_keep: None,
            });
        }
        Category::LayerPrune => {
            let dropped = rng.gen_range(0..layers);
            let kept: Vec<usize> = (0..layers).filter(|&l| l != dropped).collect();
            spec.prune = Some(PruneSpec {
                hidden_keep: 1.0,
                layers_keep: Some(kept),
            });
        }
    }
    spec
}

/// Generates every configured pair, compares them (in parallel), and
/// assembles the deterministic score set plus its report. Pairs that fail
/// to compare become failure entries.
pub fn run_testbed(config: &TestbedConfig) -> Result<TestbedOutcome, EvalError> {
    config
        .model
        .validate()
        .map_err(|e| EvalError::Config(e.to_string()))?;
    if config.categories.is_empty() || config.noise_levels.is_empty() {
        return Err(EvalError::NoPositives);
    }
    if config.negatives < 2 {
        return Err(EvalError::TooFewNegatives {
            got: config.negatives,
            min: 2,
        });
    }

    enum Plan {
        Positive {
            pair_id: String,
            base_seed: u64,
            category: Category,
            noise: f64,
            pair_seed: u64,
        },
        Negative {
            pair_id: String,
            seed_a: u64,
            seed_b: u64,
        },
    }

    let mut plans = Vec::new();
    let mut index = 0u64;
    for &category in &config.categories {
        for (ni, &noise) in config.noise_levels.iter().enumerate() {
            plans.push(Plan::Positive {
                pair_id: format!("pos-{}-n{}-{:03}", category.name(), ni, index),
                base_seed: config.model.seed.wrapping_add(index),
                category,
                noise,
                pair_seed: derive_seed(config.model.seed, 1_000 + index),
            });
            index += 1;
        }
    }
    for t in 0..config.negatives as u64 {
        plans.push(Plan::Negative {
            pair_id: format!("neg-{t:03}"),
            seed_a: config.negative_seed.wrapping_add(2 * t),
            seed_b: config.negative_seed.wrapping_add(2 * t + 1),
        });
    }

    let results: Vec<Result<ScoreEntry, PairFailure>> = plans
        .par_iter()
        .map(|plan| match plan {
            Plan::Positive {
                pair_id,
                base_seed,
                category,
                noise,
                pair_seed,
            } => {
                let run = || -> Result<ScoreEntry, String> {
                    let mut base_config = config.model.clone();
                    base_config.seed = *base_seed;
                    let base = generate_base(&base_config).map_err(|e| e.to_string())?;
                    let spec =
                        spec_for(*category, *pair_seed, *noise, config.model.layers);
                    let attacked = apply_manipulation(&base, &spec).map_err(|e| e.to_string())?;
                    let report = compare(&base, &attacked).map_err(|e| e.to_string())?;
                    Ok(ScoreEntry {
                        pair_id: pair_id.clone(),
                        label: Label::Positive,
                        similarity: report.similarity,
                        category: category.name().to_string(),
                    })
                };
                run().map_err(|message| PairFailure {
                    pair_id: pair_id.clone(),
                    message,
                })
            }
            Plan::Negative {
                pair_id,
                seed_a,
                seed_b,
            } => {
                let run = || -> Result<ScoreEntry, String> {
                    let mut config_a = config.model.clone();
                    config_a.seed = *seed_a;
                    let mut config_b = config.model.clone();
                    config_b.seed = *seed_b;
                    let a = generate_base(&config_a).map_err(|e| e.to_string())?;
                    let b = generate_base(&config_b).map_err(|e| e.to_string())?;
                    let report = compare(&a, &b).map_err(|e| e.to_string())?;
                    Ok(ScoreEntry {
                        pair_id: pair_id.clone(),
                        label: Label::Negative,
                        similarity: report.similarity,
                        category: "independent".to_string(),
                    })
                };
                run().map_err(|message| PairFailure {
                    pair_id: pair_id.clone(),
                    message,
                })
            }
        })
        .collect();

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for result in results {
        match result {
            Ok(entry) => entries.push(entry),
            Err(failure) => failures.push(failure),
        }
    }
    entries.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    failures.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));

    let scores = ScoreSet { entries };
    let report = evaluate(&scores).map_err(|e| {
        // when a whole label failed to score, surface why instead of a bare
        // single-label error
        match (&e, failures.first()) {
            (EvalError::SingleLabel, Some(first)) => EvalError::Config(format!(
                "no scored pairs for one label; first pair failure: {}: {}",
                first.pair_id, first.message
            )),
            _ => e,
        }
    })?;
    Ok(TestbedOutcome {
        scores,
        failures,
        report,
    })
}
