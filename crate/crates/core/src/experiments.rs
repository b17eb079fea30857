//! Experiment protocols: the five-setup component ablation, the paired vs
//! unpaired data experiment, and the difficulty-over-years matrix.

use crate::config::TrainConfig;
use crate::data::manifest::DatasetManifest;
use crate::data::pairing::{build_paired_split, build_unpaired_split};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{build_model, EncoderSpec, ParamPolicy};
use crate::report::MatrixArtifact;
use crate::rng;
use crate::trainer::{log::EpochRecord, train, TrainOutcome};
use serde::{Deserialize, Serialize};

/// First u64 of a derived stream, for spawning run seeds from a root seed.
pub fn derive_seed(root: u64, label: &str, indices: &[u64]) -> u64 {
    use rand::RngExt;
    rng::stream(root, label, indices).random()
}

/// The five ablation setups. Setup 5 is the full method; differences are
/// expressed purely through config switches.
pub fn ablation_config(base: &TrainConfig, setup: usize) -> TrainConfig {
    let mut config = base.clone();
    match setup {
        1 => {
            config.policy = ParamPolicy::HeadOnly;
            config.l2_normalize = false;
            config.loss_weights.alpha = 0.0;
            config.loss_weights.beta = 0.0;
            config.slerp_extension = false;
        }
        2 => {
            config.l2_normalize = false;
            config.loss_weights.alpha = 0.0;
            config.loss_weights.beta = 0.0;
            config.slerp_extension = false;
        }
        3 => {
            config.loss_weights.alpha = 0.0;
            config.loss_weights.beta = 0.0;
            config.slerp_extension = false;
        }
        4 => {
            config.slerp_extension = false;
        }
        5 => {}
        other => panic!("ablation setup {other} out of range 1..=5"),
    }
    config
}

pub const ABLATION_NAMES: [&str; 5] = [
    "baseline",
    "+ln",
    "+ln+l2",
    "+ln+l2+unal",
    "+ln+l2+unal+slerp",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub datasets: Vec<String>,
    /// `aurocs[setup][dataset]`, seed-averaged; `None` when the row failed.
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub setup: usize,
    pub name: String,
    pub aurocs: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub error: Option<String>,
}

impl AblationOutcome {
    pub fn to_matrix(&self) -> MatrixArtifact {
        let mut columns = self.datasets.clone();
        columns.push("mean".into());
        MatrixArtifact {
            title: "component ablation (video-level AUROC, seed-averaged)".into(),
            row_label: "setup".into(),
            rows: self.rows.iter().map(|r| format!("{} {}", r.setup, r.name)).collect(),
            columns,
            values: self
                .rows
                .iter()
                .map(|r| {
                    let mut row = r.aurocs.clone();
                    row.push(r.mean);
                    row
                })
                .collect(),
            highlights: Vec::new(),
        }
    }
}

fn train_and_eval(
    spec: &EncoderSpec,
    config: &TrainConfig,
    train_m: &DatasetManifest,
    val_m: &DatasetManifest,
    test_ms: &[DatasetManifest],
) -> Result<(TrainOutcome, Vec<f64>)> {
    let model = build_model(spec, &config.policy, config.seed)?;
    let outcome = train(model, train_m, val_m, config.clone(), None)?;
    let mut aurocs = Vec::with_capacity(test_ms.len());
    for m in test_ms {
        let (scores, _) = eval::score_manifest(&outcome.best_model, config, m, None)?;
        aurocs.push(eval::auroc_of_scores(&scores)?);
    }
    Ok((outcome, aurocs))
}

/// Trains the five setups (each seed-averaged) and evaluates them on every
/// test manifest. A failing setup reports its error and the others continue.
pub fn run_ablation(
    spec: &EncoderSpec,
    train_m: &DatasetManifest,
    val_m: &DatasetManifest,
    test_ms: &[DatasetManifest],
    base_config: &TrainConfig,
    n_seeds: usize,
) -> AblationOutcome {
    let datasets: Vec<String> = test_ms.iter().map(|m| m.name.clone()).collect();
    let mut rows = Vec::new();
    for setup in 1..=5 {
        let mut config = ablation_config(base_config, setup);
        let mut sums = vec![0.0; test_ms.len()];
        let mut failure = None;
        for seed_ix in 0..n_seeds {
            config.seed = derive_seed(base_config.seed, "ablation_run", &[setup as u64, seed_ix as u64]);
            match train_and_eval(spec, &config, train_m, val_m, test_ms) {
                Ok((_, aurocs)) => {
                    for (s, a) in sums.iter_mut().zip(&aurocs) {
                        *s += a;
                    }
                }
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        let row = match failure {
            None => {
                let aurocs: Vec<Option<f64>> =
                    sums.iter().map(|s| Some(s / n_seeds as f64)).collect();
                let mean =
                    aurocs.iter().map(|a| a.unwrap()).sum::<f64>() / aurocs.len().max(1) as f64;
                AblationRow {
                    setup,
                    name: ABLATION_NAMES[setup - 1].into(),
                    aurocs,
                    mean: Some(mean),
                    error: None,
                }
            }
            Some(message) => AblationRow {
                setup,
                name: ABLATION_NAMES[setup - 1].into(),
                aurocs: vec![None; test_ms.len()],
                mean: None,
                error: Some(message),
            },
        };
        rows.push(row);
    }
    AblationOutcome { datasets, rows }
}

/// Per-epoch curves of one pairing condition, averaged over trials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionCurves {
    pub train_mean: Vec<f64>,
    pub train_std: Vec<f64>,
    pub val_mean: Vec<f64>,
    pub val_std: Vec<f64>,
    pub best_val_aurocs: Vec<f64>,
    /// train AUROC minus val AUROC at each run's best-validation epoch
    pub divergence_at_best: Vec<f64>,
}

fn summarize_condition(histories: &[Vec<EpochRecord>], bests: Vec<(f64, usize)>) -> ConditionCurves {
    let epochs = histories.iter().map(Vec::len).max().unwrap_or(0);
    let mut train_mean = vec![0.0; epochs];
    let mut val_mean = vec![0.0; epochs];
    let mut train_std = vec![0.0; epochs];
    let mut val_std = vec![0.0; epochs];
    for e in 0..epochs {
        let tvals: Vec<f64> = histories.iter().filter_map(|h| h.get(e)).map(|r| r.train_auroc).collect();
        let vvals: Vec<f64> = histories.iter().filter_map(|h| h.get(e)).map(|r| r.val_auroc).collect();
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
        let std = |xs: &[f64], m: f64| {
            (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len().max(1) as f64).sqrt()
        };
        train_mean[e] = mean(&tvals);
        val_mean[e] = mean(&vvals);
        train_std[e] = std(&tvals, train_mean[e]);
        val_std[e] = std(&vvals, val_mean[e]);
    }
    let divergence_at_best = histories
        .iter()
        .zip(&bests)
        .map(|(h, (_, best_epoch))| {
            h.get(*best_epoch)
                .map(|r| r.train_auroc - r.val_auroc)
                .unwrap_or(0.0)
        })
        .collect();
    ConditionCurves {
        train_mean,
        train_std,
        val_mean,
        val_std,
        best_val_aurocs: bests.iter().map(|(v, _)| *v).collect(),
        divergence_at_best,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairingOutcome {
    pub trials: usize,
    pub paired: ConditionCurves,
    pub unpaired: ConditionCurves,
    /// mean best-val AUROC, paired minus unpaired
    pub gap: f64,
}

impl PairingOutcome {
    pub fn mean_best(curves: &ConditionCurves) -> f64 {
        curves.best_val_aurocs.iter().sum::<f64>() / curves.best_val_aurocs.len().max(1) as f64
    }

    pub fn mean_divergence(curves: &ConditionCurves) -> f64 {
        curves.divergence_at_best.iter().sum::<f64>() / curves.divergence_at_best.len().max(1) as f64
    }
}

/// Runs `n_trials` paired and unpaired trainings (same reals per trial, same
/// model seeds across conditions) and summarizes learning curves.
pub fn run_pairing_experiment(
    spec: &EncoderSpec,
    manifest: &DatasetManifest,
    val_m: &DatasetManifest,
    n_trials: usize,
    base_config: &TrainConfig,
) -> Result<PairingOutcome> {
    let mut histories: [Vec<Vec<EpochRecord>>; 2] = [Vec::new(), Vec::new()];
    let mut bests: [Vec<(f64, usize)>; 2] = [Vec::new(), Vec::new()];
    for trial in 0..n_trials {
        let trial_seed = derive_seed(base_config.seed, "pair_trial", &[trial as u64]);
        let paired = build_paired_split(manifest, trial_seed)?;
        let unpaired = build_unpaired_split(manifest, trial_seed)?;
        let mut config = base_config.clone();
        config.seed = derive_seed(base_config.seed, "pair_run", &[trial as u64]);
        for (cond, data) in [(0usize, &paired), (1usize, &unpaired)] {
            let model = build_model(spec, &config.policy, config.seed)?;
            let outcome = train(model, data, val_m, config.clone(), None)?;
            histories[cond].push(outcome.epochs.clone());
            bests[cond].push((outcome.best_val_auroc, outcome.best_epoch));
        }
    }
    let [paired_h, unpaired_h] = histories;
    let [paired_b, unpaired_b] = bests;
    let paired = summarize_condition(&paired_h, paired_b);
    let unpaired = summarize_condition(&unpaired_h, unpaired_b);
    let gap = PairingOutcome::mean_best(&paired) - PairingOutcome::mean_best(&unpaired);
    Ok(PairingOutcome {
        trials: n_trials,
        paired,
        unpaired,
        gap,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct YearsOutcome {
    /// One row per training dataset, one column per test dataset (year order
    /// preserved from the input).
    pub matrix: MatrixArtifact,
}

/// Trains one model per (train, val) pair and evaluates each on every test
/// manifest; in-dataset cells (same dataset tag) are highlighted.
pub fn run_years_experiment(
    spec: &EncoderSpec,
    train_sets: &[(DatasetManifest, DatasetManifest)],
    test_ms: &[DatasetManifest],
    base_config: &TrainConfig,
) -> Result<YearsOutcome> {
    if train_sets.len() < 2 {
        return Err(Error::InvalidConfig(
            "years experiment needs at least two training datasets".into(),
        ));
    }
    let mut values = Vec::new();
    let mut highlights = Vec::new();
    let mut rows = Vec::new();
    for (row_ix, (train_m, val_m)) in train_sets.iter().enumerate() {
        let mut config = base_config.clone();
        config.seed = derive_seed(base_config.seed, "years_run", &[row_ix as u64]);
        let (_, aurocs) = train_and_eval(spec, &config, train_m, val_m, test_ms)?;
        let train_tag = train_m.records.first().map(|r| r.dataset.clone()).unwrap_or_default();
        for (col_ix, test) in test_ms.iter().enumerate() {
            let test_tag = test.records.first().map(|r| r.dataset.clone()).unwrap_or_default();
            if test_tag == train_tag {
                highlights.push((row_ix, col_ix));
            }
        }
        rows.push(format!("trained on {}", train_m.name));
        values.push(aurocs.into_iter().map(Some).collect());
    }
    Ok(YearsOutcome {
        matrix: MatrixArtifact {
            title: "detection difficulty over release years (video-level AUROC)".into(),
            row_label: "model".into(),
            rows,
            columns: test_ms.iter().map(|m| m.name.clone()).collect(),
            values,
            highlights,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setup_one_is_frozen_linear_probe() {
        let base = TrainConfig::default();
        let c = ablation_config(&base, 1);
        assert_eq!(c.policy, ParamPolicy::HeadOnly);
        assert!(!c.l2_normalize);
        assert_eq!(c.loss_weights.alpha, 0.0);
        assert_eq!(c.loss_weights.beta, 0.0);
        assert!(!c.slerp_extension);
        c.validate().unwrap();
    }

    #[test]
    fn setup_five_equals_base_config() {
        let base = TrainConfig::default();
        assert_eq!(ablation_config(&base, 5), base);
    }

    #[test]
    fn intermediate_setups_flip_one_switch_at_a_time() {
        let base = TrainConfig::default();
        let c2 = ablation_config(&base, 2);
        let c3 = ablation_config(&base, 3);
        let c4 = ablation_config(&base, 4);
        assert_eq!(c2.policy, base.policy);
        assert!(!c2.l2_normalize && c3.l2_normalize);
        assert_eq!(c3.loss_weights.alpha, 0.0);
        assert_eq!(c4.loss_weights, base.loss_weights);
        assert!(!c4.slerp_extension);
        for c in [c2, c3, c4] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn derive_seed_is_stable_and_distinct() {
        assert_eq!(derive_seed(1, "x", &[0]), derive_seed(1, "x", &[0]));
        assert_ne!(derive_seed(1, "x", &[0]), derive_seed(1, "x", &[1]));
        assert_ne!(derive_seed(1, "x", &[0]), derive_seed(2, "x", &[0]));
    }
}
