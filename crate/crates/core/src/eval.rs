//! Frame-to-video score aggregation, video-level AUROC, and the cross-dataset
//! benchmark runner.
//!
//! AUROC is the Mann-Whitney statistic computed by the rank method with
//! midrank tie handling; frame probabilities are fake-class softmax values
//! (class index 1 = fake).

use crate::checkpoint;
use crate::config::{Precision, TrainConfig};
use crate::data::imageops::CropImage;
use crate::data::manifest::{DatasetManifest, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::model::{encode_images, CastParams, Model};
use crate::scalar::Real;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Images per encoder chunk; chunks run in parallel and merge in order.
pub const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub label: u8,
    pub frame_probs: Vec<f64>,
    pub video_prob: f64,
}

/// Arithmetic mean of per-frame probabilities.
pub fn aggregate_video(frame_probs: &[f64]) -> Result<f64> {
    if frame_probs.is_empty() {
        return Err(Error::EmptyVideo);
    }
    Ok(frame_probs.iter().sum::<f64>() / frame_probs.len() as f64)
}

/// Video-level AUROC via midranks: P(score_fake > score_real) + 0.5 P(tie).
pub fn auroc(scores: &[(f64, u8)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|(_, l)| *l == 1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        // midrank of the tie group spanning positions i..=j (1-based ranks)
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &ix in &order[i..=j] {
            if scores[ix].1 == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Encoder features for a batch of images in the configured precision,
/// chunked and parallel, merged in order. Rows are pre-normalization
/// classification-token features cast to f64.
pub fn encode_features_chunked(
    model: &Model,
    precision: Precision,
    images: &[&CropImage],
) -> Result<Array2<f64>> {
    match precision {
        Precision::Full => encode_features_typed::<f64>(model, images),
        Precision::Reduced => encode_features_typed::<f32>(model, images),
    }
}

fn encode_features_typed<F: Real>(model: &Model, images: &[&CropImage]) -> Result<Array2<f64>> {
    let width = model.spec.width;
    if images.is_empty() {
        return Ok(Array2::zeros((0, width)));
    }
    let cast = CastParams::<F>::from_model(model);
    let chunks: Vec<&[&CropImage]> = images.chunks(EVAL_CHUNK).collect();
    let results: Vec<Result<Array2<f64>>> = chunks
        .par_iter()
        .map(|chunk| {
            let graph = encode_images(model, &cast, chunk)?;
            Ok(graph.tape.value(graph.features).mapv(|v| v.to_f64_c()))
        })
        .collect();
    let mut out = Array2::zeros((images.len(), width));
    let mut row = 0;
    for r in results {
        let block = r?;
        out.slice_mut(ndarray::s![row..row + block.nrows(), ..])
            .assign(&block);
        row += block.nrows();
    }
    Ok(out)
}

/// Fake-class probabilities for feature rows through the head, honoring the
/// L2 switch.
pub fn probs_from_features(model: &Model, features: &Array2<f64>, l2: bool) -> Result<Vec<f64>> {
    let head_w = &model.param("head.weight").expect("head.weight").value;
    let head_b = &model.param("head.bias").expect("head.bias").value;
    let mut probs = Vec::with_capacity(features.nrows());
    for row in features.rows() {
        let feat = if l2 {
            crate::sphere::l2_normalize(row)?.into_inner()
        } else {
            row.to_owned()
        };
        let logits = feat.dot(head_w) + &head_b.row(0);
        probs.push(Model::fake_prob([logits[0], logits[1]]));
    }
    Ok(probs)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionTally {
    pub skipped_frames: usize,
    pub excluded_videos: usize,
}

/// Scores every video of a manifest (optionally restricted to a split).
/// Missing crop files skip the frame; a video is excluded only when no frame
/// remains, and the exclusion is tallied.
pub fn score_manifest(
    model: &Model,
    config: &TrainConfig,
    manifest: &DatasetManifest,
    split: Option<Split>,
) -> Result<(Vec<VideoScore>, ExclusionTally)> {
    let records: Vec<&VideoRecord> = manifest
        .records
        .iter()
        .filter(|r| split.map_or(true, |s| r.split == s))
        .collect();
    let mut tally = ExclusionTally::default();

    // load frames, remembering which video each belongs to
    let mut images: Vec<CropImage> = Vec::new();
    let mut owners: Vec<usize> = Vec::new();
    let mut kept: Vec<&VideoRecord> = Vec::new();
    for record in records {
        let mut frames = Vec::new();
        for path in &record.frame_paths {
            match CropImage::load(path) {
                Ok(img) => frames.push(img),
                Err(_) => tally.skipped_frames += 1,
            }
        }
        if frames.is_empty() {
            tally.excluded_videos += 1;
            continue;
        }
        let ix = kept.len();
        kept.push(record);
        for f in frames {
            owners.push(ix);
            images.push(f);
        }
    }

    let refs: Vec<&CropImage> = images.iter().collect();
    let features = encode_features_chunked(model, config.precision, &refs)?;
    let probs = probs_from_features(model, &features, config.l2_normalize)?;

    let mut scores = Vec::with_capacity(kept.len());
    for (ix, record) in kept.iter().enumerate() {
        let frame_probs: Vec<f64> = owners
            .iter()
            .zip(&probs)
            .filter(|(o, _)| **o == ix)
            .map(|(_, p)| *p)
            .collect();
        let video_prob = aggregate_video(&frame_probs)?;
        scores.push(VideoScore {
            video_id: record.video_id.clone(),
            label: record.label.class(),
            frame_probs,
            video_prob,
        });
    }
    Ok((scores, tally))
}

/// Video-level AUROC over a scored set.
pub fn auroc_of_scores(scores: &[VideoScore]) -> Result<f64> {
    let pairs: Vec<(f64, u8)> = scores.iter().map(|s| (s.video_prob, s.label)).collect();
    auroc(&pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub auroc: f64,
    pub per_video: Vec<VideoScore>,
    pub model_fingerprint: String,
    pub config_fingerprint: String,
    pub exclusions: ExclusionTally,
    pub fingerprint_warning: Option<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// How benchmark runs treat preprocessing fingerprint mismatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FingerprintPolicy {
    Warn,
    HardFail,
}

pub struct BenchmarkOutcome {
    pub reports: Vec<EvalReport>,
    pub mean_auroc: f64,
}

/// Evaluates a model on each manifest (test split when present, otherwise all
/// records) and appends a mean-over-datasets summary.
pub fn run_benchmark(
    model: &Model,
    config: &TrainConfig,
    manifests: &[DatasetManifest],
    split: Option<Split>,
    expected_fingerprint: Option<&str>,
    policy: FingerprintPolicy,
    model_fingerprint: &str,
) -> Result<BenchmarkOutcome> {
    let mut reports = Vec::new();
    for manifest in manifests {
        let warning = match expected_fingerprint {
            Some(expected) if expected != manifest.preprocessing_fingerprint => {
                let message = format!(
                    "manifest '{}' preprocessing fingerprint {} differs from the model's training fingerprint {}",
                    manifest.name, manifest.preprocessing_fingerprint, expected
                );
                if policy == FingerprintPolicy::HardFail {
                    return Err(Error::FingerprintMismatch {
                        expected: expected.into(),
                        got: manifest.preprocessing_fingerprint.clone(),
                        manifest: manifest.name.clone(),
                    });
                }
                Some(message)
            }
            _ => None,
        };
        let (scores, tally) = score_manifest(model, config, manifest, split)?;
        let value = auroc_of_scores(&scores)?;
        reports.push(EvalReport {
            dataset: manifest.name.clone(),
            n_real: scores.iter().filter(|s| s.label == 0).count(),
            n_fake: scores.iter().filter(|s| s.label == 1).count(),
            auroc: value,
            per_video: scores,
            model_fingerprint: model_fingerprint.into(),
            config_fingerprint: config.fingerprint(),
            exclusions: tally,
            fingerprint_warning: warning,
        });
    }
    let mean_auroc = reports.iter().map(|r| r.auroc).sum::<f64>() / reports.len().max(1) as f64;
    Ok(BenchmarkOutcome { reports, mean_auroc })
}

/// Loads a checkpoint and evaluates it, yielding reports that embed the
/// checkpoint hash as model fingerprint.
pub fn evaluate_checkpoint(
    ckpt_path: &Path,
    manifests: &[DatasetManifest],
    split: Option<Split>,
    policy: FingerprintPolicy,
) -> Result<BenchmarkOutcome> {
    let loaded = checkpoint::load(ckpt_path)?;
    let fingerprint = checkpoint::file_fingerprint(ckpt_path)?;
    run_benchmark(
        &loaded.model,
        &loaded.config,
        manifests,
        split,
        loaded.train_fingerprint.as_deref(),
        policy,
        &fingerprint,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::RngExt;

    #[test]
    fn aggregate_examples() {
        assert_abs_diff_eq!(aggregate_video(&[0.2, 0.4, 0.6]).unwrap(), 0.4, epsilon = 1e-12);
        assert_eq!(aggregate_video(&[0.7]).unwrap(), 0.7);
        assert!(matches!(aggregate_video(&[]), Err(Error::EmptyVideo)));
        let mut rng = crate::rng::stream(1, "eval_test", &[]);
        let probs: Vec<f64> = (0..32).map(|_| rng.random()).collect();
        let mean = probs.iter().sum::<f64>() / 32.0;
        assert_abs_diff_eq!(aggregate_video(&probs).unwrap(), mean, epsilon = 1e-12);
    }

    #[test]
    fn auroc_perfect_separation() {
        let scores = [(0.9, 1), (0.8, 1), (0.3, 0), (0.1, 0)];
        assert_eq!(auroc(&scores).unwrap(), 1.0);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        let scores = [(0.5, 1), (0.5, 0), (0.5, 1), (0.5, 0)];
        assert_eq!(auroc(&scores).unwrap(), 0.5);
    }

    #[test]
    fn auroc_single_class_errors() {
        assert!(matches!(auroc(&[(0.5, 1), (0.2, 1)]), Err(Error::SingleClass)));
    }

    /// O(n^2) pair-counting oracle.
    fn auroc_brute(scores: &[(f64, u8)]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for &(sp, lp) in scores.iter().filter(|(_, l)| *l == 1) {
            let _ = lp;
            for &(sn, _) in scores.iter().filter(|(_, l)| *l == 0) {
                pairs += 1.0;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auroc_matches_pair_counting_with_heavy_ties() {
        let mut rng = crate::rng::stream(2, "eval_test", &[]);
        for trial in 0..50 {
            let n = 5 + (trial % 40);
            let scores: Vec<(f64, u8)> = (0..n)
                .map(|_| {
                    // quantized scores force ties
                    let s = (rng.random::<f64>() * 8.0).round() / 8.0;
                    (s, u8::from(rng.random::<bool>()))
                })
                .collect();
            let has_both = scores.iter().any(|(_, l)| *l == 1) && scores.iter().any(|(_, l)| *l == 0);
            if !has_both {
                continue;
            }
            assert_abs_diff_eq!(
                auroc(&scores).unwrap(),
                auroc_brute(&scores),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn auroc_invariant_to_monotone_transform() {
        let mut rng = crate::rng::stream(3, "eval_test", &[]);
        let scores: Vec<(f64, u8)> = (0..60)
            .map(|i| (rng.random::<f64>(), (i % 2) as u8))
            .collect();
        let base = auroc(&scores).unwrap();
        let exp: Vec<(f64, u8)> = scores.iter().map(|(s, l)| (s.exp(), *l)).collect();
        let logit: Vec<(f64, u8)> = scores
            .iter()
            .map(|(s, l)| ((s / (1.0 - s)).ln(), *l))
            .collect();
        assert_eq!(auroc(&exp).unwrap(), base);
        assert_eq!(auroc(&logit).unwrap(), base);
    }

    #[test]
    fn auroc_permutation_invariant() {
        let mut rng = crate::rng::stream(4, "eval_test", &[]);
        let mut scores: Vec<(f64, u8)> = (0..31)
            .map(|i| (rng.random::<f64>(), u8::from(i % 3 == 0)))
            .collect();
        let base = auroc(&scores).unwrap();
        scores.reverse();
        assert_eq!(auroc(&scores).unwrap(), base);
    }
}
