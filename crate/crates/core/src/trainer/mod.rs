//! The optimization loop: batch composition, slerp batch extension, loss and
//! backprop with parameter masking, the cyclic cosine schedule, and
//! validation-AUROC model selection.
//!
//! The encoder forward/backward runs in the configured precision; feature
//! geometry, losses, and optimizer state stay in f64. Batches are chunked for
//! parallel encoding and gradients merge in chunk order, so results do not
//! depend on thread count. With a fully frozen encoder (head-only policy, no
//! augmentation) encoder features are computed once and reused every epoch,
//! which changes nothing observable.

pub mod extension;
pub mod graph;
pub mod log;

use crate::autodiff::Tape;
use crate::checkpoint::OptimizerState;
use crate::config::{Precision, TrainConfig};
use crate::data::augment::{augment, AugmentConfig};
use crate::data::imageops::CropImage;
use crate::data::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{encode_images, CastParams, EncoderGraph, Model};
use crate::optim::Adam;
use crate::rng;
use crate::scalar::Real;
use crate::schedule::{lr_at, ScheduleState};
use extension::{plan_extension, SlerpPlan};
use log::{EpochRecord, LogRecord, LogWriter, MetaRecord, StepRecord, LOG_SCHEMA_VERSION};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;

/// Images per encoder chunk during training.
pub const TRAIN_CHUNK: usize = 16;

struct Sample {
    video_ix: usize,
    label: u8,
    image: CropImage,
}

pub struct TrainOutcome {
    pub best_model: Model,
    pub final_model: Model,
    pub best_val_auroc: f64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub optimizer: OptimizerState,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub augment_config: AugmentConfig,
    samples: Vec<Sample>,
    videos: Vec<(String, u8)>,
    val_frames: Vec<CropImage>,
    val_owners: Vec<usize>,
    val_videos: Vec<(String, u8)>,
    adam: Adam,
    steps_per_epoch: u64,
    start_epoch: usize,
    train_cache: Option<Array2<f64>>,
    val_cache: Option<Array2<f64>>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    best: Option<(f64, usize, Model)>,
    train_name: String,
    val_name: String,
}

fn load_grouped(manifest: &DatasetManifest) -> Result<(Vec<CropImage>, Vec<usize>, Vec<(String, u8)>)> {
    let mut frames = Vec::new();
    let mut owners = Vec::new();
    let mut videos = Vec::new();
    for record in &manifest.records {
        let ix = videos.len();
        videos.push((record.video_id.clone(), record.label.class()));
        for path in &record.frame_paths {
            frames.push(CropImage::load(path)?);
            owners.push(ix);
        }
    }
    Ok((frames, owners, videos))
}

impl Trainer {
    pub fn new(
        model: Model,
        train_manifest: &DatasetManifest,
        val_manifest: &DatasetManifest,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        validate_loss_geometry(&config)?;
        train_manifest.validate(true)?;
        val_manifest.validate(true)?;

        let (train_frames, train_owners, videos) = load_grouped(train_manifest)?;
        let samples = train_frames
            .into_iter()
            .zip(&train_owners)
            .map(|(image, &video_ix)| Sample {
                video_ix,
                label: videos[video_ix].1,
                image,
            })
            .collect::<Vec<_>>();
        if samples.is_empty() {
            return Err(Error::InvalidManifest("training manifest has no frames".into()));
        }
        let (val_frames, val_owners, val_videos) = load_grouped(val_manifest)?;

        let steps_per_epoch = samples.len().div_ceil(config.batch_size) as u64;
        let adam = Adam::new(&model, &config);
        let start_epoch = (model.step / steps_per_epoch) as usize;

        let mut trainer = Self {
            model,
            augment_config: AugmentConfig::default(),
            samples,
            videos,
            val_frames,
            val_owners,
            val_videos,
            adam,
            steps_per_epoch,
            start_epoch,
            train_cache: None,
            val_cache: None,
            steps: Vec::new(),
            epochs: Vec::new(),
            best: None,
            train_name: train_manifest.name.clone(),
            val_name: val_manifest.name.clone(),
            config,
        };
        trainer.maybe_build_caches()?;
        Ok(trainer)
    }

    /// Restores optimizer moments (for resuming from a checkpoint).
    pub fn restore_optimizer(&mut self, state: &OptimizerState) {
        let mut adam = Adam::new(&self.model, &self.config);
        adam.import_state(&self.model, state);
        self.adam = adam;
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    /// With a fully frozen encoder and no augmentation, features never change;
    /// compute them once.
    fn maybe_build_caches(&mut self) -> Result<()> {
        let frozen_encoder = self
            .model
            .params
            .iter()
            .all(|p| p.name.starts_with("head.") || !p.trainable);
        if !frozen_encoder || self.config.augment {
            return Ok(());
        }
        let refs: Vec<&CropImage> = self.samples.iter().map(|s| &s.image).collect();
        self.train_cache = Some(eval::encode_features_chunked(
            &self.model,
            self.config.precision,
            &refs,
        )?);
        let val_refs: Vec<&CropImage> = self.val_frames.iter().collect();
        self.val_cache = Some(eval::encode_features_chunked(
            &self.model,
            self.config.precision,
            &val_refs,
        )?);
        Ok(())
    }

    fn batch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = rng::stream(self.config.seed, "batch_order", &[epoch as u64]);
        if self.config.class_balance {
            let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
            for (i, s) in self.samples.iter().enumerate() {
                by_class[usize::from(s.label)].push(i);
            }
            by_class[0].shuffle(&mut rng);
            by_class[1].shuffle(&mut rng);
            // weave classes as evenly as their counts allow
            let (n0, n1) = (by_class[0].len(), by_class[1].len());
            let mut taken = [0usize, 0usize];
            let mut order = Vec::with_capacity(n0 + n1);
            for _ in 0..(n0 + n1) {
                let deficit0 = taken[0] as f64 * n1 as f64;
                let deficit1 = taken[1] as f64 * n0 as f64;
                let pick = if taken[0] < n0 && (deficit0 <= deficit1 || taken[1] >= n1) { 0 } else { 1 };
                order.push(by_class[pick][taken[pick]]);
                taken[pick] += 1;
            }
            order
        } else {
            let mut order: Vec<usize> = (0..self.samples.len()).collect();
            order.shuffle(&mut rng);
            order
        }
    }

    /// Validation video-level AUROC under the current parameters.
    pub fn validation_auroc(&self) -> Result<f64> {
        let features = if let Some(cache) = &self.val_cache {
            cache.clone()
        } else {
            let refs: Vec<&CropImage> = self.val_frames.iter().collect();
            eval::encode_features_chunked(&self.model, self.config.precision, &refs)?
        };
        let probs = eval::probs_from_features(&self.model, &features, self.config.l2_normalize)?;
        video_auroc(&probs, &self.val_owners, &self.val_videos)
    }

    pub fn run_epoch(&mut self, epoch: usize, writer: Option<&mut LogWriter>) -> Result<EpochRecord> {
        let start = std::time::Instant::now();
        let order = self.batch_order(epoch);
        let mut frame_probs: Vec<(usize, f64)> = Vec::with_capacity(order.len());
        let mut loss_sum = 0.0;
        let mut writer = writer;

        let batches: Vec<Vec<usize>> = order
            .chunks(self.config.batch_size)
            .map(|c| c.to_vec())
            .collect();
        for (batch_ix, batch) in batches.iter().enumerate() {
            let (record, probs) = match self.config.precision {
                Precision::Full => self.train_batch::<f64>(epoch, batch_ix, batch)?,
                Precision::Reduced => self.train_batch::<f32>(epoch, batch_ix, batch)?,
            };
            loss_sum += record.total;
            if let Some(w) = writer.as_deref_mut() {
                w.write(&LogRecord::Step(record.clone()))?;
            }
            self.steps.push(record);
            frame_probs.extend(probs);
        }

        let train_auroc = video_auroc_from_pairs(&frame_probs, &self.videos)?;
        let val_auroc = self.validation_auroc()?;
        let record = EpochRecord {
            epoch,
            train_auroc,
            val_auroc,
            mean_total_loss: loss_sum / batches.len() as f64,
            wall_ms: log::wall_ms_since(start),
        };
        if let Some(w) = writer.as_deref_mut() {
            w.write(&LogRecord::Epoch(record.clone()))?;
        }
        self.epochs.push(record.clone());
        let better = self.best.as_ref().map_or(true, |(b, _, _)| val_auroc > *b);
        if better {
            self.best = Some((val_auroc, epoch, self.model.clone()));
        }
        Ok(record)
    }

    fn train_batch<F: Real>(
        &mut self,
        epoch: usize,
        batch_ix: usize,
        indices: &[usize],
    ) -> Result<(StepRecord, Vec<(usize, f64)>)> {
        let b = indices.len();
        let labels: Vec<u8> = indices.iter().map(|&i| self.samples[i].label).collect();

        // encoder features (cached or computed, keeping graphs for backward)
        let mut graphs: Vec<(EncoderGraph<F>, usize)> = Vec::new();
        let features: Array2<f64> = if let Some(cache) = &self.train_cache {
            let mut f = Array2::zeros((b, self.model.spec.width));
            for (r, &i) in indices.iter().enumerate() {
                f.row_mut(r).assign(&cache.row(i));
            }
            f
        } else {
            let augmented_storage: Option<Vec<CropImage>> = if self.config.augment {
                let images = indices
                    .iter()
                    .map(|&i| {
                        let mut rng =
                            rng::stream(self.config.seed, "augment", &[epoch as u64, i as u64]);
                        augment(&self.samples[i].image, &mut rng, &self.augment_config)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(images)
            } else {
                None
            };
            let refs: Vec<&CropImage> = match &augmented_storage {
                Some(images) => images.iter().collect(),
                None => indices.iter().map(|&i| &self.samples[i].image).collect(),
            };
            let cast = CastParams::<F>::from_model(&self.model);
            let chunk_results: Vec<Result<EncoderGraph<F>>> = refs
                .par_chunks(TRAIN_CHUNK)
                .map(|chunk| encode_images(&self.model, &cast, chunk))
                .collect();
            let mut f = Array2::zeros((b, self.model.spec.width));
            let mut row = 0usize;
            for result in chunk_results {
                let graph = result?;
                let block = graph.tape.value(graph.features).mapv(|v| v.to_f64_c());
                f.slice_mut(ndarray::s![row..row + block.nrows(), ..]).assign(&block);
                graphs.push((graph, row));
                row += block.nrows();
            }
            f
        };

        // loss graph in full precision
        let ratio = self.config.extended_batch_size / self.config.batch_size;
        let target = b * ratio;
        let mut tape = Tape::<f64>::new();
        let feats_leaf = tape.leaf(features);
        let z = if self.config.l2_normalize {
            tape.l2_normalize_rows(feats_leaf, crate::sphere::EPS_NORM)
        } else {
            feats_leaf
        };
        let (z_ext, ext_labels, _plan) = if self.config.slerp_extension && target > b {
            let mut rng = rng::stream(self.config.seed, "slerp", &[epoch as u64, batch_ix as u64]);
            let plan: SlerpPlan = plan_extension(&labels, target, &mut rng)?;
            let mut ext_labels = labels.clone();
            ext_labels.extend_from_slice(&plan.labels);
            let z_ext = extension::apply_plan_on_tape(&mut tape, z, &plan);
            (z_ext, ext_labels, Some(plan))
        } else {
            (z, labels.clone(), None)
        };

        let head_w_ix = self.model.param_index("head.weight").expect("head.weight");
        let head_b_ix = self.model.param_index("head.bias").expect("head.bias");
        let head_w = tape.leaf(self.model.params[head_w_ix].value.clone());
        let head_b = tape.leaf(self.model.params[head_b_ix].value.clone());
        let logits_raw = tape.matmul(z_ext, head_w);
        let logits = tape.add_row(logits_raw, head_b);
        let combined = graph::combined_graph(
            &mut tape,
            logits,
            z_ext,
            &ext_labels,
            &self.config.loss_weights,
        );

        let total = tape.scalar(combined.total);
        let ce = tape.scalar(combined.cross_entropy);
        let align = combined.align.map_or(0.0, |v| tape.scalar(v));
        let uniform = combined.uniform.map_or(0.0, |v| tape.scalar(v));
        let global_step = self.model.step;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: global_step,
                total,
                detail: format!(
                    "epoch {epoch} batch {batch_ix}: ce={ce} align={align} uniform={uniform}"
                ),
            });
        }

        // training probabilities of the original rows (synthetic rows never
        // feed metrics)
        let logit_values = tape.value(logits);
        let probs: Vec<(usize, f64)> = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                (
                    self.samples[i].video_ix,
                    Model::fake_prob([logit_values[(r, 0)], logit_values[(r, 1)]]),
                )
            })
            .collect();

        // backward: loss tape, then encoder chunks seeded with feature grads
        let mut loss_grads = tape.backward(combined.total);
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.model.params.len()).map(|_| None).collect();
        grads[head_w_ix] = loss_grads.take(head_w);
        grads[head_b_ix] = loss_grads.take(head_b);

        if !graphs.is_empty() {
            let dfeats = loss_grads
                .take(feats_leaf)
                .expect("features receive gradient");
            let chunk_grads: Vec<Vec<(usize, Array2<F>)>> = graphs
                .par_iter()
                .map(|(graph, row0)| {
                    let rows = graph.tape.value(graph.features).nrows();
                    let seed = dfeats
                        .slice(ndarray::s![*row0..*row0 + rows, ..])
                        .mapv(|v| F::from_f64_c(v));
                    let mut g = graph.tape.backward_seeded(graph.features, seed);
                    graph
                        .param_vars
                        .iter()
                        .filter(|(p_ix, _)| self.model.params[*p_ix].trainable)
                        .filter_map(|(p_ix, var)| g.take(*var).map(|arr| (*p_ix, arr)))
                        .collect()
                })
                .collect();
            for chunk in chunk_grads {
                for (p_ix, grad) in chunk {
                    let grad64 = grad.mapv(|v| v.to_f64_c());
                    match &mut grads[p_ix] {
                        Some(existing) => *existing += &grad64,
                        slot @ None => *slot = Some(grad64),
                    }
                }
            }
        }

        let grad_norm = grads
            .iter()
            .enumerate()
            .filter(|(i, _)| self.model.params[*i].trainable)
            .filter_map(|(_, g)| g.as_ref())
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();

        let state = ScheduleState::new(global_step, self.steps_per_epoch, &self.config);
        let lr = lr_at(&state, &self.config);
        self.adam.step(&mut self.model, &grads, lr);

        Ok((
            StepRecord {
                step: global_step,
                epoch,
                lr,
                total,
                cross_entropy: ce,
                align,
                uniform,
                grad_norm,
            },
            probs,
        ))
    }

    /// Runs the remaining epochs of the configured schedule.
    pub fn run(mut self, mut writer: Option<&mut LogWriter>) -> Result<TrainOutcome> {
        if let Some(w) = writer.as_deref_mut() {
            w.write(&LogRecord::Meta(MetaRecord {
                schema_version: LOG_SCHEMA_VERSION,
                config_fingerprint: self.config.fingerprint(),
                train_manifest: self.train_name.clone(),
                val_manifest: self.val_name.clone(),
            }))?;
        }
        for epoch in self.start_epoch..self.config.total_epochs() {
            self.run_epoch(epoch, writer.as_deref_mut())?;
        }
        self.into_outcome()
    }

    pub fn into_outcome(self) -> Result<TrainOutcome> {
        let optimizer = self.adam.export_state(&self.model);
        let (best_val_auroc, best_epoch, best_model) = self
            .best
            .unwrap_or((f64::NAN, 0, self.model.clone()));
        Ok(TrainOutcome {
            best_model,
            final_model: self.model,
            best_val_auroc,
            best_epoch,
            epochs: self.epochs,
            steps: self.steps,
            optimizer,
        })
    }
}

fn validate_loss_geometry(config: &TrainConfig) -> Result<()> {
    let geometric = config.loss_weights.alpha > 0.0 || config.loss_weights.beta > 0.0;
    if geometric && !config.l2_normalize {
        return Err(Error::InvalidConfig(
            "alignment/uniformity losses need l2_normalize = true".into(),
        ));
    }
    if config.slerp_extension && !config.l2_normalize {
        return Err(Error::InvalidConfig(
            "slerp extension operates on unit features; enable l2_normalize".into(),
        ));
    }
    Ok(())
}

fn video_auroc(probs: &[f64], owners: &[usize], videos: &[(String, u8)]) -> Result<f64> {
    let pairs: Vec<(usize, f64)> = owners.iter().copied().zip(probs.iter().copied()).collect();
    video_auroc_from_pairs(&pairs, videos)
}

fn video_auroc_from_pairs(frame_probs: &[(usize, f64)], videos: &[(String, u8)]) -> Result<f64> {
    let mut sums = vec![0.0; videos.len()];
    let mut counts = vec![0usize; videos.len()];
    for &(v, p) in frame_probs {
        sums[v] += p;
        counts[v] += 1;
    }
    let scores: Vec<(f64, u8)> = videos
        .iter()
        .enumerate()
        .filter(|(i, _)| counts[*i] > 0)
        .map(|(i, (_, label))| (sums[i] / counts[i] as f64, *label))
        .collect();
    eval::auroc(&scores)
}

/// Convenience wrapper: build a trainer and run the full schedule.
pub fn train(
    model: Model,
    train_manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
    config: TrainConfig,
    writer: Option<&mut LogWriter>,
) -> Result<TrainOutcome> {
    Trainer::new(model, train_manifest, val_manifest, config)?.run(writer)
}
