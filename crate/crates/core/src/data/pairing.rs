//! Paired / unpaired training-set construction.
//!
//! A trial splits the training reals into two halves. The paired dataset
//! keeps the first half's reals together with the fakes generated from them;
//! the unpaired dataset keeps the same reals but takes its fakes from the
//! second half's sources, so no fake has its real counterpart present.

use crate::data::manifest::{DatasetManifest, Label, Split};
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use std::collections::BTreeSet;

fn split_real_halves(manifest: &DatasetManifest, trial_seed: u64) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let mut reals: Vec<String> = manifest
        .split_records(Split::Train)
        .filter(|r| r.label == Label::Real)
        .map(|r| r.video_id.clone())
        .collect();
    reals.sort();
    let unresolved = manifest
        .split_records(Split::Train)
        .filter(|r| {
            r.label == Label::Fake
                && (r.source_id == "unknown" || !reals.iter().any(|id| *id == r.source_id))
        })
        .count();
    if unresolved > 0 {
        return Err(Error::MissingSourceLinks { count: unresolved });
    }
    let mut rng = rng::stream(trial_seed, "pairing_split", &[]);
    reals.shuffle(&mut rng);
    let half = reals.len() / 2;
    let first: BTreeSet<String> = reals[..half].iter().cloned().collect();
    let second: BTreeSet<String> = reals[half..].iter().cloned().collect();
    Ok((first, second))
}

/// Reals from the first half plus the deepfakes generated from those videos.
pub fn build_paired_split(manifest: &DatasetManifest, trial_seed: u64) -> Result<DatasetManifest> {
    let (first, _) = split_real_halves(manifest, trial_seed)?;
    let out = manifest.filtered(format!("{}_paired_t{trial_seed}", manifest.name), |r| {
        r.split == Split::Train
            && match r.label {
                Label::Real => first.contains(&r.video_id),
                Label::Fake => first.contains(&r.source_id),
            }
    });
    Ok(out)
}

/// The same reals as the paired split, with fakes drawn from the second
/// half's sources only.
pub fn build_unpaired_split(manifest: &DatasetManifest, trial_seed: u64) -> Result<DatasetManifest> {
    let (first, second) = split_real_halves(manifest, trial_seed)?;
    let out = manifest.filtered(format!("{}_unpaired_t{trial_seed}", manifest.name), |r| {
        r.split == Split::Train
            && match r.label {
                Label::Real => first.contains(&r.video_id),
                Label::Fake => second.contains(&r.source_id),
            }
    });
    Ok(out)
}
