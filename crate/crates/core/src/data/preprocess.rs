//! Face-crop preprocessing: sample frames evenly, detect the largest face,
//! align it via landmarks, enlarge the box, crop, resize, save lossless.
//!
//! The detector is a plug-in; the built-in `stub` finds the bright region of
//! a frame and is deterministic, which is enough for fixtures and synthetic
//! data. Real detectors register through [`make_detector`].

use crate::data::imageops::{estimate_similarity, resample, CropImage, Similarity};
use crate::data::manifest::{DatasetManifest, Label, Split, VideoRecord};
use crate::data::sampling::sample_frame_indices;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Canonical five-point landmark template (eyes, nose, mouth corners) in a
/// 112-unit aligned face frame.
pub const LANDMARK_TEMPLATE: [[f64; 2]; 5] = [
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub frames_per_video: usize,
    pub bbox_margin: f64,
    pub crop_size: usize,
    pub detector: String,
    pub alignment: bool,
    /// Only "png" (lossless) is supported.
    pub output_format: String,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            frames_per_video: 32,
            bbox_margin: 1.3,
            crop_size: 256,
            detector: "stub".into(),
            alignment: true,
            output_format: "png".into(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_video < 1 {
            return Err(Error::InvalidConfig("frames_per_video must be >= 1".into()));
        }
        if self.bbox_margin < 1.0 {
            return Err(Error::InvalidConfig("bbox_margin must be >= 1".into()));
        }
        if self.crop_size < 8 {
            return Err(Error::InvalidConfig("crop_size too small".into()));
        }
        if self.output_format != "png" {
            return Err(Error::InvalidConfig(
                "only the lossless 'png' output format is supported".into(),
            ));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        crate::fingerprint::of_json(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl FaceBox {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        [
            [self.x1, self.y1],
            [self.x2, self.y1],
            [self.x2, self.y2],
            [self.x1, self.y2],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub face_box: FaceBox,
    pub landmarks: [[f64; 2]; 5],
}

/// Face detector plug-in: boxes plus five-point landmarks per face.
pub trait FaceDetector: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, frame: &CropImage) -> Vec<Detection>;
}

/// Deterministic detector for fixtures: bounding box of pixels brighter than
/// a luminance threshold, landmarks at fixed fractions of that box.
pub struct StubDetector {
    pub threshold: u8,
}

impl Default for StubDetector {
    fn default() -> Self {
        Self { threshold: 160 }
    }
}

/// Landmarks placed at canonical fractions of a face box.
pub fn landmarks_for_box(b: &FaceBox) -> [[f64; 2]; 5] {
    let w = b.x2 - b.x1;
    let h = b.y2 - b.y1;
    let at = |fx: f64, fy: f64| [b.x1 + fx * w, b.y1 + fy * h];
    [
        at(0.34, 0.46),
        at(0.66, 0.46),
        at(0.50, 0.64),
        at(0.37, 0.82),
        at(0.63, 0.82),
    ]
}

impl FaceDetector for StubDetector {
    fn name(&self) -> &str {
        "stub"
    }

    fn detect(&self, frame: &CropImage) -> Vec<Detection> {
        let mut min_x = usize::MAX;
        let mut min_y = usize::MAX;
        let mut max_x = 0usize;
        let mut max_y = 0usize;
        let mut found = false;
        for y in 0..frame.height {
            for x in 0..frame.width {
                let p = frame.pixel(x, y);
                let luma = 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
                if luma >= f64::from(self.threshold) {
                    found = true;
                    min_x = min_x.min(x);
                    min_y = min_y.min(y);
                    max_x = max_x.max(x);
                    max_y = max_y.max(y);
                }
            }
        }
        if !found || max_x <= min_x || max_y <= min_y {
            return Vec::new();
        }
        let face_box = FaceBox {
            x1: min_x as f64,
            y1: min_y as f64,
            x2: max_x as f64,
            y2: max_y as f64,
        };
        vec![Detection {
            landmarks: landmarks_for_box(&face_box),
            face_box,
        }]
    }
}

/// Test/fixture detector that replays predefined detections for every frame.
pub struct FixedDetector {
    pub detections: Vec<Detection>,
}

impl FaceDetector for FixedDetector {
    fn name(&self) -> &str {
        "fixed"
    }

    fn detect(&self, _frame: &CropImage) -> Vec<Detection> {
        self.detections.clone()
    }
}

/// Detector registry: resolves a config name to an implementation.
pub fn make_detector(name: &str) -> Result<Box<dyn FaceDetector>> {
    match name {
        "stub" => Ok(Box::new(StubDetector::default())),
        other => Err(Error::UnknownDetector(other.into())),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub frames_sampled: usize,
    pub frames_without_face: usize,
    pub videos_excluded: usize,
}

/// Crops one video (an ordered list of frame images).
///
/// Frames where detection fails are skipped and counted; a video where every
/// frame fails yields [`Error::NoFaceFound`].
pub fn preprocess_video(
    video_id: &str,
    frames: &[CropImage],
    config: &PreprocessConfig,
    detector: &dyn FaceDetector,
) -> Result<(Vec<CropImage>, PreprocessStats)> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::NoFaceFound { video_id: video_id.into() });
    }
    let indices = sample_frame_indices(frames.len(), config.frames_per_video);
    let mut stats = PreprocessStats {
        frames_sampled: indices.len(),
        ..Default::default()
    };
    let mut crops = Vec::new();
    for &ix in &indices {
        let frame = &frames[ix];
        let detections = detector.detect(frame);
        let Some(best) = detections
            .into_iter()
            .max_by(|a, b| a.face_box.area().total_cmp(&b.face_box.area()))
        else {
            stats.frames_without_face += 1;
            continue;
        };
        crops.push(crop_face(frame, &best, config));
    }
    if crops.is_empty() {
        return Err(Error::NoFaceFound { video_id: video_id.into() });
    }
    Ok((crops, stats))
}

/// Aligns (optionally), applies the margin, crops square, and resizes.
pub fn crop_face(frame: &CropImage, detection: &Detection, config: &PreprocessConfig) -> CropImage {
    let (to_aligned, aligned_box) = if config.alignment {
        let t = estimate_similarity(&detection.landmarks, &LANDMARK_TEMPLATE);
        // bounding box of the detector box mapped into aligned space
        let mut min_x = f64::INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for c in detection.face_box.corners() {
            let (x, y) = t.apply(c[0], c[1]);
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        (t, FaceBox { x1: min_x, y1: min_y, x2: max_x, y2: max_y })
    } else {
        (Similarity::identity(), detection.face_box)
    };

    let cx = (aligned_box.x1 + aligned_box.x2) / 2.0;
    let cy = (aligned_box.y1 + aligned_box.y2) / 2.0;
    let side = (aligned_box.x2 - aligned_box.x1)
        .max(aligned_box.y2 - aligned_box.y1)
        * config.bbox_margin;
    let origin_x = cx - side / 2.0;
    let origin_y = cy - side / 2.0;

    let inv = to_aligned.inverse();
    let scale = side / config.crop_size as f64;
    resample(
        frame,
        |u, v| inv.apply(origin_x + (u + 0.5) * scale - 0.5, origin_y + (v + 0.5) * scale - 0.5),
        config.crop_size,
    )
}

/// Frame image files of one raw "video" directory, in name order.
pub fn list_video_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    frames.sort();
    Ok(frames)
}

/// Preprocesses a directory tree `in_dir/{real,fake}/<video_id>/frame*.png`
/// into crops + a manifest under `out_dir`. Videos without any detectable
/// face are excluded and tallied.
pub fn preprocess_directory(
    in_dir: &Path,
    out_dir: &Path,
    dataset_name: &str,
    year: i32,
    config: &PreprocessConfig,
    detector: &dyn FaceDetector,
) -> Result<(DatasetManifest, PreprocessStats)> {
    config.validate()?;
    let mut manifest = DatasetManifest::new(dataset_name, config.fingerprint());
    let mut stats = PreprocessStats::default();
    for (label_dir, label) in [("real", Label::Real), ("fake", Label::Fake)] {
        let dir = in_dir.join(label_dir);
        if !dir.exists() {
            continue;
        }
        let mut videos: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        videos.sort();
        for video_dir in videos {
            let video_id = video_dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("video")
                .to_string();
            let frame_files = list_video_frames(&video_dir)?;
            let frames: Vec<CropImage> = frame_files
                .iter()
                .map(|p| CropImage::load(p))
                .collect::<Result<_>>()?;
            match preprocess_video(&video_id, &frames, config, detector) {
                Ok((crops, s)) => {
                    stats.frames_sampled += s.frames_sampled;
                    stats.frames_without_face += s.frames_without_face;
                    let mut paths = Vec::new();
                    for (i, crop) in crops.iter().enumerate() {
                        let path = out_dir.join("crops").join(&video_id).join(format!("f{i:03}.png"));
                        crop.save_png(&path)?;
                        paths.push(path);
                    }
                    manifest.records.push(VideoRecord {
                        video_id: video_id.clone(),
                        label,
                        source_id: if label == Label::Real { video_id.clone() } else { "unknown".into() },
                        generator: if label == Label::Real { "real".into() } else { "unknown".into() },
                        frame_paths: paths,
                        split: Split::Train,
                        dataset: dataset_name.into(),
                        year,
                    });
                }
                Err(Error::NoFaceFound { .. }) => {
                    stats.videos_excluded += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    manifest.validate(true)?;
    Ok((manifest, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Frame with a bright square "face" at a known location.
    fn square_face_frame(size: usize, x1: usize, y1: usize, side: usize) -> CropImage {
        let mut img = CropImage::filled(size, size, 30);
        for y in y1..(y1 + side) {
            for x in x1..(x1 + side) {
                img.set_pixel(x, y, [220, 220, 220]);
            }
        }
        img
    }

    #[test]
    fn stub_detector_finds_the_square() {
        let frame = square_face_frame(128, 40, 50, 30);
        let det = StubDetector::default().detect(&frame);
        assert_eq!(det.len(), 1);
        let b = det[0].face_box;
        assert_eq!((b.x1, b.y1), (40.0, 50.0));
        assert_eq!((b.x2, b.y2), (69.0, 79.0));
    }

    #[test]
    fn crop_respects_margin_without_alignment() {
        // 30px face with margin 1.3 -> 39px square window centered on the face,
        // resized to 64. The face occupies the central 30/39 of the crop.
        let frame = square_face_frame(128, 40, 50, 30);
        let config = PreprocessConfig {
            frames_per_video: 1,
            crop_size: 64,
            alignment: false,
            ..PreprocessConfig::default()
        };
        let (crops, stats) = preprocess_video(
            "fixture",
            std::slice::from_ref(&frame),
            &config,
            &StubDetector::default(),
        )
        .unwrap();
        assert_eq!(stats.frames_without_face, 0);
        let crop = &crops[0];
        assert_eq!(crop.width, 64);
        let center = crop.pixel(32, 32);
        assert!(center[0] > 200, "face fills the center");
        let frac: f64 = 30.0 / (30.0 * 1.3);
        let inside = ((0.5 - frac / 2.0) * 64.0).ceil() as usize + 2;
        let outside = inside.saturating_sub(5);
        assert!(crop.pixel(inside, 32)[0] > 180, "just inside the face");
        assert!(crop.pixel(outside, 32)[0] < 100, "margin band is background");
    }

    #[test]
    fn alignment_puts_landmarks_on_template() {
        // Landmarks rotated by 20 degrees; after alignment the crop content at
        // template positions should match the face.
        let frame = square_face_frame(160, 60, 60, 40);
        let det = Detection {
            face_box: FaceBox { x1: 60.0, y1: 60.0, x2: 100.0, y2: 100.0 },
            landmarks: landmarks_for_box(&FaceBox { x1: 60.0, y1: 60.0, x2: 100.0, y2: 100.0 }),
        };
        let config = PreprocessConfig {
            crop_size: 112,
            alignment: true,
            bbox_margin: 1.0,
            ..PreprocessConfig::default()
        };
        let crop = crop_face(&frame, &det, &config);
        // center of the aligned face is bright
        assert!(crop.pixel(56, 56)[0] > 150);
    }

    #[test]
    fn larger_face_wins() {
        let frame = CropImage::filled(64, 64, 0);
        let small = FaceBox { x1: 2.0, y1: 2.0, x2: 10.0, y2: 10.0 };
        let large = FaceBox { x1: 20.0, y1: 20.0, x2: 50.0, y2: 50.0 };
        let detector = FixedDetector {
            detections: vec![
                Detection { landmarks: landmarks_for_box(&small), face_box: small },
                Detection { landmarks: landmarks_for_box(&large), face_box: large },
            ],
        };
        let config = PreprocessConfig {
            frames_per_video: 1,
            crop_size: 32,
            alignment: false,
            ..PreprocessConfig::default()
        };
        let frame_with_faces = {
            let mut f = frame.clone();
            for y in 20..50 {
                for x in 20..50 {
                    f.set_pixel(x, y, [200, 0, 0]);
                }
            }
            f
        };
        let (crops, _) =
            preprocess_video("v", std::slice::from_ref(&frame_with_faces), &config, &detector).unwrap();
        // crop centered on the large box => red center
        assert!(crops[0].pixel(16, 16)[0] > 150);
    }

    #[test]
    fn all_frames_failing_is_no_face_found() {
        let frames = vec![CropImage::filled(32, 32, 10); 3];
        let config = PreprocessConfig {
            frames_per_video: 3,
            crop_size: 16,
            ..PreprocessConfig::default()
        };
        let err = preprocess_video("dark", &frames, &config, &StubDetector::default()).unwrap_err();
        assert!(matches!(err, Error::NoFaceFound { .. }));
    }

    #[test]
    fn fingerprint_changes_iff_config_changes() {
        let a = PreprocessConfig::default();
        let b = PreprocessConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        for mutated in [
            PreprocessConfig { frames_per_video: 16, ..a.clone() },
            PreprocessConfig { bbox_margin: 1.4, ..a.clone() },
            PreprocessConfig { crop_size: 128, ..a.clone() },
            PreprocessConfig { detector: "other".into(), ..a.clone() },
            PreprocessConfig { alignment: false, ..a.clone() },
        ] {
            assert_ne!(a.fingerprint(), mutated.fingerprint());
        }
    }

    #[test]
    fn unknown_detector_is_rejected() {
        assert!(matches!(make_detector("stub"), Ok(_)));
        assert!(matches!(make_detector("retina"), Err(Error::UnknownDetector(_))));
    }
}
