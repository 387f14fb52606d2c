//! Seeded synthetic trials in the on-disk formats read by [`crate::data`].
//!
//! Each trial has smooth latent valence and arousal curves. Every modality
//! carries them through a fixed random linear map scaled by
//! `signal_to_noise`, plus unit Gaussian noise.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{write_feature_file, write_manifest, DataError, ManifestRow, Matrix, Partition, FRAME_SIZE, SENTINEL};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub frames_per_trial: usize,
    pub signal_to_noise: f64,
    pub seed: u64,
    pub fps: f64,
    pub audio_dim: usize,
    pub text_dim: usize,
    /// Probability that an annotation row is written as the sentinel.
    pub sentinel_rate: f64,
    /// Probability that a frame image is absent.
    pub missing_frame_rate: f64,
    /// Subjects in the validation partition, taken from the end.
    /// Defaults to a sixth of the subjects, at least one.
    pub validation_subjects: Option<usize>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 12,
            trials_per_subject: 2,
            frames_per_trial: 900,
            signal_to_noise: 1.0,
            seed: 0,
            fps: 30.0,
            audio_dim: 32,
            text_dim: 64,
            sentinel_rate: 0.05,
            missing_frame_rate: 0.02,
            validation_subjects: None,
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| SynthError::Invalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let counts = [
            self.n_subjects,
            self.trials_per_subject,
            self.frames_per_trial,
            self.audio_dim,
            self.text_dim,
        ];
        if counts.contains(&0) {
            return Err(SynthError::Invalid("counts and dimensions must be positive".into()));
        }
        if !(self.signal_to_noise > 0.0 && self.fps > 0.0) {
            return Err(SynthError::Invalid("signal_to_noise and fps must be positive".into()));
        }
        for r in [self.sentinel_rate, self.missing_frame_rate] {
            if !(0.0..1.0).contains(&r) {
                return Err(SynthError::Invalid(format!("rate {r} outside [0, 1)")));
            }
        }
        if self.n_validation() >= self.n_subjects {
            return Err(SynthError::Invalid("no training subjects left".into()));
        }
        Ok(())
    }

    pub fn n_validation(&self) -> usize {
        self.validation_subjects.unwrap_or((self.n_subjects / 6).max(1))
    }
}

/// Fixed maps from the two latents to each modality.
struct Maps {
    audio: Vec<[f64; 2]>,
    text: Vec<[f64; 2]>,
    /// Per colour channel: constant and vertical-gradient weight per latent.
    visual: [[f64; 4]; 3],
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

impl Maps {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut pairs = |n: usize| -> Vec<[f64; 2]> { (0..n).map(|_| [gaussian(rng), gaussian(rng)]).collect() };
        let audio = pairs(spec.audio_dim);
        let text = pairs(spec.text_dim);
        let mut visual = [[0.0; 4]; 3];
        for ch in &mut visual {
            for w in ch.iter_mut() {
                *w = gaussian(rng) / 2.0;
            }
        }
        Maps { audio, text, visual }
    }
}

/// Sum of three random sines per target, clipped to `[-1, 1]` and rounded
/// to the precision written in the annotation file.
fn latent(n: usize, fps: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut waves = [[(0.0, 0.0, 0.0); 3]; 2];
    for target in &mut waves {
        for w in target.iter_mut() {
            let period_s = rng.gen_range(3.0..20.0);
            *w = (rng.gen_range(0.25..0.6), 2.0 * PI / (period_s * fps), rng.gen_range(0.0..2.0 * PI));
        }
    }
    (0..n)
        .map(|i| {
            waves.map(|target| {
                let v: f64 = target.iter().map(|(a, f, p)| a * (f * i as f64 + p).sin()).sum();
                (v.clamp(-1.0, 1.0) * 1e6).round() / 1e6
            })
        })
        .collect()
}

fn project(map: &[[f64; 2]], z: [f64; 2], snr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    map.iter()
        .map(|w| snr * (w[0] * z[0] + w[1] * z[1]) + gaussian(rng))
        .collect()
}

fn frame_png(maps: &Maps, z: [f64; 2], snr: f64, rng: &mut ChaCha8Rng) -> image::RgbImage {
    let scale = 40.0 / (snr * snr + 1.0).sqrt();
    let chan_noise = [gaussian(rng), gaussian(rng), gaussian(rng)];
    image::RgbImage::from_fn(FRAME_SIZE as u32, FRAME_SIZE as u32, |_, y| {
        let g = (y as f64 - (FRAME_SIZE as f64 - 1.0) / 2.0) / (FRAME_SIZE as f64 / 2.0);
        let px = |c: usize, e: f64| {
            let w = maps.visual[c];
            let s = (w[0] + w[1] * g) * z[0] + (w[2] + w[3] * g) * z[1];
            (128.0 + scale * (snr * s + chan_noise[c] + 0.5 * e)).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0, gaussian(rng)), px(1, gaussian(rng)), px(2, gaussian(rng))])
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    fs::write(path, text).map_err(DataError::io(path))
}

/// Writes one trial under `dir` and returns its manifest row with paths
/// relative to the dataset root.
fn write_trial(
    spec: &SynthSpec,
    maps: &Maps,
    rng: &mut ChaCha8Rng,
    root: &Path,
    trial_id: &str,
    subject_id: &str,
    partition: Partition,
) -> Result<ManifestRow, SynthError> {
    let rel = PathBuf::from("trials").join(trial_id);
    let dir = root.join(&rel);
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).map_err(DataError::io(&frames))?;
    let n = spec.frames_per_trial;
    let snr = spec.signal_to_noise;
    let z = latent(n, spec.fps, rng);

    let mut ann = String::from("valence,arousal\n");
    for zi in &z {
        if rng.gen_bool(spec.sentinel_rate) {
            ann.push_str(&format!("{SENTINEL},{SENTINEL}\n"));
        } else {
            ann.push_str(&format!("{:.6},{:.6}\n", zi[0], zi[1]));
        }
    }
    write_text(&dir.join("annotations.csv"), &ann)?;

    for (i, zi) in z.iter().enumerate() {
        let img = frame_png(maps, *zi, snr, rng);
        if rng.gen_bool(spec.missing_frame_rate) {
            continue;
        }
        let path = frames.join(format!("{i:05}.png"));
        img.save(&path).map_err(|e| DataError::Image {
            path: path.clone(),
            detail: e.to_string(),
        })?;
    }

    // The audio stream is a few rows off the frame count.
    let m = (n as i64 + rng.gen_range(-3..=3)).max(1) as usize;
    let mut audio = Vec::with_capacity(m * spec.audio_dim);
    for j in 0..m {
        audio.extend(project(&maps.audio, z[j.min(n - 1)], snr, rng));
    }
    write_feature_file(dir.join("audio.aff"), &Matrix::new(m, spec.audio_dim, audio)?)?;

    let duration = n as f64 / spec.fps;
    let mut words = String::from("word,start_s,end_s\n");
    let mut feats = Vec::new();
    let mut t = rng.gen_range(0.0..0.3);
    let mut count = 0;
    while t + 0.2 < duration {
        let end = (t + rng.gen_range(0.2..0.6)).min(duration);
        let (a, b) = ((t * spec.fps).ceil() as usize, ((end * spec.fps).ceil() as usize).min(n));
        let span = &z[a.min(n - 1)..b.max(a + 1).min(n)];
        let mean = span
            .iter()
            .fold([0.0, 0.0], |acc, v| [acc[0] + v[0], acc[1] + v[1]])
            .map(|s| s / span.len() as f64);
        words.push_str(&format!("w{count},{t:.4},{end:.4}\n"));
        feats.extend(project(&maps.text, mean, snr, rng));
        count += 1;
        t = end + rng.gen_range(0.0..0.3);
    }
    write_text(&dir.join("words.csv"), &words)?;
    write_feature_file(dir.join("words.aff"), &Matrix::new(count, spec.text_dim, feats)?)?;

    Ok(ManifestRow {
        trial_id: trial_id.to_string(),
        subject_id: subject_id.to_string(),
        partition,
        fps: spec.fps,
        frames_dir: rel.join("frames"),
        annotation_path: rel.join("annotations.csv"),
        audio_feat_path: rel.join("audio.aff"),
        wordspan_csv: rel.join("words.csv"),
        wordfeat_path: rel.join("words.aff"),
    })
}

/// Generates the dataset under `out_dir` and returns the manifest path.
/// The same spec always produces the same bytes.
pub fn generate_synth(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf, SynthError> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(DataError::io(out_dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let maps = Maps::new(spec, &mut rng);
    let first_val = spec.n_subjects - spec.n_validation();
    let mut rows = Vec::new();
    for s in 0..spec.n_subjects {
        let subject = format!("s{s:03}");
        let partition = if s >= first_val { Partition::Validation } else { Partition::Train };
        for k in 0..spec.trials_per_subject {
            let trial = format!("{subject}_t{k}");
            let mut trial_rng = ChaCha8Rng::seed_from_u64(spec.seed);
            trial_rng.set_stream((s * spec.trials_per_subject + k + 1) as u64);
            rows.push(write_trial(spec, &maps, &mut trial_rng, out_dir, &trial, &subject, partition)?);
        }
    }
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}
