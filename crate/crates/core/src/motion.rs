//! How much does facial motion alone reveal about identity?
//!
//! A landmark sequence is reduced to its motion vector (consecutive-frame
//! differences, so static pose and face shape cancel out), and a multinomial
//! logistic regression is trained to predict identity from it. The probe
//! reports validation accuracy against the `1 / classes` chance level.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::seeding::sub_rng;
use crate::streams::{read_envelope, write_envelope, Manifest, BYTE_ORDER, DEFAULT_VIDEO_RATE_HZ, FORMAT_VERSION};

pub const LANDMARK_MODALITY: &str = "landmarks3d";

/// `F x L x 3` landmark positions, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSequence {
    pub num_points: usize,
    pub values: Vec<f32>,
    pub identity_label: String,
    pub source_label: String,
}

impl LandmarkSequence {
    pub fn new(num_points: usize, values: Vec<f32>, identity_label: String, source_label: String) -> Result<Self> {
        let seq = LandmarkSequence {
            num_points,
            values,
            identity_label,
            source_label,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let row = self.num_points * 3;
        if row == 0 || !self.values.len().is_multiple_of(row) {
            return Err(Error::Shape(format!(
                "{} values do not form frames of {} landmarks",
                self.values.len(),
                self.num_points
            )));
        }
        if self.num_frames() < 2 {
            return Err(Error::StreamTooShort(format!(
                "landmark sequence has {} frames, motion needs at least 2",
                self.num_frames()
            )));
        }
        if let Some(k) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                frame: k / row,
                column: k % row,
                offset: (k * 4) as u64,
            });
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.values.len() / (self.num_points * 3).max(1)
    }
}

/// `(F - 1) x L x 3` consecutive-frame differences, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionVector {
    pub values: Vec<f64>,
}

pub fn motion_vector(seq: &LandmarkSequence) -> Result<MotionVector> {
    seq.validate()?;
    let row = seq.num_points * 3;
    let v = &seq.values;
    let values = (row..v.len()).map(|k| f64::from(v[k]) - f64::from(v[k - row])).collect();
    Ok(MotionVector { values })
}

// ---------------------------------------------------------------------------
// Files

/// Writes `<stem>.json` + `<stem>.f32` with modality `landmarks3d`.
pub fn save_landmarks(seq: &LandmarkSequence, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    seq.validate()?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        modality: LANDMARK_MODALITY.to_string(),
        dim: seq.num_points * 3,
        frame_rate_hz: DEFAULT_VIDEO_RATE_HZ,
        num_frames: seq.num_frames(),
        identity: seq.identity_label.clone(),
        source: seq.source_label.clone(),
        data_file: format!("{stem}.f32"),
        byte_order: BYTE_ORDER.to_string(),
    };
    write_envelope(dir.as_ref(), stem, &manifest, &seq.values)
}

pub fn load_landmarks(manifest_path: impl AsRef<Path>) -> Result<LandmarkSequence> {
    let path = manifest_path.as_ref();
    let (m, values) = read_envelope(path)?;
    if m.modality != LANDMARK_MODALITY {
        return Err(Error::format(
            path,
            format!("expected modality {LANDMARK_MODALITY:?}, found {:?}", m.modality),
        ));
    }
    if m.dim % 3 != 0 {
        return Err(Error::format(path, format!("dim {} is not a multiple of 3", m.dim)));
    }
    LandmarkSequence::new(m.dim / 3, values, m.identity, m.source)
}

/// Loads every landmark manifest below `dir`, sorted by path.
pub fn load_landmark_dir(dir: impl AsRef<Path>) -> Result<Vec<LandmarkSequence>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "landmark directory not found"),
        ));
    }
    let mut paths: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "json"))
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no landmark manifests found"),
        ));
    }
    paths.iter().map(load_landmarks).collect()
}

// ---------------------------------------------------------------------------
// Synthetic landmarks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandmarkSynthConfig {
    pub num_identities: usize,
    pub sources_per_identity: usize,
    pub frames: usize,
    pub landmarks: usize,
    /// Per-frame positional jitter.
    pub noise_sigma: f64,
    /// Std-dev of the per-source phase offset, in radians.
    pub phase_jitter: f64,
    pub seed: u64,
}

impl Default for LandmarkSynthConfig {
    fn default() -> Self {
        LandmarkSynthConfig {
            num_identities: 20,
            sources_per_identity: 10,
            frames: 50,
            landmarks: 68,
            noise_sigma: 0.2,
            phase_jitter: 1.0,
            seed: 7,
        }
    }
}

impl LandmarkSynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("probe.num_identities", self.num_identities),
            ("probe.sources_per_identity", self.sources_per_identity),
            ("probe.landmarks", self.landmarks),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.frames < 2 {
            return Err(Error::config("probe.frames", "need at least 2 frames"));
        }
        if !(self.noise_sigma >= 0.0 && self.phase_jitter >= 0.0) {
            return Err(Error::config("probe.noise_sigma/phase_jitter", "must be non-negative"));
        }
        Ok(())
    }
}

const TAG_SIGNATURE: u64 = 31;
const TAG_SOURCE: u64 = 32;

/// Each identity moves every landmark coordinate along a sinusoid with its
/// own frequency, amplitude and phase. Sources add a random rigid offset, a
/// phase jitter and per-frame noise.
pub fn synth_landmarks(cfg: &LandmarkSynthConfig) -> Result<Vec<LandmarkSequence>> {
    cfg.validate()?;
    let coords = cfg.landmarks * 3;
    let mut out = Vec::with_capacity(cfg.num_identities * cfg.sources_per_identity);
    for i in 0..cfg.num_identities {
        let mut rng = sub_rng(cfg.seed, &[TAG_SIGNATURE, i as u64]);
        let freq: Vec<f64> = (0..coords).map(|_| rng.random_range(0.02..0.15)).collect();
        let amp: Vec<f64> = (0..coords).map(|_| rng.random_range(0.05..0.3)).collect();
        let phase: Vec<f64> = (0..coords).map(|_| rng.random_range(0.0..TAU)).collect();
        let shape: Vec<f64> = (0..coords).map(|_| rng.random_range(-1.0..1.0)).collect();
        for s in 0..cfg.sources_per_identity {
            let mut rng = sub_rng(cfg.seed, &[TAG_SOURCE, i as u64, s as u64]);
            let shift: [f64; 3] = [0; 3].map(|_| rng.random_range(-0.5..0.5));
            let jitter: f64 = cfg.phase_jitter * rng.sample::<f64, _>(StandardNormal);
            let mut values = Vec::with_capacity(cfg.frames * coords);
            for f in 0..cfg.frames {
                for c in 0..coords {
                    let wave = amp[c] * (TAU * freq[c] * f as f64 + phase[c] + jitter).sin();
                    let noise = cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                    values.push((shape[c] + shift[c % 3] + wave + noise) as f32);
                }
            }
            out.push(LandmarkSequence::new(
                cfg.landmarks,
                values,
                format!("id{i:04}"),
                format!("src{s:02}"),
            )?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Classifier

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
    /// Fraction of each identity's sources used for training.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            learning_rate: 0.5,
            iterations: 200,
            l2: 1e-3,
            train_fraction: 0.8,
            seed: 7,
        }
    }
}

/// Motion vectors with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMotion {
    pub vectors: Vec<MotionVector>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Splits sequences per identity: the first `round(fraction * n)` sources
/// (after a seeded shuffle) train, the rest validate. Each sequence is its
/// own source, so no source appears on both sides. Identities are numbered
/// in sorted label order.
pub fn split_by_source(seqs: &[LandmarkSequence], train_fraction: f64, seed: u64) -> Result<(LabeledMotion, LabeledMotion)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("probe.train_fraction", "must lie in (0, 1)"));
    }
    let mut by_id: BTreeMap<&str, BTreeMap<&str, &LandmarkSequence>> = BTreeMap::new();
    for s in seqs {
        if by_id.entry(&s.identity_label).or_default().insert(&s.source_label, s).is_some() {
            return Err(Error::InsufficientData(format!(
                "duplicate landmark source ({}, {})",
                s.identity_label, s.source_label
            )));
        }
    }
    let num_classes = by_id.len();
    let mut rng = sub_rng(seed, &[]);
    let empty = || LabeledMotion {
        vectors: Vec::new(),
        labels: Vec::new(),
        num_classes,
    };
    let (mut train, mut val) = (empty(), empty());
    for (label, sources) in by_id.values().enumerate() {
        let mut list: Vec<&LandmarkSequence> = sources.values().copied().collect();
        list.shuffle(&mut rng);
        let n_train = ((train_fraction * list.len() as f64).round() as usize).clamp(1, list.len());
        for (k, s) in list.into_iter().enumerate() {
            let side = if k < n_train { &mut train } else { &mut val };
            side.vectors.push(motion_vector(s)?);
            side.labels.push(label);
        }
    }
    Ok((train, val))
}

/// Softmax regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClassifier {
    pub num_classes: usize,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `classes x dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl MotionClassifier {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| {
                let w = &self.weight[c * self.dim..(c + 1) * self.dim];
                self.bias[c]
                    + w.iter()
                        .zip(x)
                        .zip(self.mean.iter().zip(&self.scale))
                        .map(|((w, x), (m, s))| w * (x - m) / s)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, v: &MotionVector) -> usize {
        let l = self.logits(&v.values);
        (0..l.len()).fold(0, |best, c| if l[c] > l[best] { c } else { best })
    }
}

/// Full-batch gradient descent on mean cross-entropy plus `l2/2 |W|²` (bias
/// unregularized), starting from zero weights, so the result depends only
/// on the data.
pub fn train_motion_classifier(data: &LabeledMotion, cfg: &ProbeConfig) -> Result<MotionClassifier> {
    let n = data.vectors.len();
    let k = data.num_classes;
    let present: std::collections::BTreeSet<usize> = data.labels.iter().copied().collect();
    if k < 2 || present.len() < 2 {
        return Err(Error::InsufficientData("motion probe needs at least two identities".into()));
    }
    let dim = data.vectors[0].values.len();
    if data.vectors.iter().any(|v| v.values.len() != dim) {
        return Err(Error::Shape("motion vectors differ in length".into()));
    }
    let mut mean = vec![0.0; dim];
    for v in &data.vectors {
        mean.iter_mut().zip(&v.values).for_each(|(m, x)| *m += x / n as f64);
    }
    let mut scale = vec![0.0; dim];
    for v in &data.vectors {
        scale.iter_mut().zip(v.values.iter().zip(&mean)).for_each(|(s, (x, m))| *s += (x - m).powi(2) / n as f64);
    }
    if scale.iter().all(|s| *s < 1e-24) {
        return Err(Error::InsufficientData("all motion vectors are identical".into()));
    }
    scale.iter_mut().for_each(|s| *s = if *s < 1e-24 { 1.0 } else { s.sqrt() });
    let x: Vec<Vec<f64>> = data
        .vectors
        .iter()
        .map(|v| v.values.iter().zip(mean.iter().zip(&scale)).map(|(x, (m, s))| (x - m) / s).collect())
        .collect();

    // Gradient descent from zero keeps every weight row in the span of the
    // training vectors, W = Aᵀ X, so the iteration runs on the n x n Gram
    // matrix instead of the n x dim features. The iterates are identical.
    let gram: Vec<f64> = (0..n * n).map(|p| crate::linalg::dot(&x[p / n], &x[p % n])).collect();
    let mut coef = vec![0.0; n * k];
    let mut bias = vec![0.0; k];
    // per-feature step size keeps the update scale-free in `dim`
    let lr = cfg.learning_rate / (dim as f64).sqrt();
    let mut grad = vec![0.0; n * k];
    let mut logits = vec![0.0; k];
    for _ in 0..cfg.iterations {
        let mut gb = vec![0.0; k];
        for (r, &yr) in data.labels.iter().enumerate() {
            for (c, l) in logits.iter_mut().enumerate() {
                *l = bias[c] + (0..n).map(|m| gram[r * n + m] * coef[m * k + c]).sum::<f64>();
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for c in 0..k {
                let d = ((logits[c] - max).exp() / z - if c == yr { 1.0 } else { 0.0 }) / n as f64;
                grad[r * k + c] = d;
                gb[c] += d;
            }
        }
        for (a, g) in coef.iter_mut().zip(&grad) {
            *a -= lr * (g + cfg.l2 * *a);
        }
        for (b, g) in bias.iter_mut().zip(&gb) {
            *b -= lr * g;
        }
    }
    let mut weight = vec![0.0; k * dim];
    for (r, xr) in x.iter().enumerate() {
        for c in 0..k {
            let a = coef[r * k + c];
            weight[c * dim..(c + 1) * dim].iter_mut().zip(xr).for_each(|(w, v)| *w += a * v);
        }
    }
    let mut model = MotionClassifier {
        num_classes: k,
        dim,
        mean: vec![0.0; dim],
        scale: vec![1.0; dim],
        weight,
        bias,
    };
    model.mean = mean;
    model.scale = scale;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub random_baseline: f64,
    pub improvement_factor: f64,
    pub num_classes: usize,
    pub num_validation: usize,
}

pub fn probe_report(classifier: &MotionClassifier, validation: &LabeledMotion) -> Result<ProbeReport> {
    if validation.vectors.is_empty() {
        return Err(Error::InsufficientData("empty validation set".into()));
    }
    let correct = validation
        .vectors
        .iter()
        .zip(&validation.labels)
        .filter(|(v, &y)| classifier.predict(v) == y)
        .count();
    Ok(report_from_accuracy(
        correct as f64 / validation.vectors.len() as f64,
        classifier.num_classes,
        validation.vectors.len(),
    ))
}

pub fn report_from_accuracy(accuracy: f64, num_classes: usize, num_validation: usize) -> ProbeReport {
    let random_baseline = 1.0 / num_classes as f64;
    ProbeReport {
        accuracy,
        random_baseline,
        improvement_factor: accuracy / random_baseline,
        num_classes,
        num_validation,
    }
}

/// Split, train and evaluate. With `shuffle_labels`, identity labels are
/// permuted across sequences first (seeded), which should land at chance.
pub fn run_probe(seqs: &[LandmarkSequence], cfg: &ProbeConfig, shuffle_labels: bool) -> Result<ProbeReport> {
    let mut seqs = seqs.to_vec();
    if shuffle_labels {
        let mut ids: Vec<String> = seqs.iter().map(|s| s.identity_label.clone()).collect();
        ids.shuffle(&mut sub_rng(cfg.seed, &[0x5EED]));
        for (k, (s, id)) in seqs.iter_mut().zip(ids).enumerate() {
            s.identity_label = id;
            // keep (identity, source) pairs unique after relabeling
            s.source_label = format!("seq{k:05}");
        }
    }
    let (train, val) = split_by_source(&seqs, cfg.train_fraction, cfg.seed)?;
    let clf = train_motion_classifier(&train, cfg)?;
    probe_report(&clf, &val)
}
