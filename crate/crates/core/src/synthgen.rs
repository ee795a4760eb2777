//! Deterministic synthetic identity/visual/audio streams with controllable
//! identity drift and audio-visual desynchronization.
//!
//! Generation model, per stream of identity `i` and source `s`:
//!
//! * identity frames: `tanh(G_id (a_i + o_is) + λ L_id z_k) + σ ε`
//! * visual frames:   `tanh(G_v z_k + H_v a_i) + σ ε`
//! * audio frames:    `tanh(G_a z_k' + H_a b_i) + σ ε`
//!
//! `a_i` is a unit identity anchor, `b_i` a unit voice anchor, `o_is` a
//! per-source offset, and `z_k` the motion latent of latent window `k`. The
//! latents follow an AR(1) chain with correlation `latent_correlation`, so a
//! larger audio shift produces a weaker match. Visual and audio share
//! information only through `z`. All maps are fixed seeded Gaussian matrices.
//!
//! Noise draws depend only on the stream key, so corrupting a stream and
//! re-rendering it changes nothing but the corrupted factor.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::linalg::{dot, normalize_in_place, Mat};
use crate::seeding::{mix, sub_rng};
use crate::streams::{FrameFeatureSequence, Modality, StreamTriple};

/// Weight of the motion latent inside identity features.
const IDENTITY_MOTION_LEAK: f64 = 0.25;
/// Weight of the identity/voice anchor inside visual/audio features.
const APPEARANCE_GAIN: f64 = 0.7;
/// Anchors are redrawn until every pairwise |cos| is below this.
pub const MAX_ANCHOR_COSINE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Training identities.
    pub num_identities: usize,
    pub sources_per_identity: usize,
    /// Identity/visual frames per stream.
    pub frames_per_source: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub drift_magnitude: f64,
    /// Fraction of the stream re-anchored by identity drift.
    pub drift_span: f64,
    pub desync_offset_windows: usize,
    pub seed: u64,
    /// Held-out identities, one evaluation stream each.
    pub eval_streams: usize,
    pub latent_dim: usize,
    /// Video frames per motion latent.
    pub latent_window_frames: usize,
    pub latent_correlation: f64,
    /// Norm of the per-source identity offset.
    pub source_offset: f64,
    pub video_rate_hz: f64,
    pub audio_rate_hz: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_identities: 32,
            sources_per_identity: 4,
            frames_per_source: 250,
            dim: 64,
            noise_sigma: 0.3,
            drift_magnitude: 0.6,
            drift_span: 0.5,
            desync_offset_windows: 2,
            seed: 2024,
            eval_streams: 200,
            latent_dim: 16,
            latent_window_frames: 25,
            latent_correlation: 0.5,
            source_offset: 0.5,
            video_rate_hz: crate::streams::DEFAULT_VIDEO_RATE_HZ,
            audio_rate_hz: crate::streams::DEFAULT_AUDIO_RATE_HZ,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_identities", self.num_identities),
            ("sources_per_identity", self.sources_per_identity),
            ("frames_per_source", self.frames_per_source),
            ("dim", self.dim),
            ("latent_dim", self.latent_dim),
            ("latent_window_frames", self.latent_window_frames),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("synth.{field}"), "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.drift_magnitude) {
            return Err(Error::config(
                "synth.drift_magnitude",
                format!("must lie in [0, 1], got {}", self.drift_magnitude),
            ));
        }
        if !(self.drift_span > 0.0 && self.drift_span <= 1.0) {
            return Err(Error::config(
                "synth.drift_span",
                format!("must lie in (0, 1], got {}", self.drift_span),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("synth.noise_sigma", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.latent_correlation) {
            return Err(Error::config("synth.latent_correlation", "must lie in [0, 1)"));
        }
        if !(self.source_offset >= 0.0 && self.source_offset.is_finite()) {
            return Err(Error::config("synth.source_offset", "must be non-negative"));
        }
        for (field, r) in [("video_rate_hz", self.video_rate_hz), ("audio_rate_hz", self.audio_rate_hz)] {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::config(format!("synth.{field}"), "must be positive"));
            }
        }
        Ok(())
    }

    pub fn audio_frames(&self) -> usize {
        (self.frames_per_source as f64 * self.audio_rate_hz / self.video_rate_hz).round() as usize
    }

    pub fn latent_windows(&self) -> usize {
        self.frames_per_source.div_ceil(self.latent_window_frames)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

fn gaussian_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(rows, cols, gaussian_vec(rng, rows * cols, scale))
}

fn mat_vec(m: &Mat, v: &[f64], out: &mut [f64], gain: f64) {
    for (r, o) in out.iter_mut().enumerate() {
        *o += gain * dot(m.row(r), v);
    }
}

/// Unit anchors with pairwise |cos| below [`MAX_ANCHOR_COSINE`]. Each group of
/// `dim` consecutive anchors is exactly orthogonal (Gram-Schmidt); anchors
/// in different groups are redrawn until they satisfy the bound.
fn make_anchors(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(count);
    for n in 0..count {
        let group_start = n - n % dim;
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::config(
                    "synth.dim",
                    format!("cannot place {count} anchors with |cos| < {MAX_ANCHOR_COSINE} in {dim} dimensions"),
                ));
            }
            let mut v = gaussian_vec(rng, dim, 1.0);
            for a in &anchors[group_start..n] {
                let c = dot(&v, a);
                v.iter_mut().zip(a).for_each(|(x, y)| *x -= c * y);
            }
            if normalize_in_place(&mut v) < 1e-6 {
                continue;
            }
            if anchors.iter().all(|a| dot(a, &v).abs() < MAX_ANCHOR_COSINE) {
                anchors.push(v);
                break;
            }
        }
    }
    Ok(anchors)
}

/// Identity drift applied to a contiguous segment of the identity stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    pub start: usize,
    pub end: usize,
    pub donor: usize,
    pub magnitude: f64,
}

/// Everything needed to render one stream triple.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecipe {
    /// Index into the world's anchor table.
    pub identity: usize,
    pub identity_label: String,
    pub source_label: String,
    pub offset: Vec<f64>,
    pub latents: Vec<Vec<f64>>,
    /// Audio latent window `k` uses latent `(k + audio_shift) % latents.len()`.
    pub audio_shift: usize,
    pub drift: Option<Drift>,
    /// Seeds the per-frame noise and corruption placement.
    pub key: u64,
    /// Anchor indices eligible as drift donors.
    pub pool: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthStream {
    pub recipe: StreamRecipe,
    pub triple: StreamTriple,
}

/// Fixed maps and anchors shared by every stream of one configuration.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    cfg: SynthConfig,
    anchors: Vec<Vec<f64>>,
    voices: Vec<Vec<f64>>,
    id_map: Mat,
    id_motion: Mat,
    vis_motion: Mat,
    vis_appearance: Mat,
    aud_motion: Mat,
    aud_voice: Mat,
}

const TAG_WORLD: u64 = 1;
const TAG_STREAM: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_DRIFT: u64 = 4;
const TAG_EVAL: u64 = 5;

impl SynthWorld {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = sub_rng(cfg.seed, &[TAG_WORLD]);
        let total = cfg.num_identities + cfg.eval_streams;
        let anchors = make_anchors(&mut rng, total, cfg.dim)?;
        let voices = (0..total)
            .map(|_| {
                let mut v = gaussian_vec(&mut rng, cfg.dim, 1.0);
                normalize_in_place(&mut v);
                v
            })
            .collect();
        let (d, k) = (cfg.dim, cfg.latent_dim);
        let latent_scale = 1.0 / (k as f64).sqrt();
        Ok(SynthWorld {
            cfg: cfg.clone(),
            anchors,
            voices,
            id_map: gaussian_mat(&mut rng, d, d, 1.0),
            id_motion: gaussian_mat(&mut rng, d, k, latent_scale),
            vis_motion: gaussian_mat(&mut rng, d, k, latent_scale),
            vis_appearance: gaussian_mat(&mut rng, d, d, 1.0),
            aud_motion: gaussian_mat(&mut rng, d, k, latent_scale),
            aud_voice: gaussian_mat(&mut rng, d, d, 1.0),
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn anchor(&self, identity: usize) -> &[f64] {
        &self.anchors[identity]
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    fn recipe(&self, identity: usize, identity_label: String, source_label: String, key: u64, pool: (usize, usize)) -> StreamRecipe {
        let cfg = &self.cfg;
        let mut rng = sub_rng(cfg.seed, &[TAG_STREAM, key]);
        let mut offset = gaussian_vec(&mut rng, cfg.dim, 1.0);
        normalize_in_place(&mut offset);
        offset.iter_mut().for_each(|v| *v *= cfg.source_offset);

        let rho = cfg.latent_correlation;
        let innovation = (1.0 - rho * rho).sqrt();
        let mut latents: Vec<Vec<f64>> = Vec::with_capacity(cfg.latent_windows());
        for k in 0..cfg.latent_windows() {
            let fresh = gaussian_vec(&mut rng, cfg.latent_dim, 1.0);
            let z = match latents.last() {
                Some(prev) if k > 0 => prev.iter().zip(&fresh).map(|(p, e)| rho * p + innovation * e).collect(),
                _ => fresh,
            };
            latents.push(z);
        }
        StreamRecipe {
            identity,
            identity_label,
            source_label,
            offset,
            latents,
            audio_shift: 0,
            drift: None,
            key,
            pool,
        }
    }

    /// Recipe for source `source` of training identity `identity`.
    pub fn train_recipe(&self, identity: usize, source: usize) -> StreamRecipe {
        let key = (identity as u64) << 20 | source as u64;
        self.recipe(
            identity,
            format!("id{identity:04}"),
            format!("src{source:02}"),
            key,
            (0, self.cfg.num_identities),
        )
    }

    /// Recipe for the `k`-th held-out evaluation stream.
    pub fn eval_recipe(&self, k: usize) -> StreamRecipe {
        let identity = self.cfg.num_identities + k;
        self.recipe(
            identity,
            format!("eval{k:04}"),
            "eval".to_string(),
            mix(TAG_EVAL) ^ k as u64,
            (self.cfg.num_identities, self.num_anchors()),
        )
    }

    fn latent_for_video_frame<'r>(&self, recipe: &'r StreamRecipe, frame: usize) -> &'r [f64] {
        let k = (frame / self.cfg.latent_window_frames).min(recipe.latents.len() - 1);
        &recipe.latents[k]
    }

    fn latent_for_audio_frame<'r>(&self, recipe: &'r StreamRecipe, frame: usize) -> &'r [f64] {
        let video_pos = frame as f64 * self.cfg.video_rate_hz / self.cfg.audio_rate_hz;
        let n = recipe.latents.len();
        let k = ((video_pos / self.cfg.latent_window_frames as f64).floor() as usize).min(n - 1);
        &recipe.latents[(k + recipe.audio_shift) % n]
    }

    fn identity_anchor(&self, recipe: &StreamRecipe, frame: usize) -> Vec<f64> {
        let own = &self.anchors[recipe.identity];
        match &recipe.drift {
            Some(d) if frame >= d.start && frame < d.end => {
                let donor = &self.anchors[d.donor];
                let m = d.magnitude;
                let mut v: Vec<f64> = own.iter().zip(donor).map(|(a, b)| (1.0 - m) * a + m * b).collect();
                normalize_in_place(&mut v);
                v
            }
            _ => own.clone(),
        }
    }

    pub fn render(&self, recipe: &StreamRecipe) -> Result<StreamTriple> {
        let cfg = &self.cfg;
        let (d, frames, audio_frames) = (cfg.dim, cfg.frames_per_source, cfg.audio_frames());
        let sigma = cfg.noise_sigma;
        let noise = |m: Modality| sub_rng(cfg.seed, &[TAG_NOISE, recipe.key, m as u64]);

        let mut pre = vec![0.0; d];
        let finish = |pre: &[f64], rng: &mut ChaCha8Rng, out: &mut Vec<f32>| {
            for p in pre {
                let e: f64 = rng.sample(StandardNormal);
                out.push((p.tanh() + sigma * e) as f32);
            }
        };

        let mut rng = noise(Modality::Identity);
        let mut identity = Vec::with_capacity(frames * d);
        for f in 0..frames {
            let mut anchor = self.identity_anchor(recipe, f);
            anchor.iter_mut().zip(&recipe.offset).for_each(|(a, o)| *a += o);
            pre.iter_mut().for_each(|p| *p = 0.0);
            mat_vec(&self.id_map, &anchor, &mut pre, 1.0);
            mat_vec(&self.id_motion, self.latent_for_video_frame(recipe, f), &mut pre, IDENTITY_MOTION_LEAK);
            finish(&pre, &mut rng, &mut identity);
        }

        let mut rng = noise(Modality::Visual);
        let mut visual = Vec::with_capacity(frames * d);
        let mut appearance = vec![0.0; d];
        mat_vec(&self.vis_appearance, &self.anchors[recipe.identity], &mut appearance, APPEARANCE_GAIN);
        for f in 0..frames {
            pre.copy_from_slice(&appearance);
            mat_vec(&self.vis_motion, self.latent_for_video_frame(recipe, f), &mut pre, 1.0);
            finish(&pre, &mut rng, &mut visual);
        }

        let mut rng = noise(Modality::Audio);
        let mut audio = Vec::with_capacity(audio_frames * d);
        let mut voice = vec![0.0; d];
        mat_vec(&self.aud_voice, &self.voices[recipe.identity], &mut voice, APPEARANCE_GAIN);
        for f in 0..audio_frames {
            pre.copy_from_slice(&voice);
            mat_vec(&self.aud_motion, self.latent_for_audio_frame(recipe, f), &mut pre, 1.0);
            finish(&pre, &mut rng, &mut audio);
        }

        let seq = |m, rate, values| {
            FrameFeatureSequence::new(m, d, rate, values, recipe.identity_label.clone(), recipe.source_label.clone())
        };
        Ok(StreamTriple {
            identity: seq(Modality::Identity, cfg.video_rate_hz, identity)?,
            visual: seq(Modality::Visual, cfg.video_rate_hz, visual)?,
            audio: seq(Modality::Audio, cfg.audio_rate_hz, audio)?,
        })
    }

    pub fn stream(&self, recipe: StreamRecipe) -> Result<SynthStream> {
        let triple = self.render(&recipe)?;
        Ok(SynthStream { recipe, triple })
    }
}

/// Real training corpus: `num_identities x sources_per_identity` triples.
pub fn gen_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    let world = SynthWorld::new(cfg)?;
    gen_corpus_in(&world)
}

pub fn gen_corpus_in(world: &SynthWorld) -> Result<Corpus> {
    let cfg = world.config();
    let mut triples = Vec::with_capacity(cfg.num_identities * cfg.sources_per_identity);
    for i in 0..cfg.num_identities {
        for s in 0..cfg.sources_per_identity {
            triples.push(world.render(&world.train_recipe(i, s))?);
        }
    }
    Corpus::from_triples(triples)
}

/// Re-anchors a contiguous `span_fraction` of the identity stream toward a
/// donor identity: `(1 - m) a_i + m a_k`, renormalized. Visual and audio
/// streams are untouched.
pub fn corrupt_identity_drift(
    world: &SynthWorld,
    stream: &SynthStream,
    magnitude: f64,
    span_fraction: f64,
) -> Result<SynthStream> {
    if !(0.0..=1.0).contains(&magnitude) {
        return Err(Error::config("drift_magnitude", format!("must lie in [0, 1], got {magnitude}")));
    }
    if !(span_fraction > 0.0 && span_fraction <= 1.0) {
        return Err(Error::config("drift_span", format!("must lie in (0, 1], got {span_fraction}")));
    }
    if magnitude == 0.0 {
        return Ok(stream.clone());
    }
    let recipe = &stream.recipe;
    let (lo, hi) = recipe.pool;
    if hi - lo < 2 {
        return Err(Error::InsufficientData("identity drift needs a donor identity".into()));
    }
    let frames = world.config().frames_per_source;
    let mut rng = sub_rng(world.config().seed, &[TAG_DRIFT, recipe.key]);
    let mut donor = rng.random_range(lo..hi - 1);
    if donor >= recipe.identity {
        donor += 1;
    }
    let len = ((span_fraction * frames as f64).round() as usize).clamp(1, frames);
    let start = rng.random_range(0..=frames - len);

    let mut out = recipe.clone();
    out.drift = Some(Drift {
        start,
        end: start + len,
        donor,
        magnitude,
    });
    world.stream(out)
}

/// Cyclically shifts the audio latents by `offset_windows` latent windows.
pub fn corrupt_av_desync(world: &SynthWorld, stream: &SynthStream, offset_windows: usize) -> Result<SynthStream> {
    let cfg = world.config();
    if cfg.frames_per_source < cfg.latent_window_frames {
        return Err(Error::StreamTooShort(format!(
            "{} frames is shorter than one latent window of {}",
            cfg.frames_per_source, cfg.latent_window_frames
        )));
    }
    let mut out = stream.recipe.clone();
    out.audio_shift = (out.audio_shift + offset_windows) % out.latents.len();
    world.stream(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    Real,
    Drift,
    Desync,
}

impl Corruption {
    pub fn as_str(self) -> &'static str {
        match self {
            Corruption::Real => "real",
            Corruption::Drift => "drift",
            Corruption::Desync => "desync",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub name: String,
    pub corruption: Corruption,
    pub parameter: f64,
    pub stream: SynthStream,
}

/// Held-out evaluation set: every evaluation stream in its real,
/// drift-corrupted and desynchronized form.
pub fn gen_eval_set(world: &SynthWorld) -> Result<Vec<EvalItem>> {
    let cfg = world.config();
    let mut items = Vec::with_capacity(3 * cfg.eval_streams);
    for k in 0..cfg.eval_streams {
        let real = world.stream(world.eval_recipe(k))?;
        let drift = corrupt_identity_drift(world, &real, cfg.drift_magnitude, cfg.drift_span)?;
        let desync = corrupt_av_desync(world, &real, cfg.desync_offset_windows)?;
        items.push(EvalItem {
            name: format!("real_{k:04}"),
            corruption: Corruption::Real,
            parameter: 0.0,
            stream: real,
        });
        items.push(EvalItem {
            name: format!("drift_{k:04}"),
            corruption: Corruption::Drift,
            parameter: cfg.drift_magnitude,
            stream: drift,
        });
        items.push(EvalItem {
            name: format!("desync_{k:04}"),
            corruption: Corruption::Desync,
            parameter: cfg.desync_offset_windows as f64,
            stream: desync,
        });
    }
    Ok(items)
}

/// Writes `train/` (the corpus), `eval/<name>/` triples and `truth.csv`
/// (`path,label,corruption,parameter`, paths relative to `out_dir`).
pub fn write_synth_output(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<()> {
    let out = out_dir.as_ref();
    let world = SynthWorld::new(cfg)?;
    gen_corpus_in(&world)?.save_dir(out.join("train"))?;

    let truth_path = out.join("truth.csv");
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut w = csv::Writer::from_path(&truth_path).map_err(|e| Error::Csv {
        path: truth_path.clone(),
        source: e,
    })?;
    let csv_err = |e| Error::Csv {
        path: truth_path.clone(),
        source: e,
    };
    w.write_record(["path", "label", "corruption", "parameter"]).map_err(csv_err)?;
    for item in gen_eval_set(&world)? {
        let rel = format!("eval/{}", item.name);
        item.stream.triple.save(out.join(&rel))?;
        let label = if item.corruption == Corruption::Real { "1" } else { "0" };
        w.write_record([
            rel.as_str(),
            label,
            item.corruption.as_str(),
            &item.parameter.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&truth_path, e))?;
    Ok(())
}
