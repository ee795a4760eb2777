//! Contrastive training of the consistency models.
//!
//! The intra model (identity aggregator) and the cross model (visual + audio
//! aggregators) are trained in two independent runs. Each step samples `I`
//! identities with `T` samples from distinct sources, embeds one window per
//! sample, and applies one AdamW update to the aggregator weights and the
//! shared log-temperature. The schedule is linear warmup followed by cosine
//! annealing to zero.
//!
//! Training is single-threaded and a pure function of the corpus and the
//! config: two runs with the same seed produce bit-identical checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregator::{accumulate_param_grads, aggregate_forward, ForwardCache, ModelParams, Role};
use crate::consistency::{cross_loss_gradients, intra_loss_gradients, CrossBatch, CrossLossMode, IntraBatch};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{ConsistencyModel, ModelKind, TAU_MAX, TAU_MIN};
use crate::seeding::sub_rng;
use crate::streams::{time_aligned_block, WindowSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Identities per batch (`I`).
    pub identities_per_batch: usize,
    /// Samples per identity (`T`), drawn from distinct sources when possible.
    pub samples_per_identity: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub tau_init: f64,
    /// Defaults to 5% of `total_steps`.
    pub warmup_steps: Option<usize>,
    pub total_steps: usize,
    pub seed: u64,
    pub loss_mode: CrossLossMode,
    /// Std-dev of Gaussian noise added to per-frame features before pooling.
    pub embed_noise_sigma: f64,
    pub window_intra: WindowSpec,
    pub window_cross: WindowSpec,
    pub embed_dim: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            identities_per_batch: 8,
            samples_per_identity: 4,
            lr_peak: 1e-4,
            weight_decay: 0.2,
            tau_init: 0.07,
            warmup_steps: None,
            total_steps: 2000,
            seed: 0,
            loss_mode: CrossLossMode::Symmetric,
            embed_noise_sigma: 0.01,
            window_intra: WindowSpec::new(5, 5),
            window_cross: WindowSpec::new(50, 50),
            embed_dim: 256,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.total_steps / 20)
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities_per_batch == 0 {
            return Err(Error::config("train.identities_per_batch", "must be positive"));
        }
        if self.samples_per_identity == 0 {
            return Err(Error::config("train.samples_per_identity", "must be positive"));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::config("train.lr_peak", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau_init) {
            return Err(Error::config(
                "train.tau_init",
                format!("must lie in [{TAU_MIN}, {TAU_MAX}], got {}", self.tau_init),
            ));
        }
        if self.warmup() > self.total_steps {
            return Err(Error::config("train.warmup_steps", "must not exceed total_steps"));
        }
        if !(self.embed_noise_sigma >= 0.0 && self.embed_noise_sigma.is_finite()) {
            return Err(Error::config("train.embed_noise_sigma", "must be non-negative"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("train.embed_dim", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1/beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("train.epsilon", "must be positive"));
        }
        self.window_intra.validate()?;
        self.window_cross.validate()
    }

    fn window(&self, kind: ModelKind) -> &WindowSpec {
        match kind {
            ModelKind::Intra => &self.window_intra,
            ModelKind::Cross => &self.window_cross,
        }
    }
}

/// Learning rate at `step`: linear warmup from 0 to `lr_peak`, then cosine
/// annealing to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let (warmup, total) = (cfg.warmup(), cfg.total_steps);
    if step > total {
        return Err(Error::config("step", format!("{step} is past total_steps {total}")));
    }
    if step < warmup {
        return Ok(cfg.lr_peak * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(cfg.lr_peak);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One window to embed: `(identity, source)` indices into the corpus and the
/// first video frame of the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSample {
    pub identity: usize,
    pub source: usize,
    pub start_frame: usize,
}

/// `I x T` samples, identity-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub identities: usize,
    pub samples_per_identity: usize,
    pub samples: Vec<BatchSample>,
}

/// Draws a batch. Identities are sampled without replacement; within an
/// identity, sources are distinct unless it has fewer than `T` of them, in
/// which case they are drawn with replacement.
pub fn sample_batch(corpus: &Corpus, cfg: &TrainConfig, kind: ModelKind, rng: &mut ChaCha8Rng) -> Result<TrainingBatch> {
    let (ni, nt) = (cfg.identities_per_batch, cfg.samples_per_identity);
    if corpus.len() < ni {
        return Err(Error::InsufficientData(format!(
            "corpus has {} identities, batch needs {ni}",
            corpus.len()
        )));
    }
    let spec = cfg.window(kind);
    let ids = sample_indices(rng, corpus.len(), ni);
    let mut samples = Vec::with_capacity(ni * nt);
    for identity in ids.iter() {
        let entry = &corpus.identities()[identity];
        let available = entry.sources.len();
        let sources: Vec<usize> = if available >= nt {
            sample_indices(rng, available, nt).into_vec()
        } else {
            (0..nt).map(|_| rng.random_range(0..available)).collect()
        };
        for source in sources {
            let frames = entry.sources[source].streams.visual.num_frames().min(
                entry.sources[source].streams.identity.num_frames(),
            );
            let windows = spec.num_windows(frames);
            let start_frame = rng.random_range(0..windows) * spec.stride_frames;
            samples.push(BatchSample {
                identity,
                source,
                start_frame,
            });
        }
    }
    Ok(TrainingBatch {
        identities: ni,
        samples_per_identity: nt,
        samples,
    })
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    steps: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

/// One parameter tensor with its gradient.
pub struct ParamGroup<'a> {
    pub values: &'a mut [f64],
    pub grads: &'a [f64],
    pub decay: bool,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Groups must be passed in the same order on every call.
    pub fn step(&mut self, lr: f64, groups: Vec<ParamGroup<'_>>) {
        if self.first.is_empty() {
            self.first = groups.iter().map(|g| vec![0.0; g.values.len()]).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (k, group) in groups.into_iter().enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (((p, g), m), v) in group.values.iter_mut().zip(group.grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                if group.decay {
                    *p *= 1.0 - lr * self.weight_decay;
                }
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tau: f64,
}

fn noisy_window(frames: Mat, sigma: f64, rng: &mut ChaCha8Rng) -> Mat {
    if sigma == 0.0 {
        return frames;
    }
    let mut frames = frames;
    for v in frames.data.iter_mut() {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    frames
}

fn embed_all(
    windows: Vec<Mat>,
    params: &ModelParams,
    span_of: impl Fn(usize) -> (usize, usize),
) -> Result<(Vec<f64>, Vec<ForwardCache>)> {
    let mut flat = Vec::with_capacity(windows.len() * params.d_out);
    let mut caches = Vec::with_capacity(windows.len());
    for (k, w) in windows.iter().enumerate() {
        let (y, cache) = aggregate_forward(w, params).map_err(|e| match e {
            Error::DegenerateEmbedding { norm, .. } => Error::DegenerateEmbedding {
                norm,
                span: Some(span_of(k)),
            },
            other => other,
        })?;
        flat.extend_from_slice(&y);
        caches.push(cache);
    }
    Ok((flat, caches))
}

fn backprop(caches: &[ForwardCache], params: &ModelParams, grad_embeddings: &[f64]) -> Result<ModelParams> {
    let mut acc = ModelParams::zeros(params.role, params.d_in, params.d_out);
    for (cache, g) in caches.iter().zip(grad_embeddings.chunks_exact(params.d_out)) {
        accumulate_param_grads(cache, params, g, &mut acc)?;
    }
    Ok(acc)
}

fn batch_labels(corpus: &Corpus, batch: &TrainingBatch) -> Vec<String> {
    batch
        .samples
        .iter()
        .step_by(batch.samples_per_identity.max(1))
        .map(|s| corpus.identities()[s.identity].label.clone())
        .collect()
}

/// One optimizer update of `model` on `batch`. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut ConsistencyModel,
    optimizer: &mut AdamW,
    corpus: &Corpus,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    step: usize,
    noise_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let lr = lr_at(step, cfg)?;
    let tau = model.tau();
    let (ni, nt) = (batch.identities, batch.samples_per_identity);
    let spec = cfg.window(model.kind);
    let triple = |s: &BatchSample| &corpus.identities()[s.identity].sources[s.source].streams;
    let span_of = |k: usize| {
        let s = batch.samples[k].start_frame;
        (s, s + spec.window_len_frames)
    };
    let non_finite = |what: &str| Error::NonFiniteTraining {
        what: what.to_string(),
        step,
        identities: batch_labels(corpus, batch),
    };

    let (loss, param_grads, grad_log_tau) = match model.kind {
        ModelKind::Intra => {
            let params = model.aggregator(Role::Identity)?;
            let windows = batch
                .samples
                .iter()
                .map(|s| noisy_window(triple(s).identity.block(s.start_frame, spec.window_len_frames), cfg.embed_noise_sigma, noise_rng))
                .collect();
            let (mu, caches) = embed_all(windows, params, span_of)?;
            let g = intra_loss_gradients(&IntraBatch::from_raw(ni, nt, params.d_out, mu)?, tau)?;
            let grads = backprop(&caches, params, &g.mu)?;
            (g.loss, vec![grads], g.log_tau)
        }
        ModelKind::Cross => {
            let vis = model.aggregator(Role::Visual)?;
            let aud = model.aggregator(Role::Audio)?;
            let mut vis_windows = Vec::with_capacity(batch.samples.len());
            let mut aud_windows = Vec::with_capacity(batch.samples.len());
            for s in &batch.samples {
                let t = triple(s);
                let v = t.visual.block(s.start_frame, spec.window_len_frames);
                let (_, a) = time_aligned_block(&t.audio, t.visual.frame_rate_hz, s.start_frame, spec.window_len_frames);
                vis_windows.push(noisy_window(v, cfg.embed_noise_sigma, noise_rng));
                aud_windows.push(noisy_window(a, cfg.embed_noise_sigma, noise_rng));
            }
            let (gamma, vis_caches) = embed_all(vis_windows, vis, span_of)?;
            let (alpha, aud_caches) = embed_all(aud_windows, aud, span_of)?;
            let g = cross_loss_gradients(&CrossBatch::from_raw(ni, nt, vis.d_out, gamma, alpha)?, tau, cfg.loss_mode)?;
            let gv = backprop(&vis_caches, vis, &g.gamma)?;
            let ga = backprop(&aud_caches, aud, &g.alpha)?;
            (g.loss, vec![gv, ga], g.log_tau)
        }
    };

    if !loss.is_finite() {
        return Err(non_finite("loss"));
    }
    if !grad_log_tau.is_finite() || param_grads.iter().any(|g| !g.is_finite()) {
        return Err(non_finite("gradient"));
    }

    let tau_grad = [grad_log_tau];
    let mut groups = Vec::with_capacity(2 * param_grads.len() + 1);
    for (p, g) in model.aggregators.iter_mut().zip(&param_grads) {
        groups.push(ParamGroup {
            values: &mut p.weight,
            grads: &g.weight,
            decay: true,
        });
        groups.push(ParamGroup {
            values: &mut p.bias,
            grads: &g.bias,
            decay: false,
        });
    }
    groups.push(ParamGroup {
        values: std::slice::from_mut(&mut model.log_tau),
        grads: &tau_grad,
        decay: false,
    });
    optimizer.step(lr, groups);
    model.clamp_tau();
    model.step = step + 1;

    if model.aggregators.iter().any(|p| !p.is_finite()) || !model.log_tau.is_finite() {
        return Err(non_finite("parameters"));
    }
    Ok(loss)
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: ConsistencyModel,
    pub log: Vec<StepLog>,
}

const TAG_INIT: u64 = 11;
const TAG_BATCH: u64 = 12;
const TAG_NOISE: u64 = 13;

/// Trains one model kind on `corpus`. The returned parameters are rounded
/// to `f32`, exactly as they will be stored.
pub fn train_model(corpus: &Corpus, cfg: &TrainConfig, kind: ModelKind) -> Result<TrainRun> {
    cfg.validate()?;
    let (d_id, d_vis, d_aud) = corpus.dims()?;
    let kind_tag = kind as u64;
    let mut init_rng = sub_rng(cfg.seed, &[TAG_INIT, kind_tag]);
    let mut batch_rng = sub_rng(cfg.seed, &[TAG_BATCH, kind_tag]);
    let mut noise_rng = sub_rng(cfg.seed, &[TAG_NOISE, kind_tag]);

    let d_in = |role: Role| match role {
        Role::Identity => d_id,
        Role::Visual => d_vis,
        Role::Audio => d_aud,
    };
    let mut model = ConsistencyModel::init(kind, d_in, cfg.embed_dim, cfg.tau_init, &mut init_rng);
    model.loss_mode = cfg.loss_mode;
    model.train_config = Some(serde_json::to_value(cfg).expect("config serializes"));
    let mut optimizer = AdamW::new(cfg);
    let mut log = Vec::with_capacity(cfg.total_steps);
    for entry in corpus.identities().iter().filter(|e| e.sources.len() < cfg.samples_per_identity) {
        log::warn!(
            "identity {} has {} sources, fewer than {}; its sources will repeat within a batch",
            entry.label,
            entry.sources.len(),
            cfg.samples_per_identity
        );
    }

    for step in 0..cfg.total_steps {
        let batch = sample_batch(corpus, cfg, kind, &mut batch_rng)?;
        let lr = lr_at(step, cfg)?;
        let loss = train_step(&mut model, &mut optimizer, corpus, &batch, cfg, step, &mut noise_rng)?;
        log.push(StepLog {
            step,
            lr,
            loss,
            tau: model.tau(),
        });
    }
    model.quantize_f32();
    Ok(TrainRun { model, log })
}

/// Evaluates the loss of `model` on a batch without updating anything.
pub fn batch_loss(model: &ConsistencyModel, corpus: &Corpus, batch: &TrainingBatch, cfg: &TrainConfig) -> Result<f64> {
    let mut scratch = model.clone();
    let mut opt = AdamW::new(cfg);
    let mut rng = sub_rng(0, &[]);
    let quiet = TrainConfig {
        embed_noise_sigma: 0.0,
        ..cfg.clone()
    };
    // lr at the final step is zero, so the update is a no-op on the scratch copy
    train_step(&mut scratch, &mut opt, corpus, batch, &quiet, quiet.total_steps, &mut rng)
}

pub fn write_log(log: &[StepLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    for row in log {
        w.serialize(row).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Paths written by [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub intra_checkpoint: PathBuf,
    pub cross_checkpoint: PathBuf,
    pub intra_log: PathBuf,
    pub cross_log: PathBuf,
}

/// Trains both models and writes `intra.ckpt`, `cross.ckpt`, `intra_log.csv`
/// and `cross_log.csv` into `out_dir`.
pub fn train(corpus: &Corpus, cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutput> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let output = TrainOutput {
        intra_checkpoint: out.join("intra.ckpt"),
        cross_checkpoint: out.join("cross.ckpt"),
        intra_log: out.join("intra_log.csv"),
        cross_log: out.join("cross_log.csv"),
    };
    let intra = train_model(corpus, cfg, ModelKind::Intra)?;
    intra.model.save(&output.intra_checkpoint)?;
    write_log(&intra.log, &output.intra_log)?;
    let cross = train_model(corpus, cfg, ModelKind::Cross)?;
    cross.model.save(&output.cross_checkpoint)?;
    write_log(&cross.log, &output.cross_log)?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(warmup: usize, total: usize) -> TrainConfig {
        TrainConfig {
            warmup_steps: Some(warmup),
            total_steps: total,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_fixed_points() {
        let c = cfg(100, 1000);
        assert!((lr_at(50, &c).unwrap() - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(100, &c).unwrap(), 1e-4);
        assert_eq!(lr_at(1000, &c).unwrap(), 0.0);
        assert!(lr_at(1001, &c).is_err());
    }

    #[test]
    fn schedule_is_unimodal() {
        let c = cfg(37, 400);
        let lrs: Vec<f64> = (0..=400).map(|s| lr_at(s, &c).unwrap()).collect();
        assert!(lrs[..=37].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[37..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn default_warmup_is_five_percent() {
        assert_eq!(TrainConfig::default().warmup(), 100);
    }

    #[test]
    fn adamw_with_zero_gradient_only_decays() {
        let c = TrainConfig::default();
        let mut opt = AdamW::new(&c);
        let mut w = vec![0.5, -2.0];
        let mut b = vec![0.25];
        let mut t = [0.3];
        let lr = 1e-3;
        opt.step(
            lr,
            vec![
                ParamGroup { values: &mut w, grads: &[0.0, 0.0], decay: true },
                ParamGroup { values: &mut b, grads: &[0.0], decay: false },
                ParamGroup { values: &mut t, grads: &[0.0], decay: false },
            ],
        );
        assert_eq!(w, vec![0.5 * (1.0 - lr * 0.2), -2.0 * (1.0 - lr * 0.2)]);
        assert_eq!(b, vec![0.25]);
        assert_eq!(t, [0.3]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig { tau_init: 2.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_peak: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(cfg(11, 10).validate().is_err());
    }
}
