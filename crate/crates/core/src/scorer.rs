//! Sliding-window inference: intra-modal, cross-modal and combined scores,
//! plus the least consistent windows as localization evidence.
//!
//! The intra score looks at the full `W x W` matrix of identity-window
//! similarities, so its cost grows as `O(W²)` in the number of windows.

use serde::{Deserialize, Serialize};

use crate::aggregator::{aggregate_forward, ModelParams, Role};
use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::model::{ConsistencyModel, ModelKind};
use crate::streams::{partition_windows, time_aligned_block, window_starts, FrameFeatureSequence, StreamTriple, WindowSeries, WindowSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Percentile of the off-diagonal intra similarities, in `(0, 100]`.
    pub percentile_n: f64,
    pub stride_frames: usize,
    pub window_intra: usize,
    pub window_cross: usize,
    pub min_windows: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            percentile_n: 20.0,
            stride_frames: 5,
            window_intra: 5,
            window_cross: 50,
            min_windows: 2,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile_n > 0.0 && self.percentile_n <= 100.0) {
            return Err(Error::config(
                "scoring.percentile_n",
                format!("must lie in (0, 100], got {}", self.percentile_n),
            ));
        }
        if self.min_windows < 2 {
            return Err(Error::config("scoring.min_windows", "at least two windows are needed for a pair"));
        }
        self.intra_spec().validate()?;
        self.cross_spec().validate()
    }

    pub fn intra_spec(&self) -> WindowSpec {
        WindowSpec::new(self.window_intra, self.stride_frames)
    }

    pub fn cross_spec(&self) -> WindowSpec {
        WindowSpec::new(self.window_cross, self.stride_frames)
    }
}

/// Linear-interpolation percentile: sort ascending, rank
/// `r = (n / 100) (K - 1)`, interpolate between `floor(r)` and `ceil(r)`.
pub fn percentile_linear(values: &[f64], n: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&n) {
        return Err(Error::config("percentile_n", format!("must lie in [0, 100], got {n}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let r = n / 100.0 * (sorted.len() - 1) as f64;
    let lo = r.floor() as usize;
    let hi = r.ceil() as usize;
    let frac = r - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Least similar pair of identity windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntraArgmin {
    pub span_a: (usize, usize),
    pub span_b: (usize, usize),
    pub sim: f64,
}

/// Least consistent audio-visual window, as a visual frame span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossArgmin {
    pub span: (usize, usize),
    pub sim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Real,
    Fake,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub score_intra: f64,
    pub score_cross: f64,
    pub score_combined: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    pub intra_argmin: IntraArgmin,
    pub cross_argmin: CrossArgmin,
}

impl ScoreReport {
    pub fn new(score_intra: f64, intra_argmin: IntraArgmin, score_cross: f64, cross_argmin: CrossArgmin) -> Self {
        ScoreReport {
            score_intra,
            score_cross,
            score_combined: score_intra + score_cross,
            verdict: None,
            intra_argmin,
            cross_argmin,
        }
    }
}

/// Embeds every window of `seq` with `params`.
pub fn embed_windows(seq: &FrameFeatureSequence, params: &ModelParams, spec: &WindowSpec) -> Result<WindowSeries> {
    let blocks = partition_windows(seq, spec)?;
    let mut emb = Mat::zeros(blocks.len(), params.d_out);
    let mut spans = Vec::with_capacity(blocks.len());
    for (w, block) in blocks.iter().enumerate() {
        let y = embed_one(&block.frames, params, block.span)?;
        emb.row_mut(w).copy_from_slice(&y);
        spans.push(block.span);
    }
    WindowSeries::new(emb, spans, seq.modality, seq.frame_rate_hz)
}

fn embed_one(frames: &Mat, params: &ModelParams, span: (usize, usize)) -> Result<Vec<f64>> {
    match aggregate_forward(frames, params) {
        Ok((y, _)) => Ok(y),
        Err(Error::DegenerateEmbedding { norm, .. }) => Err(Error::DegenerateEmbedding { norm, span: Some(span) }),
        Err(e) => Err(e),
    }
}

/// Visual windows and the audio windows covering the same time spans.
pub fn embed_aligned(
    visual: &FrameFeatureSequence,
    audio: &FrameFeatureSequence,
    vis_params: &ModelParams,
    aud_params: &ModelParams,
    spec: &WindowSpec,
) -> Result<(WindowSeries, WindowSeries)> {
    let vis = embed_windows(visual, vis_params, spec)?;
    let mut emb = Mat::zeros(vis.len(), aud_params.d_out);
    let mut spans = Vec::with_capacity(vis.len());
    for (w, start) in window_starts(visual.num_frames(), spec).enumerate() {
        let (span, block) = time_aligned_block(audio, visual.frame_rate_hz, start, spec.window_len_frames);
        let y = embed_one(&block, aud_params, span)?;
        emb.row_mut(w).copy_from_slice(&y);
        spans.push(span);
    }
    let aud = WindowSeries::new(emb, spans, audio.modality, audio.frame_rate_hz)?;
    Ok((vis, aud))
}

/// Percentile of the strict upper triangle of the window similarity matrix,
/// and the least similar window pair.
pub fn intra_score(windows: &WindowSeries, cfg: &ScoringConfig) -> Result<(f64, IntraArgmin)> {
    let w = windows.len();
    if w < cfg.min_windows.max(2) {
        return Err(Error::StreamTooShort(format!(
            "{w} identity windows, at least {} required",
            cfg.min_windows.max(2)
        )));
    }
    let e = &windows.embeddings;
    let mut pool = Vec::with_capacity(w * (w - 1) / 2);
    let mut argmin = IntraArgmin {
        span_a: windows.spans[0],
        span_b: windows.spans[1],
        sim: f64::INFINITY,
    };
    for a in 0..w {
        for b in a + 1..w {
            let s = dot(e.row(a), e.row(b));
            if s < argmin.sim {
                argmin = IntraArgmin {
                    span_a: windows.spans[a],
                    span_b: windows.spans[b],
                    sim: s,
                };
            }
            pool.push(s);
        }
    }
    Ok((percentile_linear(&pool, cfg.percentile_n)?, argmin))
}

/// Mean of `<gamma(t), alpha(t)>` over aligned windows, and the window with
/// the lowest similarity.
pub fn cross_score(vis: &WindowSeries, aud: &WindowSeries) -> Result<(f64, CrossArgmin)> {
    if vis.len() != aud.len() {
        return Err(Error::Shape(format!(
            "{} visual windows but {} audio windows",
            vis.len(),
            aud.len()
        )));
    }
    if vis.is_empty() {
        return Err(Error::StreamTooShort("no audio-visual windows".into()));
    }
    if vis.embeddings.cols != aud.embeddings.cols {
        return Err(Error::Shape("visual and audio embeddings differ in width".into()));
    }
    // starts must agree to within one frame of the coarser stream
    let tol = 1.0 / vis.frame_rate_hz.min(aud.frame_rate_hz);
    for w in 0..vis.len() {
        let (va, _) = vis.span_seconds(w);
        let (aa, _) = aud.span_seconds(w);
        if (va - aa).abs() > tol {
            return Err(Error::Shape(format!(
                "window {w}: visual starts at {va:.3}s but audio at {aa:.3}s"
            )));
        }
    }
    let mut sum = 0.0;
    let mut argmin = CrossArgmin {
        span: vis.spans[0],
        sim: f64::INFINITY,
    };
    for w in 0..vis.len() {
        let s = dot(vis.embeddings.row(w), aud.embeddings.row(w));
        sum += s;
        if s < argmin.sim {
            argmin = CrossArgmin { span: vis.spans[w], sim: s };
        }
    }
    Ok((sum / vis.len() as f64, argmin))
}

/// Scores one stream triple with an intra and a cross model.
pub fn score_stream(
    streams: &StreamTriple,
    intra: &ConsistencyModel,
    cross: &ConsistencyModel,
    cfg: &ScoringConfig,
) -> Result<ScoreReport> {
    cfg.validate()?;
    if intra.kind != ModelKind::Intra || cross.kind != ModelKind::Cross {
        return Err(Error::config("checkpoints", "expected one intra and one cross model"));
    }
    let id = &streams.identity;
    if id.num_frames() < cfg.window_intra {
        return Err(Error::StreamTooShort(format!(
            "identity stream has {} frames, one window needs {}",
            id.num_frames(),
            cfg.window_intra
        )));
    }
    let id_windows = embed_windows(id, intra.aggregator(Role::Identity)?, &cfg.intra_spec())?;
    let (s_intra, intra_argmin) = intra_score(&id_windows, cfg)?;
    let (vis, aud) = embed_aligned(
        &streams.visual,
        &streams.audio,
        cross.aggregator(Role::Visual)?,
        cross.aggregator(Role::Audio)?,
        &cfg.cross_spec(),
    )?;
    let (s_cross, cross_argmin) = cross_score(&vis, &aud)?;
    Ok(ScoreReport::new(s_intra, intra_argmin, s_cross, cross_argmin))
}

/// Verdict plus the windows that drove it. Evidence is filled in for both
/// verdicts so real calls can be audited too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub verdict: Verdict,
    pub threshold: f64,
    pub score_combined: f64,
    pub score_intra: f64,
    pub score_cross: f64,
    pub intra_evidence: IntraArgmin,
    pub cross_evidence: CrossArgmin,
}

pub fn verdict(score_combined: f64, threshold: f64) -> Verdict {
    if score_combined < threshold {
        Verdict::Fake
    } else {
        Verdict::Real
    }
}

pub fn explain(report: &ScoreReport, threshold: f64) -> Explanation {
    Explanation {
        verdict: verdict(report.score_combined, threshold),
        threshold,
        score_combined: report.score_combined,
        score_intra: report.score_intra,
        score_cross: report.score_cross,
        intra_evidence: report.intra_argmin,
        cross_evidence: report.cross_argmin,
    }
}
