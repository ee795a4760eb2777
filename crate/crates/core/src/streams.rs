//! Per-frame feature streams and their on-disk format.
//!
//! A stream is stored as two files: a UTF-8 JSON manifest and a raw payload of
//! row-major little-endian `f32` values (`num_frames * dim` of them). The
//! manifest names the payload in `data_file`, relative to the manifest's own
//! directory.
//!
//! ```json
//! {
//!   "version": 1,
//!   "modality": "identity",
//!   "dim": 64,
//!   "frame_rate_hz": 25.0,
//!   "num_frames": 250,
//!   "identity": "id0003",
//!   "source": "src01",
//!   "data_file": "identity.f32",
//!   "byte_order": "little"
//! }
//! ```
//!
//! Frame indices and spans are zero-based; spans are half-open `[start, end)`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const FORMAT_VERSION: u32 = 1;
pub const BYTE_ORDER: &str = "little";

/// Default feature rate for identity and visual streams.
pub const DEFAULT_VIDEO_RATE_HZ: f64 = 25.0;
/// Default feature rate for audio streams.
pub const DEFAULT_AUDIO_RATE_HZ: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Identity,
    Visual,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Identity, Modality::Visual, Modality::Audio];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Identity => "identity",
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Modality::Identity),
            "visual" => Ok(Modality::Visual),
            "audio" => Ok(Modality::Audio),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

/// Per-frame features of one modality of one video source.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSequence {
    pub modality: Modality,
    pub dim: usize,
    pub frame_rate_hz: f64,
    /// `num_frames * dim` values, row-major.
    pub frames: Vec<f32>,
    pub identity_label: String,
    pub source_label: String,
}

impl FrameFeatureSequence {
    pub fn new(
        modality: Modality,
        dim: usize,
        frame_rate_hz: f64,
        frames: Vec<f32>,
        identity_label: impl Into<String>,
        source_label: impl Into<String>,
    ) -> Result<Self> {
        let seq = FrameFeatureSequence {
            modality,
            dim,
            frame_rate_hz,
            frames,
            identity_label: identity_label.into(),
            source_label: source_label.into(),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return Err(Error::config("frame_rate_hz", "must be positive and finite"));
        }
        if self.frames.is_empty() || !self.frames.len().is_multiple_of(self.dim) {
            return Err(Error::Shape(format!(
                "{} values do not form a whole number of {}-dim frames (need at least one)",
                self.frames.len(),
                self.dim
            )));
        }
        if let Some(pos) = self.frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                frame: pos / self.dim,
                column: pos % self.dim,
                offset: (pos * 4) as u64,
            });
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn frame(&self, index: usize) -> &[f32] {
        &self.frames[index * self.dim..(index + 1) * self.dim]
    }

    pub fn duration_s(&self) -> f64 {
        self.num_frames() as f64 / self.frame_rate_hz
    }

    /// `len` consecutive frames starting at `start`, widened to `f64`. Rows
    /// past the end of the stream repeat the last frame.
    pub fn block(&self, start: usize, len: usize) -> Mat {
        let last = self.num_frames() - 1;
        let mut m = Mat::zeros(len, self.dim);
        for r in 0..len {
            let src = self.frame((start + r).min(last));
            for (dst, v) in m.row_mut(r).iter_mut().zip(src) {
                *dst = f64::from(*v);
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    #[default]
    RepeatLast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub window_len_frames: usize,
    pub stride_frames: usize,
    #[serde(default)]
    pub pad_policy: PadPolicy,
}

impl WindowSpec {
    pub fn new(window_len_frames: usize, stride_frames: usize) -> Self {
        WindowSpec {
            window_len_frames,
            stride_frames,
            pad_policy: PadPolicy::RepeatLast,
        }
    }

    /// Stride may not exceed the window length, otherwise frames between
    /// windows would never be covered.
    pub fn validate(&self) -> Result<()> {
        if self.window_len_frames == 0 {
            return Err(Error::config("window_len_frames", "must be at least 1"));
        }
        if self.stride_frames == 0 {
            return Err(Error::config("stride_frames", "must be at least 1"));
        }
        if self.stride_frames > self.window_len_frames {
            return Err(Error::config(
                "stride_frames",
                format!(
                    "stride {} exceeds window length {}; frames would be skipped",
                    self.stride_frames, self.window_len_frames
                ),
            ));
        }
        Ok(())
    }

    /// Number of windows needed to cover `num_frames` frames.
    pub fn num_windows(&self, num_frames: usize) -> usize {
        let covered = (num_frames + self.stride_frames)
            .saturating_sub(self.window_len_frames)
            .max(self.stride_frames);
        covered.div_ceil(self.stride_frames)
    }
}

/// One window of frames cut from a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBlock {
    /// Real (unpadded) frames covered, `[start, end)`.
    pub span: (usize, usize),
    /// `window_len_frames x dim`, padded by repeating the last frame.
    pub frames: Mat,
}

/// Cuts a stream into fixed-size windows covering every frame.
pub fn partition_windows(seq: &FrameFeatureSequence, spec: &WindowSpec) -> Result<Vec<FrameBlock>> {
    spec.validate()?;
    let n = seq.num_frames();
    Ok(window_starts(n, spec)
        .map(|start| FrameBlock {
            span: (start, (start + spec.window_len_frames).min(n)),
            frames: seq.block(start, spec.window_len_frames),
        })
        .collect())
}

/// The block of `other` covering the same time span as video frames
/// `[start, start + len)` at `video_rate_hz`. Returns the real span in
/// `other`'s frames (clipped to its length) and the padded block.
pub fn time_aligned_block(
    other: &FrameFeatureSequence,
    video_rate_hz: f64,
    start: usize,
    len: usize,
) -> ((usize, usize), Mat) {
    let ratio = other.frame_rate_hz / video_rate_hz;
    let a_start = (start as f64 * ratio).round() as usize;
    let a_len = ((len as f64 * ratio).round() as usize).max(1);
    let n = other.num_frames();
    let span = (a_start.min(n), (a_start + a_len).min(n));
    (span, other.block(a_start.min(n.saturating_sub(1)), a_len))
}

pub(crate) fn window_starts(num_frames: usize, spec: &WindowSpec) -> impl Iterator<Item = usize> {
    let stride = spec.stride_frames;
    (0..spec.num_windows(num_frames)).map(move |k| k * stride)
}

/// Unit-norm window embeddings with the frame spans they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSeries {
    /// `W x d`, one unit-norm row per window.
    pub embeddings: Mat,
    pub spans: Vec<(usize, usize)>,
    pub modality: Modality,
    pub frame_rate_hz: f64,
}

impl WindowSeries {
    pub const NORM_TOLERANCE: f64 = 1e-6;

    pub fn new(
        embeddings: Mat,
        spans: Vec<(usize, usize)>,
        modality: Modality,
        frame_rate_hz: f64,
    ) -> Result<Self> {
        if embeddings.rows == 0 {
            return Err(Error::StreamTooShort("window series is empty".into()));
        }
        if spans.len() != embeddings.rows {
            return Err(Error::Shape(format!(
                "{} spans for {} embeddings",
                spans.len(),
                embeddings.rows
            )));
        }
        if spans.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(Error::Shape("window spans are not ordered by start frame".into()));
        }
        for r in 0..embeddings.rows {
            let n = crate::linalg::norm(embeddings.row(r));
            if (n - 1.0).abs() > Self::NORM_TOLERANCE {
                return Err(Error::NotUnitNorm { index: r, norm: n });
            }
        }
        Ok(WindowSeries {
            embeddings,
            spans,
            modality,
            frame_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows == 0
    }

    pub fn span_seconds(&self, w: usize) -> (f64, f64) {
        let (a, b) = self.spans[w];
        (a as f64 / self.frame_rate_hz, b as f64 / self.frame_rate_hz)
    }
}

// ---------------------------------------------------------------------------
// File format

/// Manifest shared by feature streams and landmark files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub modality: String,
    pub dim: usize,
    pub frame_rate_hz: f64,
    pub num_frames: usize,
    pub identity: String,
    pub source: String,
    pub data_file: String,
    pub byte_order: String,
}

/// Writes `manifest` next to its payload in `dir`. Returns the manifest path.
pub(crate) fn write_envelope(dir: &Path, stem: &str, manifest: &Manifest, values: &[f32]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let payload_path = dir.join(&manifest.data_file);
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&payload_path, &bytes).map_err(|e| Error::io(&payload_path, e))?;

    let manifest_path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Reads and validates a manifest and its payload.
pub(crate) fn read_envelope(manifest_path: &Path) -> Result<(Manifest, Vec<f32>)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Version {
            path: manifest_path.to_path_buf(),
            found: manifest.version,
            expected: FORMAT_VERSION,
        });
    }
    if manifest.byte_order != BYTE_ORDER {
        return Err(Error::format(
            manifest_path,
            format!("byte_order must be \"{BYTE_ORDER}\", found {:?}", manifest.byte_order),
        ));
    }
    if manifest.dim == 0 || manifest.num_frames == 0 {
        return Err(Error::format(manifest_path, "dim and num_frames must be positive"));
    }

    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let payload_path = dir.join(&manifest.data_file);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = (manifest.num_frames as u64) * (manifest.dim as u64) * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: payload_path,
            expected,
            found: bytes.len() as u64,
        });
    }

    let mut values = Vec::with_capacity(bytes.len() / 4);
    for (k, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(Error::NonFinite {
                frame: k / manifest.dim,
                column: k % manifest.dim,
                offset: (k * 4) as u64,
            });
        }
        values.push(v);
    }
    Ok((manifest, values))
}

/// Loads and validates a feature stream from its manifest.
pub fn load_stream(manifest_path: impl AsRef<Path>) -> Result<FrameFeatureSequence> {
    let path = manifest_path.as_ref();
    let (m, frames) = read_envelope(path)?;
    let modality = m
        .modality
        .parse::<Modality>()
        .map_err(|e| Error::format(path, e))?;
    FrameFeatureSequence::new(modality, m.dim, m.frame_rate_hz, frames, m.identity, m.source)
}

/// Writes `<modality>.json` and `<modality>.f32` into `dir`.
pub fn save_stream(seq: &FrameFeatureSequence, dir: impl AsRef<Path>) -> Result<PathBuf> {
    seq.validate()?;
    let stem = seq.modality.as_str();
    let manifest = Manifest {
        version: FORMAT_VERSION,
        modality: stem.to_string(),
        dim: seq.dim,
        frame_rate_hz: seq.frame_rate_hz,
        num_frames: seq.num_frames(),
        identity: seq.identity_label.clone(),
        source: seq.source_label.clone(),
        data_file: format!("{stem}.f32"),
        byte_order: BYTE_ORDER.to_string(),
    };
    write_envelope(dir.as_ref(), stem, &manifest, &seq.frames)
}

/// Identity, visual and audio streams of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamTriple {
    pub identity: FrameFeatureSequence,
    pub visual: FrameFeatureSequence,
    pub audio: FrameFeatureSequence,
}

impl StreamTriple {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        save_stream(&self.identity, dir)?;
        save_stream(&self.visual, dir)?;
        save_stream(&self.audio, dir)?;
        Ok(())
    }

    /// Loads `identity.json`, `visual.json` and `audio.json` from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let load = |m: Modality| -> Result<FrameFeatureSequence> {
            let seq = load_stream(dir.join(format!("{m}.json")))?;
            if seq.modality != m {
                return Err(Error::format(
                    dir.join(format!("{m}.json")),
                    format!("expected modality {m}, found {}", seq.modality),
                ));
            }
            Ok(seq)
        };
        Ok(StreamTriple {
            identity: load(Modality::Identity)?,
            visual: load(Modality::Visual)?,
            audio: load(Modality::Audio)?,
        })
    }
}
