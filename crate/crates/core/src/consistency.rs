//! Similarity tensors and the two contrastive consistency losses.
//!
//! Notation: `I` identities, `T` samples per identity, `d` embedding width.
//! Identity embeddings `mu[i][t]`, visual embeddings `gamma[i][t]` and audio
//! embeddings `alpha[i][t]` are unit vectors.
//!
//! Intra-modal loss, one softmax over identities `j` for every `(t, q, i)`:
//!
//! ```text
//! L_intra = -1/(I T²) Σ_t Σ_q Σ_i log( exp(<mu_i(t), mu_i(q)>/τ) / Σ_j exp(<mu_i(t), mu_j(q)>/τ) )
//! ```
//!
//! Cross-modal loss, per identity over the `T x T` matrix
//! `C_i[t][q] = <gamma_i(t), alpha_i(q)>`:
//!
//! ```text
//! L_cross = -1/(I T) Σ_i Σ_t [ log softmax_q(C_i[t][·]/τ)[t] + log softmax_q(C_i[·][t]/τ)[t] ]
//! ```
//!
//! In [`CrossLossMode::SharedDenominator`] the second term reuses the row
//! denominator `Σ_q exp(C_i[t][q]/τ)`, which makes both terms identical.
//!
//! All softmaxes subtract the running max and accumulate in `f64`. The
//! reduction order is fixed (row-major over `t, q, i`), so results are
//! reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, norm};

/// Tolerance on `| |v| - 1 |` for embeddings handed to the losses.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CrossLossMode {
    /// Video-to-audio row softmax plus audio-to-video column softmax.
    #[default]
    Symmetric,
    /// Both log terms use the video-to-audio row denominator.
    #[serde(rename = "paper_literal")]
    #[value(name = "paper_literal")]
    SharedDenominator,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config("tau", format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_unit_rows(data: &[f64], dim: usize) -> Result<()> {
    for (index, row) in data.chunks_exact(dim).enumerate() {
        let n = norm(row);
        if !((n - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
            return Err(Error::NotUnitNorm { index, norm: n });
        }
    }
    Ok(())
}

/// `I x T x d` identity embeddings; row `i * T + t` holds `mu_i(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraBatch {
    identities: usize,
    samples: usize,
    dim: usize,
    mu: Vec<f64>,
}

impl IntraBatch {
    pub fn new(identities: usize, samples: usize, dim: usize, mu: Vec<f64>) -> Result<Self> {
        let batch = Self::from_raw(identities, samples, dim, mu)?;
        check_unit_rows(&batch.mu, dim)?;
        Ok(batch)
    }

    /// Same as [`IntraBatch::new`] without the unit-norm check. The losses
    /// stay well defined off the sphere, which finite differencing needs.
    pub fn from_raw(identities: usize, samples: usize, dim: usize, mu: Vec<f64>) -> Result<Self> {
        if identities == 0 || samples == 0 || dim == 0 {
            return Err(Error::Shape("intra batch needs I, T, d >= 1".into()));
        }
        if mu.len() != identities * samples * dim {
            return Err(Error::Shape(format!(
                "intra batch {identities}x{samples}x{dim} needs {} values, got {}",
                identities * samples * dim,
                mu.len()
            )));
        }
        Ok(IntraBatch {
            identities,
            samples,
            dim,
            mu,
        })
    }

    pub fn identities(&self) -> usize {
        self.identities
    }
    pub fn samples(&self) -> usize {
        self.samples
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.mu
    }

    #[inline]
    pub fn mu(&self, i: usize, t: usize) -> &[f64] {
        let r = i * self.samples + t;
        &self.mu[r * self.dim..(r + 1) * self.dim]
    }
}

/// Paired `I x T x d` visual (`gamma`) and audio (`alpha`) embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossBatch {
    identities: usize,
    windows: usize,
    dim: usize,
    gamma: Vec<f64>,
    alpha: Vec<f64>,
}

impl CrossBatch {
    pub fn new(identities: usize, windows: usize, dim: usize, gamma: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        let batch = Self::from_raw(identities, windows, dim, gamma, alpha)?;
        check_unit_rows(&batch.gamma, dim)?;
        check_unit_rows(&batch.alpha, dim)?;
        Ok(batch)
    }

    /// Unchecked-norm constructor, see [`IntraBatch::from_raw`].
    pub fn from_raw(identities: usize, windows: usize, dim: usize, gamma: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        if identities == 0 || windows == 0 || dim == 0 {
            return Err(Error::Shape("cross batch needs I, T, d >= 1".into()));
        }
        let n = identities * windows * dim;
        if gamma.len() != n || alpha.len() != n {
            return Err(Error::Shape(format!(
                "cross batch {identities}x{windows}x{dim} needs {n} values per modality, got gamma {} / alpha {}",
                gamma.len(),
                alpha.len()
            )));
        }
        Ok(CrossBatch {
            identities,
            windows,
            dim,
            gamma,
            alpha,
        })
    }

    pub fn identities(&self) -> usize {
        self.identities
    }
    pub fn windows(&self) -> usize {
        self.windows
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn gamma_slice(&self) -> &[f64] {
        &self.gamma
    }
    pub fn alpha_slice(&self) -> &[f64] {
        &self.alpha
    }

    #[inline]
    pub fn gamma(&self, i: usize, t: usize) -> &[f64] {
        let r = i * self.windows + t;
        &self.gamma[r * self.dim..(r + 1) * self.dim]
    }

    #[inline]
    pub fn alpha(&self, i: usize, t: usize) -> &[f64] {
        let r = i * self.windows + t;
        &self.alpha[r * self.dim..(r + 1) * self.dim]
    }
}

/// Dense similarity tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum SimilarityTensor {
    /// `T x T x I x I`, entry `[t][q][i][j] = <mu_i(t), mu_j(q)>`.
    Intra {
        samples: usize,
        identities: usize,
        data: Vec<f64>,
    },
    /// `I x T x T`, entry `[i][t][q] = <gamma_i(t), alpha_i(q)>`.
    Cross {
        identities: usize,
        windows: usize,
        data: Vec<f64>,
    },
}

impl SimilarityTensor {
    pub fn data(&self) -> &[f64] {
        match self {
            SimilarityTensor::Intra { data, .. } | SimilarityTensor::Cross { data, .. } => data,
        }
    }

    /// Intra entry `S[t][q][i][j]`. Panics on a cross tensor.
    pub fn intra_at(&self, t: usize, q: usize, i: usize, j: usize) -> f64 {
        match self {
            SimilarityTensor::Intra {
                samples,
                identities,
                data,
            } => data[((t * samples + q) * identities + i) * identities + j],
            SimilarityTensor::Cross { .. } => panic!("intra_at on a cross tensor"),
        }
    }

    /// Cross entry `C[i][t][q]`. Panics on an intra tensor.
    pub fn cross_at(&self, i: usize, t: usize, q: usize) -> f64 {
        match self {
            SimilarityTensor::Cross { windows, data, .. } => data[(i * windows + t) * windows + q],
            SimilarityTensor::Intra { .. } => panic!("cross_at on an intra tensor"),
        }
    }
}

pub fn intra_similarity(batch: &IntraBatch) -> SimilarityTensor {
    let (ni, nt) = (batch.identities, batch.samples);
    let mut data = Vec::with_capacity(nt * nt * ni * ni);
    for t in 0..nt {
        for q in 0..nt {
            for i in 0..ni {
                for j in 0..ni {
                    data.push(dot(batch.mu(i, t), batch.mu(j, q)));
                }
            }
        }
    }
    SimilarityTensor::Intra {
        samples: nt,
        identities: ni,
        data,
    }
}

pub fn cross_similarity(batch: &CrossBatch) -> SimilarityTensor {
    let (ni, nt) = (batch.identities, batch.windows);
    let mut data = Vec::with_capacity(ni * nt * nt);
    for i in 0..ni {
        for t in 0..nt {
            for q in 0..nt {
                data.push(dot(batch.gamma(i, t), batch.alpha(i, q)));
            }
        }
    }
    SimilarityTensor::Cross {
        identities: ni,
        windows: nt,
        data,
    }
}

pub fn intra_loss(batch: &IntraBatch, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let sim = intra_similarity(batch);
    let (ni, nt) = (batch.identities, batch.samples);
    let mut total = 0.0;
    for t in 0..nt {
        for q in 0..nt {
            for i in 0..ni {
                let logits = (0..ni).map(|j| sim.intra_at(t, q, i, j) / tau);
                total += log_sum_exp(logits) - sim.intra_at(t, q, i, i) / tau;
            }
        }
    }
    Ok(total / (ni * nt * nt) as f64)
}

pub fn cross_loss(batch: &CrossBatch, tau: f64, mode: CrossLossMode) -> Result<f64> {
    check_tau(tau)?;
    let sim = cross_similarity(batch);
    let (ni, nt) = (batch.identities, batch.windows);
    let mut total = 0.0;
    for i in 0..ni {
        for t in 0..nt {
            let own = sim.cross_at(i, t, t) / tau;
            let row = log_sum_exp((0..nt).map(|q| sim.cross_at(i, t, q) / tau));
            let col = match mode {
                CrossLossMode::Symmetric => log_sum_exp((0..nt).map(|q| sim.cross_at(i, q, t) / tau)),
                CrossLossMode::SharedDenominator => row,
            };
            total += (row - own) + (col - own);
        }
    }
    Ok(total / (ni * nt) as f64)
}

/// Loss value and gradients w.r.t. every `mu` entry and `ln τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraGradients {
    pub loss: f64,
    /// Same layout as [`IntraBatch`].
    pub mu: Vec<f64>,
    pub log_tau: f64,
}

/// Loss value and gradients w.r.t. every `gamma`/`alpha` entry and `ln τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossGradients {
    pub loss: f64,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub log_tau: f64,
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Analytic gradients of [`intra_loss`].
///
/// With `s_ij = <mu_i(t), mu_j(q)>/τ` and `p = softmax_j(s_i·)`, each
/// `(t, q, i)` term contributes `(p_j - δ_ij)/(I T² τ)` times the partner
/// vector to both arguments of the dot product, and `-(p_j - δ_ij) s_ij` to
/// the `ln τ` gradient.
pub fn intra_loss_gradients(batch: &IntraBatch, tau: f64) -> Result<IntraGradients> {
    check_tau(tau)?;
    let (ni, nt, d) = (batch.identities, batch.samples, batch.dim);
    let scale = 1.0 / (ni * nt * nt) as f64;
    let mut grad = vec![0.0; batch.mu.len()];
    let mut grad_log_tau = 0.0;
    let mut loss = 0.0;
    let mut logits = vec![0.0; ni];
    let mut p = vec![0.0; ni];

    for t in 0..nt {
        for q in 0..nt {
            for i in 0..ni {
                let a = batch.mu(i, t);
                for (j, l) in logits.iter_mut().enumerate() {
                    *l = dot(a, batch.mu(j, q)) / tau;
                }
                loss += log_sum_exp(logits.iter().copied()) - logits[i];
                softmax_into(&logits, &mut p);
                for j in 0..ni {
                    let coeff = p[j] - if i == j { 1.0 } else { 0.0 };
                    if coeff == 0.0 {
                        continue;
                    }
                    grad_log_tau -= scale * coeff * logits[j];
                    let c = scale * coeff / tau;
                    let ra = (i * nt + t) * d;
                    let rb = (j * nt + q) * d;
                    for k in 0..d {
                        // read both before writing: ra == rb when i == j, t == q
                        let (va, vb) = (batch.mu[ra + k], batch.mu[rb + k]);
                        grad[ra + k] += c * vb;
                        grad[rb + k] += c * va;
                    }
                }
            }
        }
    }
    Ok(IntraGradients {
        loss: loss * scale,
        mu: grad,
        log_tau: grad_log_tau,
    })
}

/// Analytic gradients of [`cross_loss`].
pub fn cross_loss_gradients(batch: &CrossBatch, tau: f64, mode: CrossLossMode) -> Result<CrossGradients> {
    check_tau(tau)?;
    let (ni, nt, d) = (batch.identities, batch.windows, batch.dim);
    let scale = 1.0 / (ni * nt) as f64;
    let mut grad_gamma = vec![0.0; batch.gamma.len()];
    let mut grad_alpha = vec![0.0; batch.alpha.len()];
    let mut grad_log_tau = 0.0;
    let mut loss = 0.0;

    let mut logits = vec![0.0; nt * nt];
    // dL/d(logit[t][q]) for one identity
    let mut g = vec![0.0; nt * nt];
    let mut p = vec![0.0; nt];
    let mut column = vec![0.0; nt];

    for i in 0..ni {
        for t in 0..nt {
            for q in 0..nt {
                logits[t * nt + q] = dot(batch.gamma(i, t), batch.alpha(i, q)) / tau;
            }
        }
        g.iter_mut().for_each(|v| *v = 0.0);

        // row term: softmax over q of logits[t][q], target q = t
        let row_weight = match mode {
            CrossLossMode::Symmetric => 1.0,
            CrossLossMode::SharedDenominator => 2.0,
        };
        for t in 0..nt {
            let row = &logits[t * nt..(t + 1) * nt];
            loss += row_weight * (log_sum_exp(row.iter().copied()) - row[t]);
            softmax_into(row, &mut p);
            for q in 0..nt {
                g[t * nt + q] += row_weight * (p[q] - if q == t { 1.0 } else { 0.0 });
            }
        }
        // column term: softmax over q of logits[q][t], target q = t
        if mode == CrossLossMode::Symmetric {
            for t in 0..nt {
                for q in 0..nt {
                    column[q] = logits[q * nt + t];
                }
                loss += log_sum_exp(column.iter().copied()) - column[t];
                softmax_into(&column, &mut p);
                for q in 0..nt {
                    g[q * nt + t] += p[q] - if q == t { 1.0 } else { 0.0 };
                }
            }
        }

        for t in 0..nt {
            for q in 0..nt {
                let coeff = scale * g[t * nt + q];
                if coeff == 0.0 {
                    continue;
                }
                grad_log_tau -= coeff * logits[t * nt + q];
                let c = coeff / tau;
                let rg = (i * nt + t) * d;
                let ra = (i * nt + q) * d;
                for k in 0..d {
                    grad_gamma[rg + k] += c * batch.alpha[ra + k];
                    grad_alpha[ra + k] += c * batch.gamma[rg + k];
                }
            }
        }
    }

    Ok(CrossGradients {
        loss: loss * scale,
        gamma: grad_gamma,
        alpha: grad_alpha,
        log_tau: grad_log_tau,
    })
}
