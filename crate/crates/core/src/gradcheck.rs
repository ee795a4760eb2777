//! Central finite-difference gradient checking.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::aggregator::{aggregate_backward, aggregate_forward, ModelParams, Role};
use crate::consistency::{cross_loss, cross_loss_gradients, intra_loss, intra_loss_gradients, CrossBatch, CrossLossMode, IntraBatch};
use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::seeding::sub_rng;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// `max_k |analytic_k - numeric_k| / max(1e-12, |numeric_k|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central-difference estimate of every partial derivative of `f` at `point`.
pub fn numeric_gradient<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config("h", format!("step must be positive, got {h}")));
    }
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        let orig = x[k];
        x[k] = orig + h;
        let plus = f(&x);
        x[k] = orig - h;
        let minus = f(&x);
        x[k] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::CheckFailed(format!(
                "loss is not finite at coordinate {k} perturbed by ±{h}"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Compares `analytic` with a central-difference gradient of `f` at `point`.
pub fn finite_difference_check<F>(f: F, point: &[f64], analytic: &[f64], h: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!(
            "{} analytic partials for {} coordinates",
            analytic.len(),
            point.len()
        )));
    }
    let numeric = numeric_gradient(f, point, h)?;
    Ok(compare(analytic, &numeric))
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> FdReport {
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for (k, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs() / n.abs().max(1e-12);
        if err > report.max_rel_error || err.is_nan() {
            report = FdReport {
                max_rel_error: err,
                worst_index: k,
                analytic: *a,
                numeric: *n,
            };
        }
    }
    report
}

/// Problem sizes and tolerance for [`run_gradient_checks`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub seeds: u64,
    pub first_seed: u64,
    pub identities: usize,
    pub samples: usize,
    pub dim: usize,
    pub d_in: usize,
    pub frames: usize,
    pub tau: f64,
    pub h: f64,
    pub tolerance: f64,
    /// Test hook: corrupts one analytic partial so the check must fail.
    #[serde(skip)]
    pub inject_bug: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seeds: 10,
            first_seed: 0,
            identities: 3,
            samples: 3,
            dim: 6,
            d_in: 5,
            frames: 4,
            tau: 0.5,
            h: 1e-4,
            tolerance: 1e-4,
            inject_bug: false,
        }
    }
}

/// Worst error over all seeds for one (function, parameter group).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub check: String,
    pub group: String,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupResult>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Vec<f64> {
    let mut v = gaussian(rng, rows * dim);
    for r in v.chunks_exact_mut(dim) {
        let n = dot(r, r).sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    v
}

type Check = (String, String, FdReport);

fn check_intra(cfg: &GradCheckConfig, seed: u64) -> Result<Vec<Check>> {
    let (ni, nt, d) = (cfg.identities, cfg.samples, cfg.dim);
    let mut rng = sub_rng(seed, &[1]);
    let mu = unit_rows(&mut rng, ni * nt, d);
    let batch = IntraBatch::new(ni, nt, d, mu.clone())?;
    let mut g = intra_loss_gradients(&batch, cfg.tau)?;
    if cfg.inject_bug {
        g.mu[0] *= 1.01;
    }
    let f = |x: &[f64]| intra_loss(&IntraBatch::from_raw(ni, nt, d, x.to_vec()).expect("shape"), cfg.tau).expect("loss");
    let r_mu = finite_difference_check(f, &mu, &g.mu, cfg.h)?;
    let f_tau = |x: &[f64]| intra_loss(&batch, x[0].exp()).expect("loss");
    let r_tau = finite_difference_check(f_tau, &[cfg.tau.ln()], &[g.log_tau], cfg.h)?;
    Ok(vec![
        ("intra_loss".into(), "mu".into(), r_mu),
        ("intra_loss".into(), "log_tau".into(), r_tau),
    ])
}

fn check_cross(cfg: &GradCheckConfig, seed: u64, mode: CrossLossMode) -> Result<Vec<Check>> {
    let (ni, nt, d) = (cfg.identities, cfg.samples, cfg.dim);
    let mut rng = sub_rng(seed, &[2, mode as u64]);
    let gamma = unit_rows(&mut rng, ni * nt, d);
    let alpha = unit_rows(&mut rng, ni * nt, d);
    let batch = CrossBatch::new(ni, nt, d, gamma.clone(), alpha.clone())?;
    let g = cross_loss_gradients(&batch, cfg.tau, mode)?;
    let name = match mode {
        CrossLossMode::Symmetric => "cross_loss[symmetric]",
        CrossLossMode::SharedDenominator => "cross_loss[paper_literal]",
    };
    let loss = |gm: &[f64], al: &[f64], tau: f64| {
        cross_loss(&CrossBatch::from_raw(ni, nt, d, gm.to_vec(), al.to_vec()).expect("shape"), tau, mode).expect("loss")
    };
    let r_g = finite_difference_check(|x| loss(x, &alpha, cfg.tau), &gamma, &g.gamma, cfg.h)?;
    let r_a = finite_difference_check(|x| loss(&gamma, x, cfg.tau), &alpha, &g.alpha, cfg.h)?;
    let r_t = finite_difference_check(|x| loss(&gamma, &alpha, x[0].exp()), &[cfg.tau.ln()], &[g.log_tau], cfg.h)?;
    Ok(vec![
        (name.into(), "gamma".into(), r_g),
        (name.into(), "alpha".into(), r_a),
        (name.into(), "log_tau".into(), r_t),
    ])
}

/// Checks the aggregator through the scalar objective `<c, y>` for a fixed
/// random `c`.
fn check_aggregator(cfg: &GradCheckConfig, seed: u64) -> Result<Vec<Check>> {
    let (d_in, d_out, frames) = (cfg.d_in, cfg.dim, cfg.frames);
    let mut rng = sub_rng(seed, &[3]);
    let mut params = ModelParams::init(Role::Visual, d_in, d_out, &mut rng);
    params.bias = gaussian(&mut rng, d_out).iter().map(|b| 0.1 * b).collect();
    let window = Mat::from_vec(frames, d_in, gaussian(&mut rng, frames * d_in));
    let c = gaussian(&mut rng, d_out);
    let (_, cache) = aggregate_forward(&window, &params)?;
    let g = aggregate_backward(&cache, &params, &c)?;
    let objective = |w: &Mat, p: &ModelParams| dot(&c, &aggregate_forward(w, p).expect("forward").0);

    let r_w = finite_difference_check(
        |x| objective(&window, &ModelParams { weight: x.to_vec(), ..params.clone() }),
        &params.weight,
        &g.weight,
        cfg.h,
    )?;
    let r_b = finite_difference_check(
        |x| objective(&window, &ModelParams { bias: x.to_vec(), ..params.clone() }),
        &params.bias,
        &g.bias,
        cfg.h,
    )?;
    let r_x = finite_difference_check(
        |x| objective(&Mat::from_vec(frames, d_in, x.to_vec()), &params),
        &window.data,
        &g.window.data,
        cfg.h,
    )?;
    Ok(vec![
        ("aggregator".into(), "weight".into(), r_w),
        ("aggregator".into(), "bias".into(), r_b),
        ("aggregator".into(), "window".into(), r_x),
    ])
}

/// Finite-difference checks of both losses (both cross modes) and the
/// aggregator over `cfg.seeds` random instances.
pub fn run_gradient_checks(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.seeds == 0 || cfg.identities == 0 || cfg.samples == 0 || cfg.dim == 0 || cfg.d_in == 0 || cfg.frames == 0 {
        return Err(Error::config("check-grad", "seeds and sizes must be positive"));
    }
    let mut groups: Vec<GroupResult> = Vec::new();
    for seed in cfg.first_seed..cfg.first_seed + cfg.seeds {
        let mut checks = check_intra(cfg, seed)?;
        checks.extend(check_cross(cfg, seed, CrossLossMode::Symmetric)?);
        checks.extend(check_cross(cfg, seed, CrossLossMode::SharedDenominator)?);
        checks.extend(check_aggregator(cfg, seed)?);
        for (check, group, r) in checks {
            match groups.iter_mut().find(|g| g.check == check && g.group == group) {
                Some(g) if !(r.max_rel_error <= g.max_rel_error) => {
                    g.max_rel_error = r.max_rel_error;
                    g.worst_seed = seed;
                }
                Some(_) => {}
                None => groups.push(GroupResult {
                    check,
                    group,
                    max_rel_error: r.max_rel_error,
                    worst_seed: seed,
                    passed: true,
                }),
            }
        }
    }
    for g in &mut groups {
        g.passed = g.max_rel_error < cfg.tolerance;
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradCheckReport { groups, passed })
}
