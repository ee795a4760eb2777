//! Temporal aggregator: a window of per-frame features becomes one unit-norm
//! embedding via mean pooling, an affine map and L2 normalization.
//!
//! ```text
//! m = mean_f window[f]          (d_in)
//! z = m · W + b                 (d_out)
//! y = z / |z|
//! ```
//!
//! The backward pass pushes an upstream gradient through the normalization
//! Jacobian `(I - y yᵀ) / |z|`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};

/// Pre-normalization norms below this are rejected.
pub const MIN_PRE_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Identity,
    Visual,
    Audio,
}

/// Weights of one aggregator. `weight` is `d_in x d_out`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub role: Role,
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(role: Role, d_in: usize, d_out: usize) -> Self {
        ModelParams {
            role,
            d_in,
            d_out,
            weight: vec![0.0; d_in * d_out],
            bias: vec![0.0; d_out],
        }
    }

    /// Fan-in uniform init in `[-1/sqrt(d_in), 1/sqrt(d_in)]`, zero bias.
    pub fn init<R: Rng + ?Sized>(role: Role, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = (0..d_in * d_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        ModelParams {
            role,
            d_in,
            d_out,
            weight,
            bias: vec![0.0; d_out],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for v in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            *v = f64::from(*v as f32);
        }
    }

    fn pre_activation(&self, mean_input: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (k, &x) in mean_input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.weight[k * self.d_out..(k + 1) * self.d_out];
            for (zl, w) in z.iter_mut().zip(row) {
                *zl += x * w;
            }
        }
        z
    }
}

/// Values saved by [`aggregate_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub frames: usize,
    pub d_in: usize,
    pub mean_input: Vec<f64>,
    pub pre_norm: f64,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorGrads {
    /// `frames x d_in`
    pub window: Mat,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Embeds a `frames x d_in` window.
pub fn aggregate_forward(window: &Mat, params: &ModelParams) -> Result<(Vec<f64>, ForwardCache)> {
    if window.rows == 0 {
        return Err(Error::Shape("window has no frames".into()));
    }
    if window.cols != params.d_in {
        return Err(Error::Shape(format!(
            "window has {} features, aggregator expects {}",
            window.cols, params.d_in
        )));
    }
    let mean_input = window.column_mean();
    embed_mean(mean_input, window.rows, params)
}

/// Forward pass from an already pooled input.
pub(crate) fn embed_mean(
    mean_input: Vec<f64>,
    frames: usize,
    params: &ModelParams,
) -> Result<(Vec<f64>, ForwardCache)> {
    let z = params.pre_activation(&mean_input);
    let pre_norm = dot(&z, &z).sqrt();
    if !(pre_norm >= MIN_PRE_NORM) {
        return Err(Error::DegenerateEmbedding {
            norm: pre_norm,
            span: None,
        });
    }
    let output: Vec<f64> = z.iter().map(|v| v / pre_norm).collect();
    let cache = ForwardCache {
        frames,
        d_in: params.d_in,
        mean_input,
        pre_norm,
        output: output.clone(),
    };
    Ok((output, cache))
}

fn check_cache(cache: &ForwardCache, params: &ModelParams, grad_out: &[f64]) -> Result<()> {
    if cache.d_in != params.d_in
        || cache.mean_input.len() != params.d_in
        || cache.output.len() != params.d_out
        || grad_out.len() != params.d_out
    {
        return Err(Error::Shape(format!(
            "cache (d_in {}, d_out {}) / grad ({}) do not match aggregator {}x{}",
            cache.d_in,
            cache.output.len(),
            grad_out.len(),
            params.d_in,
            params.d_out
        )));
    }
    Ok(())
}

/// Gradient w.r.t. the pre-normalization vector: `(g - y <y, g>) / |z|`.
pub fn normalization_backward(cache: &ForwardCache, grad_out: &[f64]) -> Vec<f64> {
    let y = &cache.output;
    let proj = dot(y, grad_out);
    y.iter()
        .zip(grad_out)
        .map(|(yi, gi)| (gi - yi * proj) / cache.pre_norm)
        .collect()
}

/// Full backward pass: gradients w.r.t. the input window, weight and bias.
pub fn aggregate_backward(
    cache: &ForwardCache,
    params: &ModelParams,
    grad_out: &[f64],
) -> Result<AggregatorGrads> {
    check_cache(cache, params, grad_out)?;
    let grad_z = normalization_backward(cache, grad_out);

    let mut weight = vec![0.0; params.d_in * params.d_out];
    let mut grad_mean = vec![0.0; params.d_in];
    for k in 0..params.d_in {
        let row = &params.weight[k * params.d_out..(k + 1) * params.d_out];
        grad_mean[k] = dot(row, &grad_z);
        let x = cache.mean_input[k];
        for (w, g) in weight[k * params.d_out..(k + 1) * params.d_out].iter_mut().zip(&grad_z) {
            *w = x * g;
        }
    }

    let inv_frames = 1.0 / cache.frames as f64;
    let mut window = Mat::zeros(cache.frames, params.d_in);
    for f in 0..cache.frames {
        for (dst, g) in window.row_mut(f).iter_mut().zip(&grad_mean) {
            *dst = g * inv_frames;
        }
    }
    Ok(AggregatorGrads {
        window,
        weight,
        bias: grad_z,
    })
}

/// Accumulates parameter gradients only (no input gradient) into `acc`.
pub(crate) fn accumulate_param_grads(
    cache: &ForwardCache,
    params: &ModelParams,
    grad_out: &[f64],
    acc: &mut ModelParams,
) -> Result<()> {
    check_cache(cache, params, grad_out)?;
    let grad_z = normalization_backward(cache, grad_out);
    for (b, g) in acc.bias.iter_mut().zip(&grad_z) {
        *b += g;
    }
    for (k, &x) in cache.mean_input.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (w, g) in acc.weight[k * params.d_out..(k + 1) * params.d_out]
            .iter_mut()
            .zip(&grad_z)
        {
            *w += x * g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_params(d: usize) -> ModelParams {
        let mut p = ModelParams::zeros(Role::Identity, d, d);
        for k in 0..d {
            p.weight[k * d + k] = 1.0;
        }
        p
    }

    #[test]
    fn symmetric_window_maps_to_diagonal() {
        let window = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (y, _) = aggregate_forward(&window, &identity_params(2)).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((y[0] - h).abs() < 1e-12 && (y[1] - h).abs() < 1e-12);
    }

    #[test]
    fn zero_params_are_degenerate() {
        let window = Mat::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let err = aggregate_forward(&window, &ModelParams::zeros(Role::Audio, 3, 4)).unwrap_err();
        assert!(matches!(err, Error::DegenerateEmbedding { .. }));
    }

    #[test]
    fn wrong_width_is_a_shape_error() {
        let window = Mat::from_rows(&[vec![1.0, 2.0, 3.0]]);
        assert!(matches!(
            aggregate_forward(&window, &identity_params(2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn output_is_unit_norm_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let window = Mat::from_vec(5, 16, (0..80).map(|_| rng.random_range(-1.0..1.0)).collect());
            let mut p = ModelParams::init(Role::Visual, 16, 8, &mut rng);
            p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            let (y, _) = aggregate_forward(&window, &p).unwrap();
            assert!((norm(&y) - 1.0).abs() < 1e-9);

            let mut scaled = p.clone();
            scaled.weight.iter_mut().chain(scaled.bias.iter_mut()).for_each(|v| *v *= 3.7);
            let (y2, _) = aggregate_forward(&window, &scaled).unwrap();
            for (a, b) in y.iter().zip(&y2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalization_gradient_is_orthogonal_to_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let window = Mat::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let p = ModelParams::init(Role::Identity, 4, 6, &mut rng);
        let (y, cache) = aggregate_forward(&window, &p).unwrap();
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let jv = normalization_backward(&cache, &v);
        assert!(dot(&y, &jv).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let window = Mat::from_vec(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let p = ModelParams::init(Role::Identity, 4, 3, &mut rng);
        let (_, cache) = aggregate_forward(&window, &p).unwrap();
        let g = aggregate_backward(&cache, &p, &[0.0; 3]).unwrap();
        assert!(g.window.data.iter().chain(&g.weight).chain(&g.bias).all(|v| *v == 0.0));
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let window = Mat::from_vec(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let p = ModelParams::init(Role::Identity, 4, 3, &mut rng);
        let other = ModelParams::init(Role::Identity, 4, 5, &mut rng);
        let (_, cache) = aggregate_forward(&window, &p).unwrap();
        assert!(aggregate_backward(&cache, &other, &[0.0; 5]).is_err());
    }

    #[test]
    fn param_accumulation_matches_full_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let window = Mat::from_vec(4, 6, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
        let p = ModelParams::init(Role::Audio, 6, 5, &mut rng);
        let (_, cache) = aggregate_forward(&window, &p).unwrap();
        let g: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let full = aggregate_backward(&cache, &p, &g).unwrap();
        let mut acc = ModelParams::zeros(Role::Audio, 6, 5);
        accumulate_param_grads(&cache, &p, &g, &mut acc).unwrap();
        assert_eq!(acc.weight, full.weight);
        assert_eq!(acc.bias, full.bias);
    }
}
