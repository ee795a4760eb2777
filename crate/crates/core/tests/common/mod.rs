//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vectors(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Literal softmax cross-entropy over identities, no stabilization.
pub fn naive_intra_loss(mu: &[f64], ni: usize, nt: usize, d: usize, tau: f64) -> f64 {
    let v = |i: usize, t: usize| &mu[(i * nt + t) * d..(i * nt + t + 1) * d];
    let mut total = 0.0;
    for t in 0..nt {
        for q in 0..nt {
            for i in 0..ni {
                let mut denom = 0.0;
                for j in 0..ni {
                    denom += (inner(v(i, t), v(j, q)) / tau).exp();
                }
                let num = (inner(v(i, t), v(i, q)) / tau).exp();
                total += -(num / denom).ln();
            }
        }
    }
    total / (ni * nt * nt) as f64
}

/// Literal cross loss. `shared` uses the row denominator for both terms.
pub fn naive_cross_loss(gamma: &[f64], alpha: &[f64], ni: usize, nt: usize, d: usize, tau: f64, shared: bool) -> f64 {
    let g = |i: usize, t: usize| &gamma[(i * nt + t) * d..(i * nt + t + 1) * d];
    let a = |i: usize, t: usize| &alpha[(i * nt + t) * d..(i * nt + t + 1) * d];
    let mut total = 0.0;
    for i in 0..ni {
        for t in 0..nt {
            let num = (inner(g(i, t), a(i, t)) / tau).exp();
            let mut row = 0.0;
            let mut col = 0.0;
            for q in 0..nt {
                row += (inner(g(i, t), a(i, q)) / tau).exp();
                col += (inner(g(i, q), a(i, t)) / tau).exp();
            }
            if shared {
                col = row;
            }
            total += -(num / row).ln() - (num / col).ln();
        }
    }
    total / (ni * nt) as f64
}

/// Fraction of (real, fake) pairs where the real score is higher, ties 1/2.
pub fn brute_auc(real: &[f64], fake: &[f64]) -> f64 {
    let mut wins = 0.0;
    for r in real {
        for f in fake {
            if r > f {
                wins += 1.0;
            } else if r == f {
                wins += 0.5;
            }
        }
    }
    wins / (real.len() * fake.len()) as f64
}

/// Walks the ranking (ascending score, stable) computing precision and
/// recall after every item; AP = Σ (R_k - R_{k-1}) P_k.
pub fn brute_ap(scores: &[f64], is_fake: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // insertion sort keeps equal keys in input order
    for a in 1..idx.len() {
        let mut b = a;
        while b > 0 && scores[idx[b - 1]] > scores[idx[b]] {
            idx.swap(b - 1, b);
            b -= 1;
        }
    }
    let positives = is_fake.iter().filter(|&&f| f).count() as f64;
    let (mut tp, mut prev_recall, mut ap) = (0.0, 0.0, 0.0);
    for (k, &i) in idx.iter().enumerate() {
        if is_fake[i] {
            tp += 1.0;
        }
        let precision = tp / (k + 1) as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}
