//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use urmf_core::rng::stream;
use urmf_core::{Dataset, Record};

/// Diagonal Gaussian in plain `f64` slices.
#[derive(Clone, Debug)]
pub struct Diag {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl Diag {
    pub fn standard(d: usize) -> Self {
        Self {
            mu: vec![0.0; d],
            log_var: vec![0.0; d],
        }
    }

    pub fn random(rng: &mut impl Rng, d: usize) -> Self {
        Self {
            mu: (0..d).map(|_| rng.random_range(-1.5..1.5)).collect(),
            log_var: (0..d).map(|_| rng.random_range(-1.5..1.5)).collect(),
        }
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        z.iter()
            .zip(&self.mu)
            .zip(&self.log_var)
            .map(|((z, m), lv)| -0.5 * (ln_2pi + lv + (z - m).powi(2) / lv.exp()))
            .sum()
    }
}

/// Monte Carlo estimate of `KL(p ‖ q) = E_p[log p(z) − log q(z)]`.
pub fn monte_carlo_kl(p: &Diag, q: &Diag, samples: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, &[0x3c]);
    let normals: Vec<Normal<f64>> =
        p.mu.iter()
            .zip(&p.log_var)
            .map(|(&m, &lv)| Normal::new(m, (0.5 * lv).exp()).unwrap())
            .collect();
    let mut z = vec![0.0; p.mu.len()];
    let mut acc = 0.0;
    for _ in 0..samples {
        for (zi, n) in z.iter_mut().zip(&normals) {
            *zi = n.sample(&mut rng);
        }
        acc += p.log_density(&z) - q.log_density(&z);
    }
    acc / samples as f64
}

pub fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Contrastive loss from sample sets written out term by term with cosine
/// similarity over τ. The verbatim denominator is `Σ_{j≠i} (e^{pos} + e^{s_ij})`;
/// otherwise it is the usual `e^{pos} + Σ_{j≠i} e^{s_ij}`.
pub fn ucl_reference(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    tau: f64,
    verbatim: bool,
) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let k = anchors.len();
    let mut total = 0.0;
    for i in 0..k {
        let pos = (cos(&anchors[i], &positives[i]) / tau).exp();
        let mut denom = if verbatim { 0.0 } else { pos };
        for j in (0..k).filter(|&j| j != i) {
            let neg = (cos(&anchors[i], &positives[j]) / tau).exp();
            denom += if verbatim { pos + neg } else { neg };
        }
        total += -(pos / denom).ln();
    }
    total / k as f64
}

/// Random small dataset with a sprinkling of special float values.
pub fn random_dataset(seed: u64) -> Dataset {
    let mut r = stream(seed, &[0xda7a]);
    let (n_tokens, n_patches) = (r.random_range(1..5), r.random_range(1..5));
    let (d_text, d_image) = (r.random_range(1..7), r.random_range(1..7));
    let specials = [
        f32::INFINITY,
        f32::NEG_INFINITY,
        -0.0,
        f32::MIN_POSITIVE / 8.0,
        f32::MAX,
    ];
    let value = |r: &mut rand_chacha::ChaCha8Rng| {
        if r.random_bool(0.05) {
            specials[r.random_range(0..specials.len())]
        } else {
            r.random_range(-1e3f32..1e3)
        }
    };
    let records = (0..r.random_range(0..20))
        .map(|_| Record {
            label: r.random_range(0..2),
            text: (0..n_tokens * d_text).map(|_| value(&mut r)).collect(),
            image: (0..n_patches * d_image).map(|_| value(&mut r)).collect(),
        })
        .collect();
    Dataset {
        n_tokens,
        n_patches,
        d_text,
        d_image,
        records,
    }
}

/// Raw bit patterns of every feature value.
pub fn bits(ds: &Dataset) -> Vec<u32> {
    ds.records
        .iter()
        .flat_map(|r| r.text.iter().chain(&r.image).map(|v| v.to_bits()))
        .collect()
}
