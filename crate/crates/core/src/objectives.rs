//! Training objective: information-bottleneck task loss, prior regularization,
//! image-anchored alignment and the sampled uncertainty contrastive loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::uncertainty::{sample_reparam, GaussianPosterior};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ib: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ib: 1e-3,
            lambda_1: 1e-3,
            lambda_2: 1e-5,
            lambda_3: 1e-3,
            tau: 0.5,
        }
    }
}

/// Loss terms removed for ablation. A removed term is still computed and
/// reported but enters the total with weight zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossAblation {
    pub no_align: bool,
    pub no_ib_kl: bool,
    pub no_reg: bool,
    pub no_ucl: bool,
}

/// Denominator of the contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UclDenominator {
    /// `Σ_{k'≠k} (e^{pos} + e^{neg_k'})`: the positive term is counted `K−1` times.
    #[default]
    Verbatim,
    /// `e^{pos} + Σ_{k'≠k} e^{neg_k'}`: standard InfoNCE.
    InfoNce,
}

impl UclDenominator {
    fn diag_weight(self, k: usize) -> f64 {
        match self {
            UclDenominator::Verbatim => (k - 1) as f64,
            UclDenominator::InfoNce => 1.0,
        }
    }
}

impl std::str::FromStr for UclDenominator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "verbatim" => Ok(Self::Verbatim),
            "infonce" => Ok(Self::InfoNce),
            other => Err(format!("unknown ucl denominator {other:?}")),
        }
    }
}

impl std::fmt::Display for UclDenominator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Verbatim => "verbatim",
            Self::InfoNce => "infonce",
        })
    }
}

/// Scalar values of every loss term for one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub kl_ib: f64,
    pub reg: f64,
    pub align: f64,
    pub ucl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.task, self.kl_ib, self.reg, self.align, self.ucl, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Componentwise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.task += b.task / n;
            m.kl_ib += b.kl_ib / n;
            m.reg += b.reg / n;
            m.align += b.align / n;
            m.ucl += b.ucl / n;
            m.total += b.total / n;
        }
        m
    }
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    tape.nll(probs, labels, PROB_FLOOR)
}

fn batch_size(tape: &Tape, v: Var) -> usize {
    tape.shape(v).first().copied().unwrap_or(1).max(1)
}

/// `KL(p ‖ N(0, I))`, summed over latent dims and averaged over the batch.
pub fn kl_to_standard_normal(tape: &mut Tape, p: GaussianPosterior) -> Result<Var> {
    let b = batch_size(tape, p.mu);
    let mu_sq = tape.mul(p.mu, p.mu)?;
    let var = tape.exp(p.log_var);
    let t = tape.add(mu_sq, var)?;
    let t = tape.sub(t, p.log_var)?;
    let t = tape.add_scalar(t, -1.0);
    let s = tape.sum(t);
    Ok(tape.scale(s, 0.5 / b as f64))
}

/// `KL(p ‖ q)` between diagonal Gaussians, summed over latent dims and
/// averaged over the batch. Gradients flow into both arguments.
pub fn kl_gaussians(tape: &mut Tape, p: GaussianPosterior, q: GaussianPosterior) -> Result<Var> {
    let b = batch_size(tape, p.mu);
    let log_ratio = tape.sub(q.log_var, p.log_var)?;
    let diff = tape.sub(p.mu, q.mu)?;
    let diff_sq = tape.mul(diff, diff)?;
    let var_p = tape.exp(p.log_var);
    let num = tape.add(var_p, diff_sq)?;
    let neg_lv_q = tape.neg(q.log_var);
    let inv_var_q = tape.exp(neg_lv_q);
    let ratio = tape.mul(num, inv_var_q)?;
    let t = tape.add(log_ratio, ratio)?;
    let t = tape.add_scalar(t, -1.0);
    let s = tape.sum(t);
    Ok(tape.scale(s, 0.5 / b as f64))
}

/// `task + λ_IB · KL(p_h ‖ N(0, I))`.
pub fn ib_loss(
    tape: &mut Tape,
    task: Var,
    posterior_h: GaussianPosterior,
    lambda_ib: f64,
) -> Result<Var> {
    let kl = kl_to_standard_normal(tape, posterior_h)?;
    let weighted = tape.scale(kl, lambda_ib);
    tape.add(task, weighted)
}

/// Sum of the prior KLs of the text, image and interaction posteriors.
pub fn reg_loss(tape: &mut Tape, posteriors: [GaussianPosterior; 3]) -> Result<Var> {
    let [t, i, f] = posteriors;
    let kt = kl_to_standard_normal(tape, t)?;
    let ki = kl_to_standard_normal(tape, i)?;
    let kf = kl_to_standard_normal(tape, f)?;
    let s = tape.add(kt, ki)?;
    tape.add(s, kf)
}

/// `KL(p_t ‖ p_i) + KL(p_f ‖ p_i)`: the image posterior is the anchor.
pub fn align_loss(
    tape: &mut Tape,
    text: GaussianPosterior,
    image: GaussianPosterior,
    interaction: GaussianPosterior,
) -> Result<Var> {
    let a = kl_gaussians(tape, text, image)?;
    let b = kl_gaussians(tape, interaction, image)?;
    tape.add(a, b)
}

/// Contrastive loss of one modality from two sample sets `[K×D]`, using
/// cosine similarity scaled by `1/τ`; averaged over anchors.
pub fn ucl_from_samples(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    tau: f64,
    denominator: UclDenominator,
) -> Result<Var> {
    let k = batch_size(tape, anchors);
    let a = tape.normalize_rows(anchors);
    let p = tape.normalize_rows(positives);
    let sim = tape.matmul_transposed(a, p)?;
    let sim = tape.scale(sim, 1.0 / tau);
    tape.contrastive_nll(sim, denominator.diag_weight(k))
}

/// Uncertainty-driven contrastive loss summed over the text, image and
/// interaction posteriors. `noise[m]` holds the two standard-normal draws
/// `(ε̃, ε)` for modality `m`, each `[K×D]`.
pub fn ucl_loss(
    tape: &mut Tape,
    posteriors: [GaussianPosterior; 3],
    noise: [[Var; 2]; 3],
    tau: f64,
    denominator: UclDenominator,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (p, [n1, n2]) in posteriors.into_iter().zip(noise) {
        let z_tilde = sample_reparam(tape, p, n1)?;
        let z = sample_reparam(tape, p, n2)?;
        let l = ucl_from_samples(tape, z_tilde, z, tau, denominator)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(total.expect("three modalities"))
}

/// Unweighted loss terms as tape scalars.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub task: Var,
    pub kl_ib: Var,
    pub reg: Var,
    pub align: Var,
    pub ucl: Var,
}

/// `task + λ_IB·kl_ib + λ1·reg + λ2·align + λ3·ucl`, with ablated terms
/// weighted by zero.
pub fn total_loss(
    tape: &mut Tape,
    terms: LossTerms,
    weights: &LossWeights,
    ablation: LossAblation,
) -> Result<(Var, LossBreakdown)> {
    let w = |off: bool, lambda: f64| if off { 0.0 } else { lambda };
    let parts = [
        (terms.kl_ib, w(ablation.no_ib_kl, weights.lambda_ib)),
        (terms.reg, w(ablation.no_reg, weights.lambda_1)),
        (terms.align, w(ablation.no_align, weights.lambda_2)),
        (terms.ucl, w(ablation.no_ucl, weights.lambda_3)),
    ];
    let mut total = terms.task;
    for (term, weight) in parts {
        let scaled = tape.scale(term, weight);
        total = tape.add(total, scaled)?;
    }
    let breakdown = LossBreakdown {
        task: tape.item(terms.task),
        kl_ib: tape.item(terms.kl_ib),
        reg: tape.item(terms.reg),
        align: tape.item(terms.align),
        ucl: tape.item(terms.ucl),
        total: tape.item(total),
    };
    Ok((total, breakdown))
}
