//! Gaussian posterior heads, reparameterized sampling and variance-guided fusion.
//!
//! Each modality representation `x` is mapped to a diagonal Gaussian
//! `N(μ, diag σ²)` by two affine heads. The per-sample mean variance
//! `σ̄² = mean_d σ²_d` turns into a fusion weight through a softmax over the
//! scores `1 / (σ̄² + ε)`: the less uncertain modality gets the larger share.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::interaction::linear;
use crate::params::{xavier, Bindings, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Image,
    Interaction,
    Joint,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Image => "i",
            Modality::Interaction => "f",
            Modality::Joint => "h",
        }
    }
}

/// Bounds applied to predicted log-variances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogVarClamp {
    pub min: f64,
    pub max: f64,
}

impl Default for LogVarClamp {
    fn default() -> Self {
        Self {
            min: -10.0,
            max: 10.0,
        }
    }
}

/// Mean and (clamped) log-variance heads for one modality.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub modality: Modality,
    pub mu_w: ParamId,
    pub mu_b: ParamId,
    pub log_var_w: ParamId,
    pub log_var_b: ParamId,
}

impl GaussianHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        modality: Modality,
        d_in: usize,
        latent: usize,
    ) -> Self {
        let p = format!("head_{}", modality.tag());
        Self {
            modality,
            mu_w: store.add(format!("{p}.mu_w"), xavier(rng, d_in, latent)),
            mu_b: store.add(format!("{p}.mu_b"), Tensor::zeros([latent])),
            log_var_w: store.add(format!("{p}.log_var_w"), xavier(rng, d_in, latent)),
            log_var_b: store.add(format!("{p}.log_var_b"), Tensor::zeros([latent])),
        }
    }

    pub fn zeros(store: &mut ParamStore, modality: Modality, d_in: usize, latent: usize) -> Self {
        let p = format!("head_{}", modality.tag());
        Self {
            modality,
            mu_w: store.add(format!("{p}.mu_w"), Tensor::zeros([d_in, latent])),
            mu_b: store.add(format!("{p}.mu_b"), Tensor::zeros([latent])),
            log_var_w: store.add(format!("{p}.log_var_w"), Tensor::zeros([d_in, latent])),
            log_var_b: store.add(format!("{p}.log_var_b"), Tensor::zeros([latent])),
        }
    }
}

/// Diagonal Gaussian over a batch of latents; both fields are `[B×D]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior {
    pub mu: Var,
    pub log_var: Var,
}

impl GaussianPosterior {
    /// Records constant mean / log-variance tensors (tests, oracles).
    pub fn constant(tape: &mut Tape, mu: Tensor, log_var: Tensor) -> Self {
        Self {
            mu: tape.constant(mu),
            log_var: tape.constant(log_var),
        }
    }
}

pub fn gaussian_head(
    tape: &mut Tape,
    binds: &Bindings,
    head: &GaussianHead,
    x: Var,
    clamp: LogVarClamp,
) -> Result<GaussianPosterior> {
    let mu = linear(tape, x, binds.var(head.mu_w), Some(binds.var(head.mu_b)))?;
    let raw = linear(
        tape,
        x,
        binds.var(head.log_var_w),
        Some(binds.var(head.log_var_b)),
    )?;
    let log_var = tape.clamp(raw, clamp.min, clamp.max);
    Ok(GaussianPosterior { mu, log_var })
}

/// `z = μ + exp(½·log σ²) ∘ noise`.
pub fn sample_reparam(tape: &mut Tape, p: GaussianPosterior, noise: Var) -> Result<Var> {
    let half = tape.scale(p.log_var, 0.5);
    let std = tape.exp(half);
    let spread = tape.mul(std, noise)?;
    tape.add(p.mu, spread)
}

/// Per-sample mean variance `σ̄² = (1/D) Σ_d exp(log σ²_d)`, shape `[B]`.
pub fn scalar_uncertainty(tape: &mut Tape, p: GaussianPosterior) -> Var {
    let var = tape.exp(p.log_var);
    tape.mean_last(var)
}

/// Fusion weights for two modalities from their scalar uncertainties.
///
/// Equivalent to `a_m = exp(1/(σ̄²_m + ε))`, `α_m = a_m / Σ a`, evaluated
/// as a max-shifted softmax over the scores so it cannot overflow.
pub fn fusion_weights(sigma_f_sq: f64, sigma_i_sq: f64, eps: f64) -> (f64, f64) {
    let sf = 1.0 / (sigma_f_sq + eps);
    let si = 1.0 / (sigma_i_sq + eps);
    let m = sf.max(si);
    let (ef, ei) = ((sf - m).exp(), (si - m).exp());
    (ef / (ef + ei), ei / (ef + ei))
}

/// Batched, differentiable [`fusion_weights`]; inputs and outputs are `[B]`.
pub fn fusion_weights_var(
    tape: &mut Tape,
    sigma_f_sq: Var,
    sigma_i_sq: Var,
    eps: f64,
) -> Result<(Var, Var)> {
    let b = tape.value(sigma_f_sq).numel();
    let mut score = |s: Var| -> Result<Var> {
        let shifted = tape.add_scalar(s, eps);
        let inv = tape.reciprocal(shifted);
        tape.reshape(inv, &[b, 1])
    };
    let sf = score(sigma_f_sq)?;
    let si = score(sigma_i_sq)?;
    let scores = tape.concat_last(&[sf, si])?;
    let weights = tape.row_softmax(scores);
    let af = tape.slice_last(weights, 0, 1)?;
    let ai = tape.slice_last(weights, 1, 1)?;
    Ok((tape.reshape(af, &[b])?, tape.reshape(ai, &[b])?))
}

/// `x̂ = α ∘ μ` with one weight per sample row.
pub fn weighted_contribution(tape: &mut Tape, alpha: Var, p: GaussianPosterior) -> Result<Var> {
    tape.scale_rows(p.mu, alpha)
}

/// Scalar uncertainties, weights and weighted contributions for the
/// interaction-aware (`f`) and image (`i`) modalities.
#[derive(Clone, Copy, Debug)]
pub struct FusionState {
    pub sigma_f_sq: Var,
    pub sigma_i_sq: Var,
    pub alpha_f: Var,
    pub alpha_i: Var,
    pub contrib_f: Var,
    pub contrib_i: Var,
}

/// Computes the fusion state. With `dynamic = false` both weights are fixed at ½.
pub fn fuse(
    tape: &mut Tape,
    post_f: GaussianPosterior,
    post_i: GaussianPosterior,
    eps: f64,
    dynamic: bool,
) -> Result<FusionState> {
    let sigma_f_sq = scalar_uncertainty(tape, post_f);
    let sigma_i_sq = scalar_uncertainty(tape, post_i);
    let (alpha_f, alpha_i) = if dynamic {
        fusion_weights_var(tape, sigma_f_sq, sigma_i_sq, eps)?
    } else {
        let b = tape.value(sigma_f_sq).numel();
        let half = tape.constant(Tensor::full([b], 0.5));
        (half, half)
    };
    Ok(FusionState {
        sigma_f_sq,
        sigma_i_sq,
        alpha_f,
        alpha_i,
        contrib_f: weighted_contribution(tape, alpha_f, post_f)?,
        contrib_i: weighted_contribution(tape, alpha_i, post_i)?,
    })
}

/// Joint network `φ` (one ReLU layer `2D → D`), joint posterior heads and the
/// two-class classifier. The classifier weight is stored as `[D×2]`.
#[derive(Clone, Debug)]
pub struct JointHead {
    pub phi_w: ParamId,
    pub phi_b: ParamId,
    pub posterior: GaussianHead,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

pub const NUM_CLASSES: usize = 2;

impl JointHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, latent: usize) -> Self {
        Self {
            phi_w: store.add("joint.phi_w", xavier(rng, 2 * latent, latent)),
            phi_b: store.add("joint.phi_b", Tensor::zeros([latent])),
            posterior: GaussianHead::new(store, rng, Modality::Joint, latent, latent),
            cls_w: store.add("joint.cls_w", xavier(rng, latent, NUM_CLASSES)),
            cls_b: store.add("joint.cls_b", Tensor::zeros([NUM_CLASSES])),
        }
    }

    pub fn zeros(store: &mut ParamStore, latent: usize) -> Self {
        Self {
            phi_w: store.add("joint.phi_w", Tensor::zeros([2 * latent, latent])),
            phi_b: store.add("joint.phi_b", Tensor::zeros([latent])),
            posterior: GaussianHead::zeros(store, Modality::Joint, latent, latent),
            cls_w: store.add("joint.cls_w", Tensor::zeros([latent, NUM_CLASSES])),
            cls_b: store.add("joint.cls_b", Tensor::zeros([NUM_CLASSES])),
        }
    }
}

/// How the joint latent is read out.
#[derive(Clone, Copy, Debug)]
pub enum JointMode {
    /// Reparameterized sample with the given `[B×D]` standard-normal noise.
    Train(Var),
    /// Posterior mean, deterministic.
    Infer,
}

#[derive(Clone, Copy, Debug)]
pub struct JointOutput {
    pub h: Var,
    pub posterior: GaussianPosterior,
    pub z: Var,
    pub logits: Var,
    pub probs: Var,
}

pub fn joint_forward(
    tape: &mut Tape,
    binds: &Bindings,
    head: &JointHead,
    x_hat_f: Var,
    x_hat_i: Var,
    mode: JointMode,
    clamp: LogVarClamp,
) -> Result<JointOutput> {
    let cat = tape.concat_last(&[x_hat_f, x_hat_i])?;
    let pre = linear(
        tape,
        cat,
        binds.var(head.phi_w),
        Some(binds.var(head.phi_b)),
    )?;
    let h = tape.relu(pre);
    let posterior = gaussian_head(tape, binds, &head.posterior, h, clamp)?;
    let z = match mode {
        JointMode::Train(noise) => sample_reparam(tape, posterior, noise)?,
        JointMode::Infer => posterior.mu,
    };
    let logits = linear(tape, z, binds.var(head.cls_w), Some(binds.var(head.cls_b)))?;
    let probs = tape.row_softmax(logits);
    Ok(JointOutput {
        h,
        posterior,
        z,
        logits,
        probs,
    })
}
