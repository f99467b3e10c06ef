use crate::autodiff::{
    finite_diff_check, GradCheckOptions, GradCheckReport, OpKind, Tape, Tensor, Var,
};
use crate::error::Result;
use crate::interaction::BlockOrder;
use crate::model::{loss_terms, urmf_forward, ModelConfig, StepNoise, Urmf};
use crate::objectives::{total_loss, LossAblation, LossWeights, UclDenominator};
use crate::params::Bindings;
use crate::rng;
use crate::uncertainty::JointMode;

/// Scalar checked by [`run_gradcheck`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CheckedTerm {
    Total,
    Task,
    KlIb,
    Reg,
    Align,
    Ucl,
}

impl CheckedTerm {
    pub const ALL: [CheckedTerm; 6] = [
        CheckedTerm::Total,
        CheckedTerm::Task,
        CheckedTerm::KlIb,
        CheckedTerm::Reg,
        CheckedTerm::Align,
        CheckedTerm::Ucl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedTerm::Total => "total",
            CheckedTerm::Task => "task",
            CheckedTerm::KlIb => "kl_ib",
            CheckedTerm::Reg => "reg",
            CheckedTerm::Align => "align",
            CheckedTerm::Ucl => "ucl",
        }
    }
}

/// Settings of the tiny gradient-check model.
#[derive(Clone, Debug)]
pub struct GradCheckSetup {
    pub model: ModelConfig,
    pub n_tokens: usize,
    pub n_patches: usize,
    pub batch: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub denominator: UclDenominator,
    pub options: GradCheckOptions,
    /// Scales the backward rule of one kernel, to confirm the check can fail.
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_text: 6,
                d_image: 5,
                d_model: 8,
                heads: 2,
                layers: 1,
                ffn_expansion: 4,
                latent_dim: 8,
                order: BlockOrder::Urmf,
                ..ModelConfig::default()
            },
            n_tokens: 4,
            n_patches: 3,
            batch: 3,
            seed: 11,
            weights: LossWeights::default(),
            denominator: UclDenominator::Verbatim,
            options: GradCheckOptions::default(),
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TermCheck {
    pub term: CheckedTerm,
    pub report: GradCheckReport,
    /// Name of the parameter with the largest relative error.
    pub worst_param: String,
}

impl TermCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckSummary {
    pub checks: Vec<TermCheck>,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(TermCheck::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.report.max_rel_err())
            .fold(0.0, f64::max)
    }
}

/// Compares tape gradients with central differences for every parameter of
/// a tiny model, once per requested loss term. Inputs, labels and all
/// sampling noise are drawn once and frozen.
pub fn run_gradcheck(setup: &GradCheckSetup, terms: &[CheckedTerm]) -> Result<GradCheckSummary> {
    let model = Urmf::new(setup.model, setup.seed)?;
    let cfg = setup.model;
    let mut r = rng::stream(setup.seed, &[0x6c4e]);
    let text = rng::normal_tensor(&mut r, &[setup.batch, setup.n_tokens, cfg.d_text]);
    let image = rng::normal_tensor(&mut r, &[setup.batch, setup.n_patches, cfg.d_image]);
    let labels: Vec<usize> = (0..setup.batch).map(|k| (k + 1) % 2).collect();
    let noise = StepNoise::sample(setup.seed, 0, 0, setup.batch, cfg.latent_dim);

    let mut checks = Vec::with_capacity(terms.len());
    for &term in terms {
        let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            if let Some((kind, factor)) = setup.fault {
                tape.inject_gradient_fault(kind, factor);
            }
            let binds = Bindings::from_vars(vars.to_vec());
            let t = tape.constant(text.clone());
            let i = tape.constant(image.clone());
            let nv = noise.record(tape);
            let trace = urmf_forward(tape, &model, &binds, t, i, JointMode::Train(nv.joint))?;
            let lt = loss_terms(
                tape,
                &trace,
                &labels,
                nv.ucl,
                setup.weights.tau,
                setup.denominator,
            )?;
            Ok(match term {
                CheckedTerm::Total => {
                    total_loss(tape, lt, &setup.weights, LossAblation::default())?.0
                }
                CheckedTerm::Task => lt.task,
                CheckedTerm::KlIb => lt.kl_ib,
                CheckedTerm::Reg => lt.reg,
                CheckedTerm::Align => lt.align,
                CheckedTerm::Ucl => lt.ucl,
            })
        };
        let params: Vec<Tensor> = model.store().tensors().to_vec();
        let report = finite_diff_check(f, &params, setup.options)?;
        let worst_param = report
            .worst()
            .map(|w| model.store().names()[w.index].clone())
            .unwrap_or_default();
        log::info!(
            "gradcheck {}: max rel err {:.3e} (worst: {worst_param})",
            term.name(),
            report.max_rel_err()
        );
        checks.push(TermCheck {
            term,
            report,
            worst_param,
        });
    }
    Ok(GradCheckSummary { checks })
}
