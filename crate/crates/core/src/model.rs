//! The assembled network: input projections, interaction blocks, per-modality
//! posterior heads, uncertainty-guided fusion and the joint classifier.

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::ModalBatch;
use crate::error::{Error, Result};
use crate::interaction::{
    interaction_block, project_inputs, BlockOrder, InputProjection, InteractionOutput,
    InteractionParams,
};
use crate::objectives::{
    align_loss, cross_entropy, kl_to_standard_normal, reg_loss, ucl_loss, LossTerms, UclDenominator,
};
use crate::params::{Bindings, ParamStore};
use crate::rng;
use crate::uncertainty::{
    fuse, gaussian_head, joint_forward, FusionState, GaussianHead, GaussianPosterior, JointHead,
    JointMode, JointOutput, LogVarClamp, Modality,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_text: usize,
    pub d_image: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_expansion: usize,
    /// Width `D` of every Gaussian latent.
    pub latent_dim: usize,
    pub fusion_eps: f64,
    pub log_var_clamp: LogVarClamp,
    pub order: BlockOrder,
    /// When false both fusion weights are fixed at ½.
    pub dynamic_fusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_text: 32,
            d_image: 32,
            d_model: 32,
            heads: 4,
            layers: 1,
            ffn_expansion: 4,
            latent_dim: 32,
            fusion_eps: 1e-6,
            log_var_clamp: LogVarClamp::default(),
            order: BlockOrder::Urmf,
            dynamic_fusion: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_text", self.d_text),
            ("d_image", self.d_image),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_expansion", self.ffn_expansion),
            ("latent_dim", self.latent_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(self.fusion_eps >= 0.0 && self.fusion_eps.is_finite()) {
            return Err(Error::Config(
                "fusion_eps must be finite and non-negative".into(),
            ));
        }
        if self.log_var_clamp.min.partial_cmp(&self.log_var_clamp.max)
            != Some(std::cmp::Ordering::Less)
        {
            return Err(Error::Config(
                "log_var_min must be below log_var_max".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Urmf {
    config: ModelConfig,
    store: ParamStore,
    pub proj_t: InputProjection,
    pub proj_i: InputProjection,
    pub blocks: Vec<InteractionParams>,
    pub head_t: GaussianHead,
    pub head_i: GaussianHead,
    pub head_f: GaussianHead,
    pub joint: JointHead,
}

impl Urmf {
    /// Builds a model with Glorot-initialized weights drawn from `seed`.
    ///
    /// Parameters are created in the same order for both block orderings,
    /// so two configs differing only in `order` start from identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[0x1417]);
        let mut store = ParamStore::new();
        let (d, lat) = (config.d_model, config.latent_dim);
        let proj_t = InputProjection::new(&mut store, &mut rng, "proj_t", config.d_text, d);
        let proj_i = InputProjection::new(&mut store, &mut rng, "proj_i", config.d_image, d);
        let blocks = (0..config.layers)
            .map(|l| {
                InteractionParams::new(
                    &mut store,
                    &mut rng,
                    &format!("block{l}"),
                    d,
                    config.heads,
                    config.ffn_expansion,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head_t = GaussianHead::new(&mut store, &mut rng, Modality::Text, d, lat);
        let head_i = GaussianHead::new(&mut store, &mut rng, Modality::Image, d, lat);
        let head_f = GaussianHead::new(&mut store, &mut rng, Modality::Interaction, d, lat);
        let joint = JointHead::new(&mut store, &mut rng, lat);
        Ok(Self {
            config,
            store,
            proj_t,
            proj_i,
            blocks,
            head_t,
            head_i,
            head_f,
            joint,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Standard-normal draws consumed by one training step: the joint latent
/// sample and two independent samples for each of the text, image and
/// interaction posteriors.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub joint: Tensor,
    pub ucl: [[Tensor; 2]; 3],
}

impl StepNoise {
    /// Fresh noise keyed by `(seed, epoch, step)`.
    pub fn sample(seed: u64, epoch: u64, step: u64, batch: usize, latent: usize) -> Self {
        let mut r = rng::stream(seed, &[0x401e, epoch, step]);
        let shape = [batch, latent];
        let joint = rng::normal_tensor(&mut r, &shape);
        let mut pair = || {
            [
                rng::normal_tensor(&mut r, &shape),
                rng::normal_tensor(&mut r, &shape),
            ]
        };
        let ucl = [pair(), pair(), pair()];
        Self { joint, ucl }
    }

    pub fn zeros(batch: usize, latent: usize) -> Self {
        let z = || Tensor::zeros([batch, latent]);
        Self {
            joint: z(),
            ucl: [[z(), z()], [z(), z()], [z(), z()]],
        }
    }

    /// Records the noise on `tape` as constants.
    pub fn record(&self, tape: &mut Tape) -> NoiseVars {
        let joint = tape.constant(self.joint.clone());
        let mut pair = |p: &[Tensor; 2]| [tape.constant(p[0].clone()), tape.constant(p[1].clone())];
        let ucl = [pair(&self.ucl[0]), pair(&self.ucl[1]), pair(&self.ucl[2])];
        NoiseVars { joint, ucl }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NoiseVars {
    pub joint: Var,
    pub ucl: [[Var; 2]; 3],
}

/// Every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    /// Projected text sequence `[B×n×d]`.
    pub text_seq: Var,
    /// Projected image sequence `[B×m×d]`.
    pub image_seq: Var,
    /// Pooled projected text `[B×d]`, input of the text head.
    pub x_t: Var,
    /// Pooled projected image `[B×d]`, input of the image head.
    pub x_i: Var,
    /// Last interaction block; its pooled output is the interaction input `x_f`.
    pub interaction: InteractionOutput,
    pub post_t: GaussianPosterior,
    pub post_i: GaussianPosterior,
    pub post_f: GaussianPosterior,
    pub fusion: FusionState,
    pub joint: JointOutput,
}

/// Forward pass over raw `text[B×n×d_t]` and `image[B×m×d_i]`.
pub fn urmf_forward(
    tape: &mut Tape,
    model: &Urmf,
    binds: &Bindings,
    text: Var,
    image: Var,
    mode: JointMode,
) -> Result<ForwardTrace> {
    let cfg = &model.config;
    let (text_seq, image_seq) =
        project_inputs(tape, binds, text, image, &model.proj_t, &model.proj_i)?;
    let x_t = tape.mean_pool_rows(text_seq)?;
    let x_i = tape.mean_pool_rows(image_seq)?;
    let mut seq = text_seq;
    let mut last = None;
    for block in &model.blocks {
        let out = interaction_block(tape, binds, seq, image_seq, block, cfg.order)?;
        seq = out.output;
        last = Some(out);
    }
    let interaction = last.expect("validated layers >= 1");
    let clamp = cfg.log_var_clamp;
    let post_t = gaussian_head(tape, binds, &model.head_t, x_t, clamp)?;
    let post_i = gaussian_head(tape, binds, &model.head_i, x_i, clamp)?;
    let post_f = gaussian_head(tape, binds, &model.head_f, interaction.pooled, clamp)?;
    let fusion = fuse(tape, post_f, post_i, cfg.fusion_eps, cfg.dynamic_fusion)?;
    let joint = joint_forward(
        tape,
        binds,
        &model.joint,
        fusion.contrib_f,
        fusion.contrib_i,
        mode,
        clamp,
    )?;
    Ok(ForwardTrace {
        text_seq,
        image_seq,
        x_t,
        x_i,
        interaction,
        post_t,
        post_i,
        post_f,
        fusion,
        joint,
    })
}

/// Records `batch` as constants and runs [`urmf_forward`].
pub fn forward_batch(
    tape: &mut Tape,
    model: &Urmf,
    binds: &Bindings,
    batch: &ModalBatch,
    mode: JointMode,
) -> Result<ForwardTrace> {
    let text = tape.constant(batch.text.clone());
    let image = tape.constant(batch.image.clone());
    urmf_forward(tape, model, binds, text, image, mode)
}

/// Unweighted loss terms of a training-mode trace.
pub fn loss_terms(
    tape: &mut Tape,
    trace: &ForwardTrace,
    labels: &[usize],
    ucl_noise: [[Var; 2]; 3],
    tau: f64,
    denominator: UclDenominator,
) -> Result<LossTerms> {
    let posts = [trace.post_t, trace.post_i, trace.post_f];
    Ok(LossTerms {
        task: cross_entropy(tape, trace.joint.probs, labels)?,
        kl_ib: kl_to_standard_normal(tape, trace.joint.posterior)?,
        reg: reg_loss(tape, posts)?,
        align: align_loss(tape, trace.post_t, trace.post_i, trace.post_f)?,
        ucl: ucl_loss(tape, posts, ucl_noise, tau, denominator)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_text: 5,
            d_image: 3,
            d_model: 8,
            heads: 2,
            latent_dim: 6,
            ..ModelConfig::default()
        }
    }

    fn inputs(tape: &mut Tape, b: usize) -> (Var, Var) {
        let mut r = rng::stream(3, &[]);
        let t = tape.constant(rng::normal_tensor(&mut r, &[b, 4, 5]));
        let i = tape.constant(rng::normal_tensor(&mut r, &[b, 2, 3]));
        (t, i)
    }

    #[test]
    fn shape_contract() {
        let model = Urmf::new(tiny(), 1).unwrap();
        let mut tape = Tape::new();
        let binds = model.store().bind_frozen(&mut tape);
        let (t, i) = inputs(&mut tape, 3);
        let tr = urmf_forward(&mut tape, &model, &binds, t, i, JointMode::Infer).unwrap();
        assert_eq!(tape.shape(tr.joint.probs), &[3, 2]);
        for p in [tr.post_t, tr.post_i, tr.post_f, tr.joint.posterior] {
            assert_eq!(tape.shape(p.mu), &[3, 6]);
            assert_eq!(tape.shape(p.log_var), &[3, 6]);
        }
        for s in [
            tr.fusion.alpha_f,
            tr.fusion.alpha_i,
            tr.fusion.sigma_f_sq,
            tr.fusion.sigma_i_sq,
        ] {
            assert_eq!(tape.shape(s), &[3]);
        }
        let af = tape.value(tr.fusion.alpha_f).data().to_vec();
        let ai = tape.value(tr.fusion.alpha_i).data();
        for (a, b) in af.iter().zip(ai) {
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orderings_share_parameter_layout() {
        let a = Urmf::new(tiny(), 4).unwrap();
        let b = Urmf::new(
            ModelConfig {
                order: BlockOrder::Standard,
                ..tiny()
            },
            4,
        )
        .unwrap();
        assert_eq!(a.store().names(), b.store().names());
        assert_eq!(a.store().tensors(), b.store().tensors());
    }

    #[test]
    fn fixed_fusion_weights_without_dynamic_fusion() {
        let model = Urmf::new(
            ModelConfig {
                dynamic_fusion: false,
                ..tiny()
            },
            2,
        )
        .unwrap();
        let mut tape = Tape::new();
        let binds = model.store().bind_frozen(&mut tape);
        let (t, i) = inputs(&mut tape, 4);
        let tr = urmf_forward(&mut tape, &model, &binds, t, i, JointMode::Infer).unwrap();
        assert!(tape
            .value(tr.fusion.alpha_f)
            .data()
            .iter()
            .all(|&a| a == 0.5));
        assert!(tape
            .value(tr.fusion.alpha_i)
            .data()
            .iter()
            .all(|&a| a == 0.5));
    }

    #[test]
    fn zero_joint_noise_matches_inference() {
        let model = Urmf::new(tiny(), 5).unwrap();
        let mut tape = Tape::new();
        let binds = model.store().bind_frozen(&mut tape);
        let (t, i) = inputs(&mut tape, 2);
        let noise = tape.constant(Tensor::zeros([2, 6]));
        let a = urmf_forward(&mut tape, &model, &binds, t, i, JointMode::Train(noise)).unwrap();
        let b = urmf_forward(&mut tape, &model, &binds, t, i, JointMode::Infer).unwrap();
        assert_eq!(tape.value(a.joint.probs), tape.value(b.joint.probs));
    }

    #[test]
    fn step_noise_is_keyed() {
        let a = StepNoise::sample(1, 0, 0, 2, 3);
        assert_eq!(a, StepNoise::sample(1, 0, 0, 2, 3));
        assert_ne!(a, StepNoise::sample(1, 0, 1, 2, 3));
        assert_ne!(a.ucl[0][0], a.ucl[0][1]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_heads = ModelConfig { heads: 3, ..tiny() };
        assert!(matches!(Urmf::new(bad_heads, 0), Err(Error::Config(_))));
        let no_layers = ModelConfig {
            layers: 0,
            ..tiny()
        };
        assert!(matches!(Urmf::new(no_layers, 0), Err(Error::Config(_))));
    }
}
