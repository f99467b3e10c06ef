use std::fmt::Write as _;
use std::path::Path;

use crate::data::InputModality;
use crate::error::{Error, Result};
use crate::interaction::BlockOrder;
use crate::kv;
use crate::model::ModelConfig;
use crate::objectives::{LossAblation, LossWeights, UclDenominator};
use crate::uncertainty::LogVarClamp;

/// Every hyperparameter of a training run. Field names double as the keys of
/// the `key = value` config file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_ib: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    pub tau: f64,
    pub fusion_eps: f64,
    pub log_var_min: f64,
    pub log_var_max: f64,

    pub d_model: usize,
    pub d_text: usize,
    pub d_image: usize,
    pub n_tokens: usize,
    pub n_patches: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_expansion: usize,
    pub latent_dim: usize,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,

    pub no_align: bool,
    pub no_ib_kl: bool,
    pub no_reg: bool,
    pub no_ucl: bool,
    pub no_dynamic_fusion: bool,
    pub standard_transformer: bool,
    pub ucl_denominator: UclDenominator,

    /// Fraction of each training batch whose `train_corruption_modality`
    /// input is replaced by noise.
    pub train_corruption: f64,
    pub train_corruption_modality: InputModality,
    /// `train_corruption` used by robustness sweeps.
    pub robust_train_corruption: f64,
    /// Held-out fraction when a single dataset is split for experiments.
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let m = ModelConfig::default();
        Self {
            lambda_ib: w.lambda_ib,
            lambda_1: w.lambda_1,
            lambda_2: w.lambda_2,
            lambda_3: w.lambda_3,
            tau: w.tau,
            fusion_eps: m.fusion_eps,
            log_var_min: m.log_var_clamp.min,
            log_var_max: m.log_var_clamp.max,
            d_model: m.d_model,
            d_text: m.d_text,
            d_image: m.d_image,
            n_tokens: 16,
            n_patches: 8,
            heads: m.heads,
            layers: m.layers,
            ffn_expansion: m.ffn_expansion,
            latent_dim: m.latent_dim,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            no_align: false,
            no_ib_kl: false,
            no_reg: false,
            no_ucl: false,
            no_dynamic_fusion: false,
            standard_transformer: false,
            ucl_denominator: UclDenominator::Verbatim,
            train_corruption: 0.0,
            train_corruption_modality: InputModality::Image,
            robust_train_corruption: 0.1,
            test_fraction: 0.2,
        }
    }
}

macro_rules! config_keys {
    ($($field:ident),* $(,)?) => {
        const KEYS: &[&str] = &[$(stringify!($field)),*];

        impl TrainConfig {
            fn fill(&mut self, map: &std::collections::BTreeMap<String, String>) -> Result<()> {
                $(kv::take(map, stringify!($field), &mut self.$field)?;)*
                Ok(())
            }

            /// Renders every field as `key = value`, one per line.
            pub fn to_kv_string(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($field), self.$field).expect("write to String");)*
                s
            }
        }
    };
}

config_keys!(
    lambda_ib,
    lambda_1,
    lambda_2,
    lambda_3,
    tau,
    fusion_eps,
    log_var_min,
    log_var_max,
    d_model,
    d_text,
    d_image,
    n_tokens,
    n_patches,
    heads,
    layers,
    ffn_expansion,
    latent_dim,
    lr,
    beta1,
    beta2,
    adam_eps,
    epochs,
    batch_size,
    seed,
    no_align,
    no_ib_kl,
    no_reg,
    no_ucl,
    no_dynamic_fusion,
    standard_transformer,
    ucl_denominator,
    train_corruption,
    train_corruption_modality,
    robust_train_corruption,
    test_fraction,
);

impl TrainConfig {
    /// Parses a config file body. Keys absent from the text keep their
    /// defaults; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let map = kv::parse(text, KEYS)?;
        let mut cfg = Self::default();
        cfg.fill(&map)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            ));
        }
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return fail("adam_eps must be positive".into());
        }
        for (name, v) in [
            ("lambda_ib", self.lambda_ib),
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
            ("lambda_3", self.lambda_3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("train_corruption", self.train_corruption),
            ("robust_train_corruption", self.robust_train_corruption),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.n_tokens == 0 || self.n_patches == 0 {
            return fail("n_tokens and n_patches must be at least 1".into());
        }
        self.model_config().validate()
    }

    /// Architecture described by this config, including the ordering and
    /// fusion ablation flags.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_text: self.d_text,
            d_image: self.d_image,
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            ffn_expansion: self.ffn_expansion,
            latent_dim: self.latent_dim,
            fusion_eps: self.fusion_eps,
            log_var_clamp: LogVarClamp {
                min: self.log_var_min,
                max: self.log_var_max,
            },
            order: if self.standard_transformer {
                BlockOrder::Standard
            } else {
                BlockOrder::Urmf
            },
            dynamic_fusion: !self.no_dynamic_fusion,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_ib: self.lambda_ib,
            lambda_1: self.lambda_1,
            lambda_2: self.lambda_2,
            lambda_3: self.lambda_3,
            tau: self.tau,
        }
    }

    pub fn loss_ablation(&self) -> LossAblation {
        LossAblation {
            no_align: self.no_align,
            no_ib_kl: self.no_ib_kl,
            no_reg: self.no_reg,
            no_ucl: self.no_ucl,
        }
    }

    /// Checks that the input dimensions agree with a dataset's.
    pub fn check_dataset(
        &self,
        n_tokens: usize,
        n_patches: usize,
        d_text: usize,
        d_image: usize,
    ) -> Result<()> {
        let cfg = (self.n_tokens, self.n_patches, self.d_text, self.d_image);
        let data = (n_tokens, n_patches, d_text, d_image);
        if cfg != data {
            return Err(Error::Config(format!(
                "config (n_tokens, n_patches, d_text, d_image) = {cfg:?} does not match the dataset's {data:?}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrips_through_text() {
        let cfg = TrainConfig {
            lr: 3.7e-3,
            tau: 0.1 + 0.2,
            no_ucl: true,
            ucl_denominator: UclDenominator::InfoNce,
            train_corruption_modality: InputModality::Text,
            seed: 42,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_kv_string()).unwrap(), cfg);
    }

    #[test]
    fn every_field_has_a_key() {
        let text = TrainConfig::default().to_kv_string();
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "lr = -1",
            "epochs = 0",
            "batch_size = 1",
            "colour = red",
            "heads = 5",
            "lr = fast",
        ] {
            assert!(
                matches!(TrainConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn flags_map_to_model_and_loss() {
        let cfg = TrainConfig::parse(
            "standard_transformer = true\nno_dynamic_fusion = true\nno_reg = true",
        )
        .unwrap();
        let m = cfg.model_config();
        assert_eq!(m.order, BlockOrder::Standard);
        assert!(!m.dynamic_fusion);
        assert!(cfg.loss_ablation().no_reg);
        assert!(!cfg.loss_ablation().no_ucl);
    }
}
