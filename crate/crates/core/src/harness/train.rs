use crate::autodiff::{Tape, Tensor};
use crate::data::{batch_indices, corrupt, Dataset, ModalBatch};
use crate::error::{Error, Result};
use crate::model::{forward_batch, loss_terms, StepNoise, Urmf};
use crate::objectives::{total_loss, LossBreakdown};
use crate::rng;
use crate::uncertainty::JointMode;

use super::TrainConfig;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[&[f64]]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Urmf,
    /// Mean loss breakdown of every epoch, in order.
    pub curve: Vec<LossBreakdown>,
}

/// Forward, loss and backward for one batch; updates the parameters unless
/// the loss is non-finite. Returns the loss breakdown.
pub fn train_step(
    tape: &mut Tape,
    model: &mut Urmf,
    adam: &mut Adam,
    config: &TrainConfig,
    batch: &ModalBatch,
    noise: &StepNoise,
) -> Result<LossBreakdown> {
    tape.reset();
    let binds = model.store().bind(tape);
    let nv = noise.record(tape);
    let trace = forward_batch(tape, model, &binds, batch, JointMode::Train(nv.joint))?;
    let terms = loss_terms(
        tape,
        &trace,
        &batch.labels,
        nv.ucl,
        config.tau,
        config.ucl_denominator,
    )?;
    let (total, breakdown) =
        total_loss(tape, terms, &config.loss_weights(), config.loss_ablation())?;
    if !breakdown.is_finite() {
        return Ok(breakdown);
    }
    tape.backward(total)?;
    let grads: Vec<&[f64]> = binds
        .vars()
        .iter()
        .map(|&v| {
            tape.grad(v)
                .expect("trainable leaves always receive a gradient")
        })
        .collect();
    adam.step(model.store_mut().tensors_mut(), &grads);
    Ok(breakdown)
}

/// Trains a fresh model on `dataset`.
///
/// Every random choice is keyed by the config seed: initial weights, batch
/// order per epoch, train-time corruption and sampling noise per
/// `(epoch, step)`, so identical inputs give bitwise-identical results.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    config.check_dataset(
        dataset.n_tokens,
        dataset.n_patches,
        dataset.d_text,
        dataset.d_image,
    )?;
    let mut model = Urmf::new(config.model_config(), config.seed)?;
    let mut adam = Adam::new(
        model.store().tensors(),
        config.lr,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    let mut tape = Tape::new();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut last_finite: Option<LossBreakdown> = None;
    for epoch in 0..config.epochs {
        let order = batch_indices(
            dataset.len(),
            config.batch_size,
            rng::derive_seed(config.seed, &[0xe90c, epoch as u64]),
        );
        if order.is_empty() {
            return Err(Error::Config(format!(
                "dataset of {} samples yields no batch of at least 2",
                dataset.len()
            )));
        }
        let mut steps = Vec::with_capacity(order.len());
        for (step, idx) in order.iter().enumerate() {
            let mut batch = dataset.batch(idx);
            if config.train_corruption > 0.0 {
                let seed = rng::derive_seed(config.seed, &[0xc0bb, epoch as u64, step as u64]);
                batch = corrupt(
                    &batch,
                    config.train_corruption_modality,
                    config.train_corruption,
                    seed,
                )?;
            }
            let noise = StepNoise::sample(
                config.seed,
                epoch as u64,
                step as u64,
                batch.len(),
                config.latent_dim,
            );
            let b = train_step(&mut tape, &mut model, &mut adam, config, &batch, &noise)?;
            if !b.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    last_finite: last_finite.map(Box::new),
                });
            }
            last_finite = Some(b);
            steps.push(b);
        }
        let mean = LossBreakdown::mean(&steps);
        log::info!(
            "epoch {epoch}: total {:.6} task {:.6} kl_ib {:.6} reg {:.6} align {:.6} ucl {:.6}",
            mean.total,
            mean.task,
            mean.kl_ib,
            mean.reg,
            mean.align,
            mean.ucl
        );
        curve.push(mean);
    }
    Ok(TrainOutcome { model, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first update is lr·sign(g) up to eps.
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let mut adam = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &[&[2.0, -0.5, 0.0]]);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-7);
        assert!((d[1] + 1.9).abs() < 1e-7);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![Tensor::vector(vec![3.0, -4.0])];
        let mut adam = Adam::new(&p, 0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let g: Vec<f64> = p[0].data().iter().map(|x| 2.0 * x).collect();
            adam.step(&mut p, &[&g]);
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-2));
    }
}
