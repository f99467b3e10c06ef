use rayon::prelude::*;

use crate::data::{corrupt, Dataset, InputModality};
use crate::error::Result;
use crate::rng;

use super::metrics::{evaluate, evaluate_batch, MetricsReport};
use super::train::{train, Adam, TrainOutcome};
use super::TrainConfig;

/// Model variants compared in the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    NoAlign,
    NoIbKl,
    NoReg,
    NoUcl,
    NoDynamicFusion,
    StandardTransformer,
    Full,
}

impl Variant {
    /// Row order of the ablation table.
    pub const TABLE_ORDER: [Variant; 7] = [
        Variant::NoAlign,
        Variant::NoIbKl,
        Variant::NoReg,
        Variant::NoUcl,
        Variant::NoDynamicFusion,
        Variant::StandardTransformer,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::NoAlign => "w/o L_align",
            Variant::NoIbKl => "w/o L_IB",
            Variant::NoReg => "w/o L_reg",
            Variant::NoUcl => "w/o L_UCL",
            Variant::NoDynamicFusion => "w/o dynamic fusion",
            Variant::StandardTransformer => "standard transformer",
            Variant::Full => "URMF",
        }
    }

    /// The config flag this variant sets, or `full`.
    pub fn key(self) -> &'static str {
        match self {
            Variant::NoAlign => "no_align",
            Variant::NoIbKl => "no_ib_kl",
            Variant::NoReg => "no_reg",
            Variant::NoUcl => "no_ucl",
            Variant::NoDynamicFusion => "no_dynamic_fusion",
            Variant::StandardTransformer => "standard_transformer",
            Variant::Full => "full",
        }
    }

    /// `config` with this variant's flag set and every other flag cleared.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = TrainConfig {
            no_align: false,
            no_ib_kl: false,
            no_reg: false,
            no_ucl: false,
            no_dynamic_fusion: false,
            standard_transformer: false,
            ..config.clone()
        };
        match self {
            Variant::NoAlign => c.no_align = true,
            Variant::NoIbKl => c.no_ib_kl = true,
            Variant::NoReg => c.no_reg = true,
            Variant::NoUcl => c.no_ucl = true,
            Variant::NoDynamicFusion => c.no_dynamic_fusion = true,
            Variant::StandardTransformer => c.standard_transformer = true,
            Variant::Full => {}
        }
        c
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn mean_some(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Trains on `train` with `config` and evaluates on `test`.
pub fn train_and_evaluate(
    config: &TrainConfig,
    train_set: &Dataset,
    test: &Dataset,
) -> Result<(TrainOutcome, MetricsReport)> {
    let outcome = train(config, train_set)?;
    let metrics = evaluate(&outcome.model, test)?;
    Ok((outcome, metrics))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// `(seed, test metrics)` per run, in seed order.
    pub runs: Vec<(u64, MetricsReport)>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

/// Trains each variant once per seed and reports test metrics per variant,
/// in `variants` order. Jobs run in parallel; results do not depend on the
/// schedule.
pub fn run_variants(
    config: &TrainConfig,
    train_set: &Dataset,
    test: &Dataset,
    seeds: &[u64],
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Result<MetricsReport>> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let cfg = TrainConfig {
                seed,
                ..variant.apply(config)
            };
            let (_, m) = train_and_evaluate(&cfg, train_set, test)?;
            log::info!(
                "{} seed {seed}: acc {:.4} f1 {:.4}",
                variant.label(),
                m.accuracy,
                m.f1
            );
            Ok(m)
        })
        .collect();
    let mut results = results.into_iter();
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let runs: Vec<(u64, MetricsReport)> = seeds
            .iter()
            .map(|&s| Ok((s, results.next().expect("one result per job")?)))
            .collect::<Result<_>>()?;
        let acc: Vec<f64> = runs.iter().map(|(_, m)| m.accuracy).collect();
        let f1: Vec<f64> = runs.iter().map(|(_, m)| m.f1).collect();
        let (acc_mean, acc_std) = mean_std(&acc);
        let (f1_mean, f1_std) = mean_std(&f1);
        rows.push(AblationRow {
            variant,
            runs,
            acc_mean,
            acc_std,
            f1_mean,
            f1_std,
        });
    }
    Ok(rows)
}

/// The seven-row ablation table. `dataset` is split into train and test with
/// `config.test_fraction`, keyed by `config.seed`.
pub fn run_ablations(
    config: &TrainConfig,
    dataset: &Dataset,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let (train_set, test) = dataset.split(config.test_fraction, config.seed)?;
    run_variants(config, &train_set, &test, seeds, &Variant::TABLE_ORDER)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionVariant {
    Dynamic,
    EqualWeight,
}

impl FusionVariant {
    pub fn key(self) -> &'static str {
        match self {
            FusionVariant::Dynamic => "dynamic",
            FusionVariant::EqualWeight => "equal_weight",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub seed: u64,
    pub level: f64,
    pub variant: FusionVariant,
    pub metrics: MetricsReport,
}

/// Seed of the test-time corruption for one `(seed, level)` cell; both
/// fusion variants see the same corrupted batch.
pub fn corruption_seed(seed: u64, level: f64) -> u64 {
    rng::derive_seed(seed, &[0x7e57, level.to_bits()])
}

/// Per seed, trains the dynamic-fusion model and its equal-weight
/// counterpart with `robust_train_corruption` of `modality` mixed into
/// training, then evaluates both on the test split corrupted at each level.
///
/// Rows are ordered by seed, then level, then variant.
pub fn run_robustness(
    config: &TrainConfig,
    dataset: &Dataset,
    modality: InputModality,
    levels: &[f64],
    seeds: &[u64],
) -> Result<Vec<RobustnessRow>> {
    let (train_set, test) = dataset.split(config.test_fraction, config.seed)?;
    let clean = test.full_batch();
    for &p in levels {
        corrupt(&clean, modality, p, 0)?;
    }
    let jobs: Vec<(u64, FusionVariant)> = seeds
        .iter()
        .flat_map(|&s| [(s, FusionVariant::Dynamic), (s, FusionVariant::EqualWeight)])
        .collect();
    let per_job: Vec<Result<Vec<RobustnessRow>>> = jobs
        .par_iter()
        .map(|&(seed, variant)| {
            let cfg = TrainConfig {
                seed,
                train_corruption: config.robust_train_corruption,
                train_corruption_modality: modality,
                no_dynamic_fusion: variant == FusionVariant::EqualWeight,
                ..config.clone()
            };
            let model = train(&cfg, &train_set)?.model;
            levels
                .iter()
                .map(|&level| {
                    let batch = corrupt(&clean, modality, level, corruption_seed(seed, level))?;
                    let metrics = evaluate_batch(&model, &batch)?;
                    log::info!(
                        "{} seed {seed} p={level}: acc {:.4}",
                        variant.key(),
                        metrics.accuracy
                    );
                    Ok(RobustnessRow {
                        seed,
                        level,
                        variant,
                        metrics,
                    })
                })
                .collect()
        })
        .collect();
    let mut by_job = Vec::with_capacity(per_job.len());
    for r in per_job {
        by_job.push(r?);
    }
    let mut rows = Vec::with_capacity(seeds.len() * levels.len() * 2);
    for pair in by_job.chunks(2) {
        for (dynamic, equal) in pair[0].iter().zip(&pair[1]) {
            rows.push(dynamic.clone());
            rows.push(equal.clone());
        }
    }
    Ok(rows)
}

/// Seed-averaged robustness results for one `(level, variant)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessSummary {
    pub level: f64,
    pub variant: FusionVariant,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub alpha_i_corrupted: Option<f64>,
    pub alpha_i_clean: Option<f64>,
    pub alpha_f_corrupted: Option<f64>,
    pub alpha_f_clean: Option<f64>,
}

pub fn summarize_robustness(rows: &[RobustnessRow]) -> Vec<RobustnessSummary> {
    let mut cells: Vec<(f64, FusionVariant)> = Vec::new();
    for r in rows {
        if !cells
            .iter()
            .any(|&(l, v)| l.to_bits() == r.level.to_bits() && v == r.variant)
        {
            cells.push((r.level, r.variant));
        }
    }
    cells
        .into_iter()
        .map(|(level, variant)| {
            let group: Vec<&RobustnessRow> = rows
                .iter()
                .filter(|r| r.level.to_bits() == level.to_bits() && r.variant == variant)
                .collect();
            let acc: Vec<f64> = group.iter().map(|r| r.metrics.accuracy).collect();
            let f1: Vec<f64> = group.iter().map(|r| r.metrics.f1).collect();
            let (acc_mean, acc_std) = mean_std(&acc);
            let (f1_mean, f1_std) = mean_std(&f1);
            RobustnessSummary {
                level,
                variant,
                acc_mean,
                acc_std,
                f1_mean,
                f1_std,
                alpha_i_corrupted: mean_some(
                    group.iter().map(|r| r.metrics.alpha.alpha_i_corrupted),
                ),
                alpha_i_clean: mean_some(group.iter().map(|r| r.metrics.alpha.alpha_i_clean)),
                alpha_f_corrupted: mean_some(
                    group.iter().map(|r| r.metrics.alpha.alpha_f_corrupted),
                ),
                alpha_f_clean: mean_some(group.iter().map(|r| r.metrics.alpha.alpha_f_clean)),
            }
        })
        .collect()
}

/// Accuracy of a single-modality logistic-regression probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn pooled_features(ds: &Dataset, modality: InputModality) -> Vec<Vec<f64>> {
    let (rows, dim) = match modality {
        InputModality::Text => (ds.n_tokens, ds.d_text),
        InputModality::Image => (ds.n_patches, ds.d_image),
    };
    ds.records
        .iter()
        .map(|r| {
            let values = match modality {
                InputModality::Text => &r.text,
                InputModality::Image => &r.image,
            };
            let mut f = vec![0.0; dim];
            for row in values.chunks(dim) {
                for (a, &v) in f.iter_mut().zip(row) {
                    *a += v as f64 / rows as f64;
                }
            }
            f
        })
        .collect()
}

/// Fits a logistic regression on the token-mean features of one modality
/// (full-batch Adam) and reports its accuracy.
pub fn unimodal_probe(
    train_set: &Dataset,
    test: &Dataset,
    modality: InputModality,
    iterations: usize,
) -> ProbeReport {
    use crate::autodiff::Tensor;

    let x = pooled_features(train_set, modality);
    let y = train_set.labels();
    let dim = x.first().map_or(0, Vec::len);
    let mut params = vec![Tensor::zeros([dim + 1])];
    let mut adam = Adam::new(&params, 0.05, 0.9, 0.999, 1e-8);
    let logit = |w: &[f64], f: &[f64]| w[dim] + f.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    for _ in 0..iterations {
        let w = params[0].data().to_vec();
        let mut g = vec![0.0; dim + 1];
        for (f, &label) in x.iter().zip(&y) {
            let p = 1.0 / (1.0 + (-logit(&w, f)).exp());
            let d = (p - label as f64) / x.len() as f64;
            for (gj, fj) in g.iter_mut().zip(f) {
                *gj += d * fj;
            }
            g[dim] += d;
        }
        adam.step(&mut params, &[&g]);
    }
    let w = params[0].data();
    let accuracy = |feats: &[Vec<f64>], labels: &[usize]| {
        let hits = feats
            .iter()
            .zip(labels)
            .filter(|(f, &l)| usize::from(logit(w, f) > 0.0) == l)
            .count();
        hits as f64 / labels.len().max(1) as f64
    };
    ProbeReport {
        train_accuracy: accuracy(&x, &y),
        test_accuracy: accuracy(&pooled_features(test, modality), &test.labels()),
    }
}
