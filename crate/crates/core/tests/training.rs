//! End-to-end training, evaluation and experiment-runner contracts on a tiny
//! configuration.

use urmf_core::autodiff::OpKind;
use urmf_core::data::{corrupt, generate_synthetic};
use urmf_core::harness::experiments::corruption_seed;
use urmf_core::harness::{
    evaluate, evaluate_batch, load_checkpoint, predict, run_ablations, run_gradcheck,
    run_robustness, save_checkpoint, train, train_and_evaluate, CheckedTerm, FusionVariant,
    GradCheckSetup, Variant,
};
use urmf_core::model::{forward_batch, ForwardTrace};
use urmf_core::uncertainty::{gaussian_head, JointMode};
use urmf_core::{Dataset, Error, InputModality, SynthSpec, Tape, Tensor, TrainConfig, Urmf};

fn tiny_spec(samples: usize) -> SynthSpec {
    SynthSpec {
        samples,
        n_tokens: 4,
        n_patches: 3,
        d_text: 8,
        d_image: 6,
        seed: 5,
        ..SynthSpec::default()
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        d_model: 8,
        d_text: 8,
        d_image: 6,
        n_tokens: 4,
        n_patches: 3,
        heads: 2,
        latent_dim: 8,
        epochs: 2,
        batch_size: 16,
        lr: 3e-3,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn tiny_data(samples: usize) -> Dataset {
    generate_synthetic(&tiny_spec(samples)).unwrap()
}

#[test]
fn short_training_reduces_the_loss() {
    let outcome = train(&tiny_config(), &tiny_data(64)).unwrap();
    assert_eq!(outcome.curve.len(), 2);
    let (first, last) = (outcome.curve[0].total, outcome.curve[1].total);
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = tiny_data(64);
    let a = train(&tiny_config(), &data).unwrap();
    let b = train(&tiny_config(), &data).unwrap();
    assert_eq!(a.curve, b.curve);
    for (x, y) in a
        .model
        .store()
        .tensors()
        .iter()
        .zip(b.model.store().tensors())
    {
        assert_eq!(x.data(), y.data());
    }
    let c = train(
        &TrainConfig {
            seed: 10,
            ..tiny_config()
        },
        &data,
    )
    .unwrap();
    assert_ne!(a.curve, c.curve);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = TrainConfig {
        lr: 0.0,
        ..tiny_config()
    };
    let outcome = train(&cfg, &tiny_data(48)).unwrap();
    let fresh = Urmf::new(cfg.model_config(), cfg.seed).unwrap();
    for (x, y) in outcome
        .model
        .store()
        .tensors()
        .iter()
        .zip(fresh.store().tensors())
    {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn non_finite_loss_aborts_with_divergence() {
    let mut data = tiny_data(48);
    // Infinite inputs turn layer norm into NaN somewhere in every batch.
    for r in &mut data.records {
        r.text[0] = f32::INFINITY;
    }
    match train(&tiny_config(), &data) {
        Err(Error::Divergence {
            epoch: 0,
            step: 0,
            last_finite: None,
        }) => {}
        other => panic!("expected divergence at the first step, got {other:?}"),
    }

    // Poisoning only the second half of the data lets some steps finish first.
    let mut data = tiny_data(64);
    for r in &mut data.records[32..] {
        r.image[0] = f32::NAN;
    }
    match train(&tiny_config(), &data) {
        Err(Error::Divergence { last_finite, .. }) => {
            if let Some(b) = last_finite {
                assert!(b.is_finite());
            }
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let cfg = tiny_config();
    let data = tiny_data(48);
    let model = train(&cfg, &data).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &cfg, &model).unwrap();
    let (cfg2, model2) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(cfg2, cfg);
    for (x, y) in model.store().tensors().iter().zip(model2.store().tensors()) {
        assert_eq!(x.data(), y.data());
    }
    let batch = data.full_batch();
    assert_eq!(
        predict(&model, &batch).unwrap(),
        predict(&model2, &batch).unwrap()
    );
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Io { .. })));
    let cfg = tiny_config();
    save_checkpoint(dir.path(), &cfg, &Urmf::new(cfg.model_config(), 1).unwrap()).unwrap();
    std::fs::write(dir.path().join("params.json"), "[]").unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(Error::Checkpoint(_))
    ));
}

fn infer_trace(cfg: &TrainConfig, data: &Dataset) -> (Tape, ForwardTrace) {
    let model = Urmf::new(cfg.model_config(), cfg.seed).unwrap();
    let mut tape = Tape::new();
    let binds = model.store().bind_frozen(&mut tape);
    let trace = forward_batch(
        &mut tape,
        &model,
        &binds,
        &data.full_batch(),
        JointMode::Infer,
    )
    .unwrap();
    (tape, trace)
}

type Pick = fn(&ForwardTrace) -> urmf_core::Var;

fn same(
    a: &(Tape, ForwardTrace),
    b: &(Tape, ForwardTrace),
    pick: impl Fn(&ForwardTrace) -> urmf_core::Var,
) -> bool {
    a.0.value(pick(&a.1)).data() == b.0.value(pick(&b.1)).data()
}

#[test]
fn ablation_flags_only_touch_their_own_computation() {
    let data = tiny_data(8);
    let base = infer_trace(&tiny_config(), &data);
    let picks: [(&str, Pick); 10] = [
        ("x_t", |t| t.x_t),
        ("x_i", |t| t.x_i),
        ("mu_t", |t| t.post_t.mu),
        ("mu_i", |t| t.post_i.mu),
        ("lv_i", |t| t.post_i.log_var),
        ("pooled", |t| t.interaction.pooled),
        ("mu_f", |t| t.post_f.mu),
        ("alpha_f", |t| t.fusion.alpha_f),
        ("h", |t| t.joint.h),
        ("probs", |t| t.joint.probs),
    ];

    // Loss-only flags leave the whole forward pass untouched.
    for v in [
        Variant::NoAlign,
        Variant::NoIbKl,
        Variant::NoReg,
        Variant::NoUcl,
    ] {
        let other = infer_trace(&v.apply(&tiny_config()), &data);
        for (name, pick) in picks {
            assert!(same(&base, &other, pick), "{v:?} changed {name}");
        }
    }

    // Equal-weight fusion changes the weights and everything after them.
    let eq = infer_trace(&Variant::NoDynamicFusion.apply(&tiny_config()), &data);
    for (name, pick) in &picks[..7] {
        assert!(same(&base, &eq, pick), "fusion flag changed {name}");
    }
    assert!(eq
        .0
        .value(eq.1.fusion.alpha_f)
        .data()
        .iter()
        .all(|&a| a == 0.5));
    assert!(!same(&base, &eq, |t| t.joint.h));

    // Block reordering changes the interaction path only.
    let std = infer_trace(&Variant::StandardTransformer.apply(&tiny_config()), &data);
    for (name, pick) in &picks[..5] {
        assert!(same(&base, &std, pick), "block order changed {name}");
    }
    assert!(!same(&base, &std, |t| t.interaction.pooled));
}

#[test]
fn modality_heads_disagree_on_identical_input_after_training() {
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    // 32 samples at batch size 16: two optimizer steps.
    let model = train(&cfg, &tiny_data(32)).unwrap().model;
    let mut tape = Tape::new();
    let binds = model.store().bind_frozen(&mut tape);
    let x = tape.constant(Tensor::full([1, cfg.d_model], 0.3));
    let clamp = model.config().log_var_clamp;
    let mut mus = Vec::new();
    for head in [&model.head_t, &model.head_i, &model.head_f] {
        let p = gaussian_head(&mut tape, &binds, head, x, clamp).unwrap();
        mus.push(tape.value(p.mu).data().to_vec());
    }
    assert_ne!(mus[0], mus[1]);
    assert_ne!(mus[1], mus[2]);
    assert_ne!(mus[0], mus[2]);
}

#[test]
fn ablation_table_structure_and_full_row_consistency() {
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    let data = tiny_data(60);
    let seeds = [3, 4];
    let rows = run_ablations(&cfg, &data, &seeds).unwrap();
    assert_eq!(rows.len(), 7);
    let order: Vec<Variant> = rows.iter().map(|r| r.variant).collect();
    assert_eq!(order, Variant::TABLE_ORDER);
    for r in &rows {
        assert_eq!(r.runs.iter().map(|(s, _)| *s).collect::<Vec<_>>(), seeds);
    }

    let (train_set, test) = data.split(cfg.test_fraction, cfg.seed).unwrap();
    let full = rows.iter().find(|r| r.variant == Variant::Full).unwrap();
    for &(seed, ref m) in &full.runs {
        let (_, plain) = train_and_evaluate(
            &TrainConfig {
                seed,
                ..cfg.clone()
            },
            &train_set,
            &test,
        )
        .unwrap();
        assert_eq!(&plain, m);
    }
}

#[test]
fn robustness_table_structure_and_clean_level() {
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    let data = tiny_data(60);
    let levels = [0.0, 0.5, 1.0];
    let seeds = [1, 2];
    let rows = run_robustness(&cfg, &data, InputModality::Image, &levels, &seeds).unwrap();
    assert_eq!(rows.len(), seeds.len() * levels.len() * 2);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r.seed, seeds[k / 6]);
        assert_eq!(r.level, levels[(k / 2) % 3]);
        let v = if k % 2 == 0 {
            FusionVariant::Dynamic
        } else {
            FusionVariant::EqualWeight
        };
        assert_eq!(r.variant, v);
    }

    // The p = 0 dynamic row is a plain evaluation of the same trained model.
    let (train_set, test) = data.split(cfg.test_fraction, cfg.seed).unwrap();
    let robust_cfg = TrainConfig {
        seed: 1,
        train_corruption: cfg.robust_train_corruption,
        train_corruption_modality: InputModality::Image,
        ..cfg.clone()
    };
    let model = train(&robust_cfg, &train_set).unwrap().model;
    let plain = evaluate(&model, &test).unwrap();
    let row = &rows[0].metrics;
    assert!((row.accuracy - plain.accuracy).abs() <= 1e-9);
    assert!((row.f1 - plain.f1).abs() <= 1e-9);
    assert!((row.alpha.alpha_i - plain.alpha.alpha_i).abs() <= 1e-9);

    // Both variants at one level see the same corrupted batch.
    let batch = corrupt(
        &test.full_batch(),
        InputModality::Image,
        0.5,
        corruption_seed(1, 0.5),
    )
    .unwrap();
    let again = evaluate_batch(&model, &batch).unwrap();
    assert_eq!(&again, &rows[2].metrics);
    assert_eq!(rows[5].metrics.alpha.alpha_i_clean, None);
}

#[test]
fn gradcheck_passes_and_fault_is_caught() {
    let summary = run_gradcheck(&GradCheckSetup::default(), &CheckedTerm::ALL).unwrap();
    assert!(summary.passed(), "max rel err {}", summary.max_rel_err());
    assert_eq!(summary.checks.len(), CheckedTerm::ALL.len());

    // A wrong backward rule in the likelihood kernel.
    let setup = GradCheckSetup {
        fault: Some((OpKind::Nll, 1.5)),
        ..GradCheckSetup::default()
    };
    let bad = run_gradcheck(&setup, &[CheckedTerm::Task]).unwrap();
    assert!(!bad.passed());
    let check = &bad.checks[0];
    let names = Urmf::new(setup.model, setup.seed)
        .unwrap()
        .store()
        .names()
        .to_vec();
    assert!(names.contains(&check.worst_param), "{}", check.worst_param);
    assert!(check.report.max_rel_err() > 0.1);
}
