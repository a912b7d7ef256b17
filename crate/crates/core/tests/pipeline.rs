use crossfit_core::attention::CfaConfig;
use crossfit_core::autodiff::ParamStore;
use crossfit_core::checkpoint::{Checkpoint, TrainState};
use crossfit_core::config::RunConfig;
use crossfit_core::encoder::EncoderConfig;
use crossfit_core::experiment::{compare, holdout_split, run_cell, Variant};
use crossfit_core::geometry::PeMode;
use crossfit_core::model::{CrossFiTConfig, Model, Strategy};
use crossfit_core::rng::Rng;
use crossfit_core::synth::{generate_dataset, load_dataset, write_dataset, SynthConfig};
use crossfit_core::train::{evaluate, train, TrainConfig};

fn small_config() -> RunConfig {
    let model = CrossFiTConfig {
        encoder: EncoderConfig {
            stage_channels: vec![4, 8],
            stride: 2,
            kernel: 3,
            input_size: 16,
        },
        cfa: CfaConfig {
            layers: 1,
            heads: 2,
            d_t: 8,
            mlp_ratio: 2,
            threshold: 0.06,
            zero_init: false,
        },
        strategy: Strategy::CrossFit,
        pe_mode: PeMode::Aligned,
        mask: true,
        classes: 5,
    };
    let train = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    RunConfig::from_parts(&model, train)
}

fn small_data(n: usize) -> Vec<crossfit_core::synth::TwoFieldSample> {
    let cfg = SynthConfig {
        size: 16,
        ..SynthConfig::default()
    };
    generate_dataset(11, 0, n, &cfg).unwrap()
}

#[test]
fn dataset_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(12);
    write_dataset(&data, dir.path()).unwrap();
    let back = load_dataset(dir.path(), 5).unwrap();
    assert_eq!(back, data);
}

#[test]
fn trained_checkpoint_reproduces_predictions() {
    let cfg = small_config();
    let data = small_data(10);
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&cfg.model_config(), &mut store, &mut Rng::new(4)).unwrap();
    let out = train(&model, &mut store, &data, &cfg.train, |_| {}).unwrap();
    let before = evaluate(&model, &store, &data).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let state = TrainState {
        step: out.steps as u64,
        epoch: 2,
    };
    let flat = serde_json::Value::Object(cfg.to_flat());
    Checkpoint::from_store(flat, &store, out.velocities, state)
        .save(&path)
        .unwrap();

    let ck = Checkpoint::load(&path).unwrap();
    let cfg2 = RunConfig::from_flat_json(&ck.config.to_string()).unwrap();
    assert_eq!(cfg2, cfg);
    let mut fresh = ParamStore::<f32>::new();
    let model2 = Model::new(&cfg2.model_config(), &mut fresh, &mut Rng::new(99)).unwrap();
    ck.load_into(&mut fresh).unwrap();
    let after = evaluate(&model2, &fresh, &data).unwrap();
    for (a, b) in before.predictions.iter().zip(&after.predictions) {
        assert_eq!(a.logits, b.logits);
    }
    assert_eq!(ck.state.step, 6);
}

#[test]
fn cells_are_reproducible_and_ordered() {
    let cfg = small_config();
    let (tr, te) = holdout_split(small_data(15), 0.2).unwrap();
    assert_eq!(te.len(), 3);
    assert!(te.iter().all(|s| s.eye_id >= 12));
    let a = run_cell(&cfg, "x", 5, &tr, &te).unwrap();
    let b = run_cell(&cfg, "x", 5, &tr, &te).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.kappa, b.kappa);

    let variants: Vec<Variant> = ["crossfit", "feat_avg", "pred_max@mask=off"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let serial = compare(&cfg, &variants, &[1, 2], &tr, &te, 1).unwrap();
    let parallel = compare(&cfg, &variants, &[1, 2], &tr, &te, 3).unwrap();
    assert_eq!(serial.rows.len(), 3);
    assert_eq!(serial.cells.len(), 6);
    for (x, y) in serial.cells.iter().zip(&parallel.cells) {
        assert_eq!(
            (&x.variant, x.seed, &x.loss_curve),
            (&y.variant, y.seed, &y.loss_curve)
        );
    }
    let row = serial.row("feat_avg").unwrap();
    assert_eq!(row.seeds, vec![1, 2]);
    let text = serial.to_text();
    assert!(text.contains("pred_max@mask=off"));
}
