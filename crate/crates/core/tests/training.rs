mod common;

use common::pct;

use dsamgn_core::data::{generate_dataset, Dataset, SyntheticSpec};
use dsamgn_core::harness::{ablate_beta, attention_mass_by_kind, evaluate, inspect, train, TrainConfig};
use dsamgn_core::io::Container;
use dsamgn_core::losses::LossConfig;
use dsamgn_core::model::{Model, ModelConfig};
use dsamgn_core::Error;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_identities: 6,
        samples_per_identity: 4,
        channels: 8,
        noise_patch_count: 0,
        intra_class_jitter: 0.1,
        ..SyntheticSpec::default()
    }
}

fn model_cfg(data: &Dataset) -> ModelConfig {
    let s = &data.spec;
    ModelConfig::new(s.grid_h, s.grid_w, s.channels, s.n_identities)
}

fn checkpoint_bytes(m: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    m.to_container().unwrap().write(&mut buf).unwrap();
    buf
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let data = generate_dataset(&small_spec()).unwrap();
    let tc = TrainConfig {
        epochs: 5,
        pk_p: 3,
        pk_k: 2,
        ..TrainConfig::default()
    };
    let a = train(&model_cfg(&data), &tc, &LossConfig::default(), &data, None).unwrap();
    let b = train(&model_cfg(&data), &tc, &LossConfig::default(), &data, None).unwrap();
    assert_eq!(checkpoint_bytes(&a.model), checkpoint_bytes(&b.model));
    assert_eq!(a.log, b.log);
    let ra = serde_json::to_string(&evaluate(&a.model, &data).unwrap().report()).unwrap();
    let rb = serde_json::to_string(&evaluate(&b.model, &data).unwrap().report()).unwrap();
    assert_eq!(ra, rb);

    let other = TrainConfig { seed: 1, ..tc };
    let c = train(&model_cfg(&data), &other, &LossConfig::default(), &data, None).unwrap();
    assert_ne!(checkpoint_bytes(&a.model), checkpoint_bytes(&c.model));
}

#[test]
fn checkpoint_round_trips_through_container() {
    let data = generate_dataset(&small_spec()).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        pk_p: 3,
        pk_k: 2,
        ..TrainConfig::default()
    };
    let m = train(&model_cfg(&data), &tc, &LossConfig::default(), &data, None).unwrap().model;
    let bytes = checkpoint_bytes(&m);
    let back = Model::from_container(&Container::read(&mut bytes.as_slice()).unwrap()).unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.bn, m.bn);
    assert_eq!(back.embed(&data.query.x).unwrap(), m.embed(&data.query.x).unwrap());
}

#[test]
fn loss_trends_down_on_separable_data() {
    let data = generate_dataset(&small_spec()).unwrap();
    let tc = TrainConfig {
        epochs: 25,
        pk_p: 3,
        pk_k: 2,
        warmup_iters: 10,
        ..TrainConfig::default()
    };
    let out = train(&model_cfg(&data), &tc, &LossConfig::default(), &data, None).unwrap();
    let totals: Vec<f64> = out.steps.iter().take(50).map(|s| s.total).collect();
    assert_eq!(totals.len(), 50);
    assert!(totals.iter().all(|v| v.is_finite()));
    let means: Vec<f64> = totals.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    println!("10-step means: {means:?}");
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
}

#[test]
fn zero_loss_weights_leave_parameters_unchanged() {
    let data = generate_dataset(&small_spec()).unwrap();
    let cfg = model_cfg(&data);
    let loss = LossConfig {
        loss_weight_res: 0.0,
        loss_weight_triplet: 0.0,
        loss_weight_id: 0.0,
        ..LossConfig::default()
    };
    for optimizer in ["adam", "sgd_momentum"] {
        let tc: TrainConfig = toml::from_str(&format!(
            "optimizer = \"{optimizer}\"\nepochs = 3\npk_p = 3\npk_k = 2"
        ))
        .unwrap();
        let out = train(&cfg, &tc, &loss, &data, None).unwrap();
        assert_eq!(out.model.params, Model::new(cfg.clone()).unwrap().params);
    }
}

#[test]
fn non_finite_input_aborts_with_a_dump() {
    let mut data = generate_dataset(&small_spec()).unwrap();
    for v in data.train.x.data_mut() {
        *v = f64::NAN;
    }
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        epochs: 1,
        pk_p: 3,
        pk_k: 2,
        ..TrainConfig::default()
    };
    let Err(err) = train(&model_cfg(&data), &tc, &LossConfig::default(), &data, Some(dir.path())) else {
        panic!("training on NaN input succeeded");
    };
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    let dump = Container::load(&dir.path().join("nonfinite_batch.dsc")).unwrap();
    assert!(dump.get("x").is_ok());
}

#[test]
fn full_erasure_zeroes_branch_outputs() {
    let data = generate_dataset(&small_spec()).unwrap();
    let cfg = ModelConfig {
        beta: pct(100.0),
        ..model_cfg(&data)
    };
    let tc = TrainConfig {
        epochs: 2,
        pk_p: 3,
        pk_k: 2,
        ..TrainConfig::default()
    };
    let m = train(&cfg, &tc, &LossConfig::default(), &data, None).unwrap().model;
    let dumps = inspect(&m, &data.query.x.index_outer(0).unwrap()).unwrap();
    assert_eq!(dumps.len(), 2 * cfg.n_blocks);
    for d in &dumps {
        assert_eq!(d.nonzeros(), 0);
        assert!(d.output.data().iter().all(|&v| v == 0.0));
    }
    // Every sample then embeds to the same vector.
    let e = m.embed(&data.query.x).unwrap();
    for i in 1..data.query.len() {
        assert_eq!(e.row(i), e.row(0));
    }
}

#[test]
fn single_beta_ablation_matches_plain_training() {
    let data = generate_dataset(&small_spec()).unwrap();
    let cfg = model_cfg(&data);
    let tc = TrainConfig {
        epochs: 2,
        pk_p: 3,
        pk_k: 2,
        ..TrainConfig::default()
    };
    let rows = ablate_beta(&cfg, &tc, &LossConfig::default(), &data, &[pct(0.0)], None).unwrap();
    assert_eq!(rows.len(), 1);
    let plain = ModelConfig { beta: pct(0.0), ..cfg };
    let m = train(&plain, &tc, &LossConfig::default(), &data, None).unwrap().model;
    assert_eq!(rows[0].map, evaluate(&m, &data).unwrap().map);
}

#[test]
fn inspect_counts_and_zero_percentile_identity() {
    let data = generate_dataset(&small_spec()).unwrap();
    for beta in [0.0, 85.0] {
        let cfg = ModelConfig {
            beta: pct(beta),
            ..model_cfg(&data)
        };
        let m = Model::new(cfg).unwrap();
        for d in inspect(&m, &data.gallery.x.index_outer(3).unwrap()).unwrap() {
            let n = d.s.numel();
            assert_eq!(d.nonzeros(), n - pct(beta).rank(n));
            assert_eq!(d.column_mass().len(), 16);
            if beta == 0.0 {
                assert_eq!(d.adjacency.a, d.s);
            }
        }
    }
}

#[test]
fn trained_erasure_gives_noise_patches_less_mass() {
    let spec = SyntheticSpec {
        samples_per_identity: 32,
        signal_patch_count: 4,
        noise_patch_count: 12,
        signal_scale: 2.0,
        noise_scale: 1.5,
        ..SyntheticSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let cfg = ModelConfig {
        beta: pct(95.0),
        ..model_cfg(&data)
    };
    let tc = TrainConfig {
        epochs: 400,
        base_lr: 1e-2,
        ..TrainConfig::default()
    };
    let m = train(&cfg, &tc, &LossConfig::default(), &data, None).unwrap().model;
    let (noise, signal) = attention_mass_by_kind(&m, &data.query, &data.signal_positions).unwrap();
    println!("mean column mass: noise {noise:.4}, signal {signal:.4}");
    assert!(noise < signal, "noise {noise} signal {signal}");
}
