use super::*;
use crate::dataio::{generate_dataset, ClassMap, Dataset, DatasetConfig, SynthConfig};

fn small_data(seed: u64) -> Dataset {
    generate_dataset(&DatasetConfig {
        n_train: 10,
        n_test: 4,
        seed,
        synth: SynthConfig {
            height: 16,
            width: 16,
            blur_sigma: 1.5,
            ..SynthConfig::default()
        },
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn small_config(mode: Mode, iterations: usize) -> RunConfig {
    let mut cfg = RunConfig {
        mode,
        iterations,
        batch_size: 4,
        seed: 3,
        model: ModelConfig {
            hidden: 4,
            feature_dim: 4,
            ..ModelConfig::default()
        },
        partition: PartitionConfig {
            patch_h: 8,
            patch_w: 8,
            ..PartitionConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.confidence.max_pixels = Some(16);
    cfg.adam.lr = 1e-2;
    cfg
}

fn trained(cfg: RunConfig, data: &Dataset) -> TrainState {
    let mut st = TrainState::new(cfg, &data.train).unwrap();
    run(&mut st, &data.test, None, &mut |_| {}).unwrap();
    st
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = small_config(Mode::Baseline, 7);
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
    let partial: RunConfig = serde_json::from_str(r#"{"iterations": 3, "adam": {"lr": 0.01}}"#).unwrap();
    assert_eq!(partial.iterations, 3);
    assert_eq!(partial.batch_size, 24);
    assert_eq!(partial.adam.beta2, 0.999);
    assert!(serde_json::from_str::<RunConfig>(r#"{"iteratons": 3}"#).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let data = small_data(0);
    let mut bad = Vec::new();
    let base = small_config(Mode::Dale, 1);
    bad.push(RunConfig { iterations: 0, ..base.clone() });
    bad.push(RunConfig { batch_size: 0, ..base.clone() });
    let mut c = base.clone();
    c.partition.tau = 0.0;
    bad.push(c);
    let mut c = base.clone();
    c.confidence.omega_init = 3.0;
    bad.push(c);
    let mut c = base.clone();
    c.adam.lr = -1.0;
    bad.push(c);
    let mut c = base.clone();
    c.confidence.rounds = 0;
    bad.push(c);
    for cfg in bad {
        assert!(matches!(TrainState::new(cfg, &data.train), Err(TrainError::Config(_))));
    }
    assert!(matches!(TrainState::new(base, &[]), Err(TrainError::EmptySplit)));
}

#[test]
fn both_arms_take_the_same_number_of_steps() {
    let data = small_data(1);
    let dale = trained(small_config(Mode::Dale, 2), &data);
    let base = trained(small_config(Mode::Baseline, 2), &data);
    let expected = 2 * dale.config.steps_per_iteration(data.train.len());
    assert_eq!(expected, 2 * 2 * 3);
    assert_eq!(dale.steps, expected);
    assert_eq!(base.steps, expected);
    assert_eq!(dale.adam.step, base.adam.step);
}

#[test]
fn phases_chain_through_parameter_checksums() {
    let data = small_data(2);
    let st = trained(small_config(Mode::Dale, 3), &data);
    let mut prev_out: Option<u64> = None;
    for t in 1..=3 {
        let row = |phase: &str| st.history.iter().find(|r| r.t == t && r.phase == phase).unwrap();
        let (n, f) = (row("nonfuzzy"), row("fuzzy"));
        if let Some(p) = prev_out {
            assert_eq!(n.checksum_in, Some(p));
        }
        assert_eq!(f.checksum_in, n.checksum_out);
        assert_ne!(n.checksum_in, n.checksum_out);
        prev_out = f.checksum_out;
    }
    assert_eq!(prev_out, Some(st.params.checksum()));
    let first = st.history.iter().find(|r| r.phase == "nonfuzzy").unwrap();
    let init = ModelParams::init(Rng::new(3).fork(STREAM_INIT).state(), &st.config.model).unwrap();
    assert_eq!(first.checksum_in, Some(init.checksum()));
}

#[test]
fn identical_seeds_give_identical_tables() {
    let data = small_data(3);
    for mode in [Mode::Dale, Mode::Baseline] {
        let a = trained(small_config(mode, 2), &data);
        let b = trained(small_config(mode, 2), &data);
        assert_eq!(output::metrics_csv(&a.history), output::metrics_csv(&b.history));
        let mut other = small_config(mode, 2);
        other.seed = 4;
        let c = trained(other, &data);
        assert_ne!(a.params.checksum(), c.params.checksum());
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = small_data(4);
    let full = trained(small_config(Mode::Dale, 3), &data);

    let mut cfg = small_config(Mode::Dale, 3);
    cfg.iterations = 2;
    let half = trained(cfg, &data);
    let bytes = half.to_checkpoint().unwrap().encode().unwrap();
    let mut resumed = TrainState::from_checkpoint(&Checkpoint::decode(&bytes).unwrap(), &data.train).unwrap();
    assert_eq!(resumed.maps, half.maps);
    resumed.config.iterations = 3;
    run(&mut resumed, &data.test, None, &mut |_| {}).unwrap();

    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.adam, full.adam);
    assert_eq!(resumed.maps, full.maps);
    assert_eq!(output::metrics_csv(&resumed.history), output::metrics_csv(&full.history));
}

#[test]
fn checkpoint_from_other_data_is_refused() {
    let data = small_data(5);
    let st = trained(small_config(Mode::Dale, 1), &data);
    let ck = st.to_checkpoint().unwrap();
    assert!(matches!(
        TrainState::from_checkpoint(&ck, &data.train[..5]),
        Err(TrainError::Resume(_))
    ));
}

fn threshold_model(lesion_bias: f64, slope: f64) -> ModelParams {
    // first feature = relu(relu(x)) = x, second feature 0; lesion logit =
    // slope·x + lesion_bias
    let cfg = ModelConfig {
        hidden: 1,
        feature_dim: 2,
        ..ModelConfig::default()
    };
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let mut k2 = vec![0.0; 18];
    k2[4] = 1.0;
    let tensors = vec![
        Tensor::new(vec![1, 1, 3, 3], k).unwrap(),
        Tensor::zeros(&[1]),
        Tensor::new(vec![2, 1, 3, 3], k2).unwrap(),
        Tensor::zeros(&[2]),
        Tensor::new(vec![2, 2, 1, 1], vec![0.0, 0.0, slope, 0.0]).unwrap(),
        Tensor::new(vec![2], vec![0.0, lesion_bias]).unwrap(),
    ];
    ModelParams::from_tensors(&cfg, tensors).unwrap()
}

fn crisp_samples() -> Vec<Sample> {
    generate_dataset(&DatasetConfig {
        n_train: 6,
        n_test: 0,
        seed: 9,
        synth: SynthConfig {
            height: 16,
            width: 16,
            blur_sigma: 0.0,
            ..SynthConfig::default()
        },
        ..DatasetConfig::default()
    })
    .unwrap()
    .train
}

#[test]
fn evaluation_fixtures() {
    let samples = crisp_samples();
    let perfect = evaluate(&threshold_model(-5.0, 10.0), &samples).unwrap();
    assert_eq!(perfect.clean.dice, 1.0);
    assert_eq!(perfect.clean.miou, 1.0);
    assert_eq!(perfect.clean.hd95, 0.0);
    assert_eq!(perfect.clean.asd, 0.0);
    assert!(perfect.noisy_dice < 1.0);

    let background = evaluate(&threshold_model(-5.0, 0.0), &samples).unwrap();
    assert_eq!(background.clean.dice, 0.0);
    assert_eq!(background.clean.hd95, (16f64 * 16.0 + 16.0 * 16.0).sqrt());

    assert!(matches!(evaluate(&threshold_model(0.0, 1.0), &[]), Err(TrainError::EmptySplit)));
}

#[test]
fn golden_metric_row() {
    let data = small_data(6);
    let st = trained(small_config(Mode::Baseline, 24), &data);
    let ev = evaluate(&st.params, &data.test).unwrap();
    let got = [ev.clean.dice, ev.clean.miou, ev.clean.hd95, ev.clean.asd];
    let want = GOLDEN_ROW;
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "{got:?}");
    }
}

const GOLDEN_ROW: [f64; 4] = [0.875_387_024_230_623_8, 0.853_925_790_479_419_4, 1.220_710_678_118_654_3, 0.498_654_463_857_708_23];

#[test]
fn region_free_data_trains_only_the_nonfuzzy_phase() {
    // flat background images have no fuzzy support at all
    let flat: Vec<Sample> = (0..4)
        .map(|_| Sample {
            image: Tensor::full(&[1, 16, 16], 0.2),
            label: ClassMap::filled(16, 16, 0),
            clean_label: ClassMap::filled(16, 16, 0),
            noise_mask: vec![false; 256],
        })
        .collect();
    let mut st = TrainState::new(small_config(Mode::Dale, 1), &flat).unwrap();
    let mut logs = Vec::new();
    run(&mut st, &[], None, &mut |m| logs.push(m.to_string())).unwrap();
    assert!(logs.iter().any(|m| m.contains("fuzzy region set is empty")));
    let row = |p: &str| st.history.iter().find(|r| r.phase == p).unwrap();
    assert_eq!(row("nonfuzzy").steps, 1);
    assert_eq!(row("fuzzy").steps, 0);
    assert_eq!(row("fuzzy").checksum_out, row("nonfuzzy").checksum_out);
    assert!(st.maps.iter().all(|m| m.grad_omega.is_none()));
}

#[test]
fn literal_masks_change_the_trajectory_deterministically() {
    let data = small_data(7);
    let mut cfg = small_config(Mode::Dale, 1);
    cfg.literal_masks = true;
    let a = trained(cfg.clone(), &data);
    let b = trained(cfg, &data);
    let weighted = trained(small_config(Mode::Dale, 1), &data);
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, weighted.params);
    assert_eq!(a.steps, weighted.steps);
}

#[test]
fn run_directory_layout() {
    let data = small_data(8);
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let dir = RunDir::create(&root, false).unwrap();
    dir.write_config(&serde_json::json!({"config": small_config(Mode::Dale, 2)})).unwrap();
    let mut cfg = small_config(Mode::Dale, 2);
    cfg.omega_dump_images = 2;
    let mut st = TrainState::new(cfg, &data.train).unwrap();
    run(&mut st, &data.test, Some(&dir), &mut |_| {}).unwrap();

    for rel in [
        "config.json",
        "metrics.csv",
        "checkpoints/t0001.ckpt",
        "checkpoints/t0002.ckpt",
        "omega/t0001_img0000.dlf1",
        "omega/t0002_img0001.dlf1",
    ] {
        assert!(root.join(rel).is_file(), "{rel}");
    }
    assert!(!root.join("omega/t0001_img0002.dlf1").exists());
    let csv = std::fs::read_to_string(root.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("t,phase,loss,Dice,mIoU,HD95,ASD,mean_omega_clean,mean_omega_noisy,L_W"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    assert_eq!(dir.latest_checkpoint().unwrap(), Some(dir.checkpoint_path(2)));
    let omega = crate::dataio::read_f32(root.join("omega/t0002_img0000.dlf1")).unwrap();
    assert_eq!(omega.shape(), &[16, 16]);
    for (a, b) in omega.data().iter().zip(&st.maps[0].omega) {
        assert!((a - b).abs() <= b.abs() * 2f64.powi(-20));
    }

    std::fs::write(root.join("notes.txt"), "keep").unwrap();
    assert!(matches!(RunDir::create(&root, false), Err(TrainError::Config(_))));
    RunDir::create(&root, true).unwrap();
    assert!(root.join("notes.txt").exists());
    assert!(!root.join("metrics.csv").exists() && !root.join("checkpoints").exists());
}

#[test]
fn metrics_rows_leave_inapplicable_cells_empty() {
    let mut row = MetricsRow::new(3, "fuzzy");
    row.loss = 0.5;
    row.checksum_in = Some(0xab);
    assert_eq!(row.to_csv(), "3,fuzzy,0.5,,,,,,,,0,,,,00000000000000ab,");
    assert_eq!(METRICS_HEADER.split(',').count(), row.to_csv().split(',').count());
}

