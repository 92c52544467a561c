use std::fs;

use binmask::data::{load_csv, read_binary, synth_planted_features, write_binary};
use binmask::fselect::{prepare_trial, select_by_lambda, Protocol};
use binmask::masking::masked_network;
use binmask::{
    build_network, run_experiment, train, EvalSets, ExperimentConfig, MaskHyper, MaskState, MlpSpec, Regularizer,
    TrainConfig,
};

#[test]
fn csv_to_binary_cache_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    fs::write(&csv, "a,b,label\n0.5,1.25,1\n-3,2e-3,0\n7,8,1\n").unwrap();
    let ds = load_csv(&csv, None, true).unwrap();
    assert_eq!(ds.feature_names.as_deref(), Some(&["a".to_owned(), "b".to_owned()][..]));
    let bin = dir.path().join("d.bin");
    write_binary(&ds, &bin).unwrap();
    let back = read_binary(&bin).unwrap();
    assert_eq!(back.features, ds.features);
    assert_eq!(back.labels, ds.labels);
}

#[test]
fn mask_checkpoint_reproduces_predictions() {
    let data = synth_planted_features(400, 6, 2, 0.0, 4).unwrap();
    let net = MlpSpec {
        hidden: vec![12],
        ..MlpSpec::tabular(6, 2)
    };
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 32,
        regularizer: Regularizer::BinMask { lambda: 1e-3 },
        mask: MaskHyper {
            eta0: 0.05,
            ..MaskHyper::default()
        },
        ..TrainConfig::default()
    };
    let model = train(build_network(&net, &cfg).unwrap(), &data, EvalSets::default(), &cfg).unwrap();
    let (spec, state) = model.mask.clone().unwrap();
    assert!(state.sparsity() > 0.0);

    let restored = MaskState::from_json(&state.to_json().unwrap()).unwrap();
    assert_eq!(restored, state);
    let spec_json = serde_json::to_string(&spec).unwrap();
    let spec_back: binmask::MaskSpec = serde_json::from_str(&spec_json).unwrap();
    let spec_back = spec_back.resolve(&model.net).unwrap();
    let eff = masked_network(&spec_back, restored.bits(), &model.net).unwrap();
    assert_eq!(eff.predict(&data.features).unwrap(), model.predict(&data.features).unwrap());
}

#[test]
fn selection_finds_planted_features_on_easy_data() {
    let data = synth_planted_features(1500, 12, 3, 0.0, 9).unwrap();
    let planted = data.planted.clone().unwrap();
    let (tr, _, _) = prepare_trial(&data, &Protocol::default(), 9, 128).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 128,
        mask: MaskHyper::feature_selection(),
        ..TrainConfig::default()
    };
    let net = MlpSpec {
        hidden: vec![16],
        ..MlpSpec::tabular(12, 2)
    };
    let sel = select_by_lambda(&tr, &net, &cfg, 1e-3).unwrap();
    assert_eq!(sel.selected, planted);
    assert!(sel.converged);
}

#[test]
fn experiment_reads_csv_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_planted_features(200, 4, 2, 0.0, 1).unwrap();
    let mut text = String::from("x0,x1,x2,x3,y\n");
    for r in 0..ds.n_rows() {
        let row: Vec<String> = ds.features.row(r).iter().map(f64::to_string).collect();
        text.push_str(&format!("{},{}\n", row.join(","), ds.labels[r]));
    }
    fs::create_dir(dir.path().join("data")).unwrap();
    fs::write(dir.path().join("data/train.csv"), text).unwrap();
    let cfg_path = dir.path().join("exp.toml");
    fs::write(
        &cfg_path,
        r#"
        task = "sparsify"
        trials = 1
        out = "results"
        [data]
        kind = "csv"
        path = "data/train.csv"
        [network]
        hidden = [8]
        [train]
        epochs = 3
        batch_size = 32
        "#,
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let out = cfg.out.clone().unwrap();
    assert_eq!(out, dir.path().join("results"));
    let s = run_experiment(&cfg, &out, 1).unwrap();
    assert!(!s.partial);
    assert!(out.join("trial_0.csv").exists());
}
