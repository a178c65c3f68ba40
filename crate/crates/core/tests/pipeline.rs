use denseddsspp::checkpoint;
use denseddsspp::config::RunConfig;
use denseddsspp::data::{load_directory, save_sample, synth_roads, tile_directories, Split, TileRequest};
use denseddsspp::model::{BackboneConfig, Model, ModelConfig, PyramidConfig};
use denseddsspp::train::{evaluate, train, TrainConfig};
use denseddsspp::metrics::Averaging;

fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.backbone = BackboneConfig::with_widths(4, [4, 8, 8], 1);
    if let PyramidConfig::Dense(d) = &mut cfg.pyramid {
        d.dilation_rates = vec![1, 2];
        d.growth_channels = 4;
        d.projection_channels = 8;
    }
    cfg.decoder_channels = 8;
    cfg.low_proj_channels = 4;
    cfg
}

#[test]
fn tiles_train_checkpoint_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    for (i, s) in synth_roads(5, 64, 1).unwrap().iter().enumerate() {
        save_sample(s, &src, &format!("scene{i}")).unwrap();
    }
    let out = dir.path().join("tiles");
    let req = TileRequest {
        tile: 32,
        ratio: 0.8,
        seed: 2,
        limit: None,
    };
    let outcome = tile_directories(&src.join("images"), &src.join("masks"), &out, &req).unwrap();
    assert_eq!(outcome.manifest.count(Split::Train), 16);
    assert_eq!(outcome.manifest.count(Split::Test), 4);

    let train_set = load_directory(&out.join("train")).unwrap();
    let test_set = load_directory(&out.join("test")).unwrap();
    assert_eq!((train_set.len(), test_set.len()), (16, 4));

    let model = Model::new(tiny_model(), 3).unwrap();
    let best = dir.path().join("best.ddsp");
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let history = train(&model, &train_set, &test_set, &cfg, 4, Some(&best), |_| {}).unwrap();
    assert_eq!(history.records.len(), 2);
    assert_eq!(history.records[1].step, 4);

    // the best checkpoint reproduces the validation score of its epoch
    let restored = checkpoint::load(&best).unwrap();
    let (scores, _) = evaluate(&restored, &test_set, 4, 0.5, Averaging::Micro).unwrap();
    let best_record = history.best().unwrap();
    assert_eq!(scores, best_record.val.unwrap());
}

#[test]
fn run_config_drives_a_synthetic_run() {
    let text = serde_json::json!({
        "seed": 8,
        "model": tiny_model(),
        "train": {"epochs": 1, "batch_size": 2, "loss": "bce_dice"},
        "data": {"synthetic": {"count": 2, "size": 32, "val_count": 1}},
    })
    .to_string();
    let cfg = RunConfig::from_json(&text).unwrap();
    cfg.validate().unwrap();
    let seed = cfg.require_seed().unwrap();
    let (train_set, val_set) = cfg.data.load(seed).unwrap();
    let model = Model::new(cfg.model.clone(), seed).unwrap();
    let h = train(&model, &train_set, &val_set, &cfg.train, seed, None, |_| {}).unwrap();
    assert!(h.records[0].loss.is_finite());
    assert!(h.records[0].val.is_some());
}
