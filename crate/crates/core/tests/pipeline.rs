//! Cross-module integration: synthetic data through preprocessing into the
//! model, checkpoint round trips, and evaluation self-consistency.

use std::path::Path;

use spotfast_core::config::{ModelConfig, PhasePlan};
use spotfast_core::data::{generate_synthetic_dataset, LrwDataset, Split, SyntheticSpec};
use spotfast_core::model::{SpotFastModel, Topology};
use spotfast_core::train::{evaluate, prepare_eval_batch, run_phase, TrainOptions};

fn micro_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::desk(3, 3);
    cfg.backbone.full_len = 9;
    cfg.backbone.stage_channels_spot = vec![8, 16];
    cfg.backbone.stage_channels_fast = vec![2, 4];
    cfg.backbone.spatial_strides = vec![2, 2];
    cfg.data.frames = 9;
    cfg.data.channels = 1;
    cfg.backbone.in_channels = 1;
    cfg.data.augment.upsample_min = 17;
    cfg.data.augment.upsample_max = 19;
    cfg.data.augment.crop = 16;
    cfg.data.augment.eval_upsample = 17;
    cfg.transformer.model_dim = 8;
    cfg.transformer.ff_dim = 16;
    cfg.transformer.attn_heads = 2;
    cfg.transformer.layers = 3;
    cfg.transformer.memory_layer = 2;
    cfg.spot_memory = spotfast_core::pkmem::PkMemConfig {
        heads: 2,
        key_dim: 8,
        n_keys: 4,
        k: 4,
        input_dim: 8,
        value_dim: 8,
        value_dropout: 0.1,
        layernorm: spotfast_core::pkmem::LnMode::Affine,
    };
    cfg.fast_memory = cfg.spot_memory.clone();
    cfg
}

fn micro_data(dir: &Path) {
    let spec = SyntheticSpec {
        num_classes: 3,
        clips_per_class: 4,
        frames: 9,
        height: 18,
        width: 18,
        channels: 1,
        seed: 17,
    };
    generate_synthetic_dataset(&spec, dir).unwrap();
}

#[test]
fn clips_flow_from_disk_through_the_model() {
    let dir = tempfile::tempdir().unwrap();
    micro_data(dir.path());
    let cfg = micro_cfg();
    let dataset = LrwDataset::open(dir.path(), Split::Train, Some(9)).unwrap();
    let (clips, skipped) = dataset.load_all().unwrap();
    assert_eq!(skipped, 0);
    assert_eq!(clips.len(), 12);
    for clip in &clips {
        clip.validate(3).unwrap();
    }
    let refs: Vec<_> = clips.iter().take(4).collect();
    let batch = prepare_eval_batch(&refs, &cfg.data, cfg.backbone.window_size).unwrap();
    assert_eq!(batch.window.shape(), &[4, 1, 3, 16, 16]);
    assert_eq!(batch.full.shape(), &[4, 1, 9, 16, 16]);

    for topology in [Topology::SpotFastOnly, Topology::WithTransformers] {
        let mut model = SpotFastModel::new(&cfg, topology, 3).unwrap();
        let (preds, logits) = model.predict(&batch.window, &batch.full).unwrap();
        assert_eq!(preds.len(), 4);
        assert_eq!(logits.shape(), &[4, 3]);
        assert!(logits.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn overfit_model_evaluation_matches_its_final_training_log() {
    let data_dir = tempfile::tempdir().unwrap();
    micro_data(data_dir.path());
    let out_dir = tempfile::tempdir().unwrap();
    let cfg = micro_cfg();
    let mut model = SpotFastModel::new(&cfg, Topology::SpotFastOnly, 5).unwrap();
    let plan = PhasePlan {
        phase_id: 1,
        lr0: 2e-3,
        weight_decay: 0.0,
        batch_size: 4,
        epochs: 20,
        warmup_steps: 5,
        frozen: vec![],
        plateau: false,
        plateau_patience: 1,
    };
    let opts = TrainOptions {
        data_root: data_dir.path().to_path_buf(),
        out_dir: out_dir.path().to_path_buf(),
        seed: 5,
        log_augment: false,
        epochs_override: None,
    };
    let outcome = run_phase(&mut model, &plan, &opts).unwrap();
    let final_logged = outcome.metrics.last().unwrap().acc;
    assert_eq!(final_logged, 1.0, "micro task should overfit to 100%");

    // deterministic evaluation on the train split agrees with the log
    let train_acc = evaluate(&mut model, data_dir.path(), Split::Train).unwrap();
    assert_eq!(train_acc, final_logged);
    let again = evaluate(&mut model, data_dir.path(), Split::Train).unwrap();
    assert_eq!(train_acc, again);

    // and the checkpoint reproduces it exactly
    let (mut restored, _) =
        SpotFastModel::from_checkpoint(&outcome.final_checkpoint).unwrap();
    let restored_acc = evaluate(&mut restored, data_dir.path(), Split::Train).unwrap();
    assert_eq!(restored_acc, train_acc);
}

#[test]
fn memory_usage_histograms_account_for_every_selection() {
    let dir = tempfile::tempdir().unwrap();
    micro_data(dir.path());
    let cfg = micro_cfg();
    let dataset = LrwDataset::open(dir.path(), Split::Val, Some(9)).unwrap();
    let (clips, _) = dataset.load_all().unwrap();
    let refs: Vec<_> = clips.iter().collect();
    let batch = prepare_eval_batch(&refs, &cfg.data, cfg.backbone.window_size).unwrap();
    let mut model = SpotFastModel::new(&cfg, Topology::WithTransformers, 7).unwrap();
    let (spot_hist, fast_hist) = model.memory_usage(&batch.window, &batch.full).unwrap();
    let b = refs.len() as u64;
    let mem = &cfg.spot_memory;
    assert_eq!(
        spot_hist.iter().sum::<u64>(),
        b * 3 * (mem.heads * mem.k) as u64 // T_spot = 3
    );
    assert_eq!(
        fast_hist.iter().sum::<u64>(),
        b * 9 * (mem.heads * mem.k) as u64 // T_fast = 9
    );
    assert_eq!(spot_hist.len(), mem.value_rows());
}
