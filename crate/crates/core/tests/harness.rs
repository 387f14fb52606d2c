use afusion::data::{Frames, Matrix, Partition, Trial, WindowConfig};
use afusion::folds::FoldPlan;
use afusion::model::{Model, ModelConfig};
use afusion::train::{
    lr_trace, predict_and_fuse, predict_trial, split_fold, FoldModel, MergeMethod, ScheduleEvent, StopReason,
    TrainConfig, TrainError, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        visual_channels: vec![2, 2, 2],
        visual_dim: 4,
        audio_dim: 3,
        text_dim: 2,
        tcn_channels: vec![4],
        dilations: vec![1],
        key_dim: 4,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn trial(id: &str, subject: &str, n: usize, seed: u64) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let visual: Vec<u8> = (0..n * 3 * 48 * 48).map(|_| rng.gen()).collect();
    let mut mat = |cols: usize| Matrix::new(n, cols, (0..n * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let audio = mat(3);
    let text = mat(2);
    let labels = (0..n)
        .map(|i| {
            let t = i as f64 / 30.0;
            [(t * 0.7).sin() * 0.8, (t * 0.4 + 1.0).cos() * 0.6]
        })
        .collect();
    Trial {
        trial_id: id.into(),
        subject_id: subject.into(),
        partition: Partition::Train,
        fps: 30.0,
        labels: Some(labels),
        frame_index_map: (0..n).collect(),
        visual: Frames::new(n, 48, visual).unwrap(),
        audio,
        text,
    }
}

fn short_windows(cfg: TrainConfig) -> TrainConfig {
    TrainConfig {
        window_len: 20,
        hop: 10,
        train_offset: 5,
        model: tiny_model(),
        lr: 1e-3,
        min_lr: 1e-5,
        ..cfg
    }
}

#[test]
fn worse_epoch_restores_best_weights() {
    let cfg = short_windows(TrainConfig {
        warmup_epochs: 1,
        ..TrainConfig::default()
    });
    let train = [trial("a", "s1", 40, 1), trial("b", "s2", 35, 2)];
    let val = [trial("c", "s3", 30, 3)];
    let mut t = Trainer::new(cfg, &train, &val).unwrap();
    t.run_epoch().unwrap();
    let best = t.weights();
    assert_eq!(t.best_weights(), &best[..]);

    t.train_pass().unwrap();
    assert_ne!(t.weights(), best);
    let entry = t.conclude_epoch(t.state().best_val_ccc - 0.5);
    assert!(!entry.improved);
    assert_eq!(t.weights(), best);
}

#[test]
fn ten_flat_epochs_stop_training() {
    let cfg = short_windows(TrainConfig {
        warmup_epochs: 2,
        plateau_patience: 50,
        ..TrainConfig::default()
    });
    let train = [trial("a", "s1", 30, 1)];
    let val = [trial("c", "s3", 30, 3)];
    let mut t = Trainer::new(cfg, &train, &val).unwrap();
    let mut epochs = 0;
    while !t.is_done() {
        t.conclude_epoch(if epochs == 0 { 0.3 } else { 0.2 });
        epochs += 1;
    }
    // two warmup epochs never count, then ten flat ones
    assert_eq!(epochs, 12);
    assert_eq!(t.state().stopped, Some(StopReason::EarlyStop));
    let last = t.log().last().unwrap();
    assert_eq!(last.events, vec![ScheduleEvent::Stop(StopReason::EarlyStop)]);
    assert!(t.log().windows(2).all(|w| w[1].best_val_ccc >= w[0].best_val_ccc));
}

#[test]
fn logged_rates_follow_the_schedule() {
    let cfg = short_windows(TrainConfig {
        warmup_epochs: 3,
        plateau_patience: 2,
        early_stop_patience: 40,
        ..TrainConfig::default()
    });
    let flags = [true, false, true, false, false, false, false, true, false, false, false, false, false, false];
    let train = [trial("a", "s1", 30, 1)];
    let val = [trial("c", "s3", 30, 3)];
    let mut t = Trainer::new(cfg.clone(), &train, &val).unwrap();
    let mut score = 0.0;
    for &f in &flags {
        if t.is_done() {
            break;
        }
        if f {
            score += 0.1;
        }
        t.conclude_epoch(score);
    }
    let lrs: Vec<f64> = t.log().iter().map(|l| l.lr).collect();
    assert_eq!(lrs, lr_trace(&cfg.schedule(), &flags));
    let unfrozen: Vec<usize> = t.log().iter().map(|l| l.trainable_groups.len()).collect();
    assert!(unfrozen.windows(2).all(|w| w[1] >= w[0]));
    assert!(unfrozen.last().unwrap() > &1);
}

#[test]
fn training_is_deterministic() {
    let cfg = short_windows(TrainConfig {
        warmup_epochs: 1,
        max_epochs: 2,
        ..TrainConfig::default()
    });
    let train = [trial("a", "s1", 40, 1), trial("b", "s2", 35, 2)];
    let val = [trial("c", "s3", 30, 3)];
    let a = Trainer::new(cfg.clone(), &train, &val).unwrap().run().unwrap();
    let b = Trainer::new(cfg, &train, &val).unwrap().run().unwrap();
    assert_eq!(a.log_csv(), b.log_csv());
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    assert_eq!(a.stop, StopReason::MaxEpochs);
    assert!(a.best.get("aux.norm.audio_mean").is_some());
}

#[test]
fn overlapping_frames_average_their_windows() {
    let model = Model::new(tiny_model()).unwrap();
    let t = trial("a", "s1", 500, 9);
    let wcfg = WindowConfig::default();
    let pred = predict_trial(&model, &t, &wcfg).unwrap();
    assert_eq!(pred.valence.len(), 500);

    // windows [0, 300) and [200, 500), each predicted independently
    let first = trial_slice(&t, 0, 300);
    let second = trial_slice(&t, 200, 500);
    let p1 = predict_trial(&model, &first, &wcfg).unwrap();
    let p2 = predict_trial(&model, &second, &wcfg).unwrap();
    for i in 0..500 {
        let mut covering = Vec::new();
        if i < 300 {
            covering.push((p1.valence[i], p1.arousal[i]));
        }
        if i >= 200 {
            covering.push((p2.valence[i - 200], p2.arousal[i - 200]));
        }
        let k = covering.len() as f64;
        let ev = covering.iter().map(|c| c.0).sum::<f64>() / k;
        let ea = covering.iter().map(|c| c.1).sum::<f64>() / k;
        assert!((pred.valence[i] - ev).abs() < 1e-12, "frame {i}");
        assert!((pred.arousal[i] - ea).abs() < 1e-12, "frame {i}");
    }
}

fn trial_slice(t: &Trial, start: usize, end: usize) -> Trial {
    let n = end - start;
    let rows = |m: &Matrix| Matrix::new(n, m.cols, m.data[start * m.cols..end * m.cols].to_vec()).unwrap();
    Trial {
        labels: t.labels.as_ref().map(|l| l[start..end].to_vec()),
        frame_index_map: (0..n).collect(),
        visual: t.visual.slice_padded(start, end),
        audio: rows(&t.audio),
        text: rows(&t.text),
        ..t.clone()
    }
}

#[test]
fn identical_fold_models_fuse_to_the_single_output() {
    let cfg = short_windows(TrainConfig::default());
    let model = Model::new(cfg.model.clone()).unwrap();
    let ckpt = model.to_checkpoint();
    let single = FoldModel::from_checkpoint(&ckpt, cfg.model.clone()).unwrap();
    let six: Vec<FoldModel> = (0..6).map(|_| single.clone()).collect();
    let trials = [trial("a", "s1", 45, 4), trial("b", "s2", 33, 5)];
    let wcfg = cfg.window();
    let fused = predict_and_fuse(&six, &trials, &wcfg, MergeMethod::Ccc).unwrap();
    let alone = predict_and_fuse(&six[..1], &trials, &wcfg, MergeMethod::Ccc).unwrap();
    for (f, a) in fused.iter().zip(&alone) {
        for (x, y) in f.predictions.valence.iter().zip(&a.predictions.valence) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in f.predictions.arousal.iter().zip(&a.predictions.arousal) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(f.predictions.valence.iter().chain(&f.predictions.arousal).all(|v| v.abs() <= 1.0));
        assert!(f.report.is_some());
        assert!(f.valence_weights.iter().all(|w| (w - 1.0 / 6.0).abs() < 1e-12));
    }
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let ckpt = Model::new(tiny_model()).unwrap().to_checkpoint();
    let other = ModelConfig {
        key_dim: 8,
        ..tiny_model()
    };
    assert!(matches!(
        FoldModel::from_checkpoint(&ckpt, other),
        Err(TrainError::Model(_))
    ));
}

#[test]
fn fold_split_and_empty_fold() {
    let trials = [trial("a", "s1", 20, 1), trial("b", "s2", 20, 2), trial("c", "s3", 20, 3)];
    let plan = FoldPlan {
        folds: vec![vec!["c".into()], vec!["a".into(), "b".into()], vec![], vec![], vec![], vec![]],
    };
    let (train, val) = split_fold(&trials, &plan, 0).unwrap();
    assert_eq!(train.len(), 2);
    assert_eq!(val[0].trial_id, "c");
    assert!(matches!(split_fold(&trials, &plan, 3), Err(TrainError::EmptyFold(3, _))));
}
