mod common;

use common::{prepare, synthetic};
use contravirt::features::FeatureLayout;
use contravirt::objectives::{ContrastiveConfig, LambdaSchedule, Strategy};
use contravirt::trainer::{train_with, TrainConfig};

#[test]
fn overfits_five_windows() {
    let layout = FeatureLayout { t_in: 6, t_out: 2, ..FeatureLayout::default() };
    let (dataset, split) = synthetic(600);
    let p = prepare(dataset, split, false, layout);
    assert_eq!(contravirt::features::make_windows(&p.data.store, 0..600, 120).len(), 5);
    let cfg = TrainConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        max_epochs: 200,
        batch_size: 1,
        embed_dim: 64,
        val_fraction: 0.0,
        early_stop_patience: 200,
        plateau_patience: 20,
        stride: 120,
        seed: 3,
        ..TrainConfig::default()
    };
    let contrastive = ContrastiveConfig { strategy: Strategy::None, ..ContrastiveConfig::default() };
    let mut lrs = Vec::new();
    let out = train_with(&p.data, &cfg, &contrastive, &LambdaSchedule::default(), |d| lrs.push(d.lr)).unwrap();
    let first = &out.diagnostics[0];
    let last = out.diagnostics.last().unwrap();
    println!("dd {:.2} -> {:.2}, ff {:.3} -> {:.3}, gff {:.3} -> {:.3}", first.train_mae_dd, last.train_mae_dd, first.train_mae_ff, last.train_mae_ff, first.train_mae_gff, last.train_mae_gff);
    assert_eq!(out.diagnostics.len(), 200);
    assert!(out.diagnostics.iter().all(|d| d.train_contrast_loss == 0.0));
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    // The training MAE is the mean over the decoded variables.
    assert!(last.mean_mae() * 10.0 <= first.mean_mae(), "mean MAE only fell from {} to {}", first.mean_mae(), last.mean_mae());
    for (a, b) in [
        (first.train_mae_dd, last.train_mae_dd),
        (first.train_mae_ff, last.train_mae_ff),
        (first.train_mae_gff, last.train_mae_gff),
    ] {
        assert!(b * 3.0 <= a, "MAE only fell from {a} to {b}");
    }
}

#[test]
fn best_epoch_is_restored() {
    let (dataset, split) = synthetic(1200);
    let p = prepare(dataset, split, false, FeatureLayout::default());
    let cfg = TrainConfig { max_epochs: 4, stride: 24, embed_dim: 16, seed: 9, ..TrainConfig::default() };
    let contrastive = ContrastiveConfig { strategy: Strategy::Augmented, queue_size: 32, ..ContrastiveConfig::default() };
    let out = train_with(&p.data, &cfg, &contrastive, &LambdaSchedule::default(), |_| {}).unwrap();
    let best = out.diagnostics.iter().map(|d| d.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_loss, best);
    assert_eq!(out.diagnostics[out.best_epoch].val_loss, best);
    let val_start = p.data.validation_start(cfg.val_fraction);
    let anchors: Vec<usize> = contravirt::features::make_windows(&p.data.store, val_start..p.data.store.n_steps(), cfg.stride)
        .into_iter()
        .map(|w| w.anchor)
        .collect();
    let restored = contravirt::trainer::validation_loss(&out.model, &p.data, &anchors).unwrap();
    assert!((restored - best).abs() <= 1e-12 * best.abs().max(1.0));
}
