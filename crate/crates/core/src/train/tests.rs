use super::*;
use crate::datagen::{synth_generate, SynthSpec};
use crate::graph::ConstructionRule;
use crate::model::{GcnConfig, GcnModel, ModelConfig};

fn tiny_bundle(seed: u64) -> GraphBundle {
    let spec = SynthSpec {
        nodes: 80,
        classes: 4,
        ..SynthSpec::new(2, 0.3, seed)
    };
    synth_generate(&spec).unwrap()
}

fn tiny_model(b: &GraphBundle, seed: u64) -> AnyModel {
    let cfg = ModelConfig {
        channels: 2,
        iterations: 2,
        layers: 2,
        d_out: 8,
        dropout: 0.2,
        rule: ConstructionRule::Knn,
        k: 3,
        latent_agg: true,
        routing_temperature: 1.0,
    };
    AnyModel::Lgd(LgdModel::new(cfg, b.feature_dim(), b.num_classes, seed).unwrap())
}

fn quick(epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        patience,
        lr: 0.01,
        weight_decay: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn runs_are_reproducible_and_keep_best() {
    let b = tiny_bundle(1);
    let cfg = quick(15, 15);
    let a = train_run(&b, tiny_model(&b, 3), &cfg).unwrap();
    let c = train_run(&b, tiny_model(&b, 3), &cfg).unwrap();
    assert_eq!(a.history, c.history);
    assert_eq!(a.history.len(), 15);
    assert_eq!(a.status, RunStatus::Completed);
    let max = a.history.iter().map(|r| r.val_metric).fold(f64::NEG_INFINITY, f64::max);
    assert!((a.best_val - max).abs() < 1e-12);
    let val = evaluate(&a.model, &b, Split::Val).unwrap().micro_f1;
    assert!((val - max).abs() < 1e-12);
    let test_a = evaluate(&a.model, &b, Split::Test).unwrap();
    let test_c = evaluate(&c.model, &b, Split::Test).unwrap();
    assert_eq!(test_a, test_c);
    for r in &a.history {
        assert_eq!(r.losses.space.len(), 2);
        assert!(r.losses.total.is_finite());
    }
}

#[test]
fn training_reduces_loss() {
    let b = tiny_bundle(2);
    let out = train_run(&b, tiny_model(&b, 1), &quick(40, 40)).unwrap();
    let first = out.history[0].losses.cls;
    let last = out.history.last().unwrap().losses.cls;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn zero_patience_stops_at_first_non_improvement() {
    let b = tiny_bundle(3);
    let out = train_run(&b, tiny_model(&b, 2), &quick(50, 0)).unwrap();
    let h = &out.history;
    let stop = h.len();
    assert!(stop < 50);
    assert_eq!(out.status, RunStatus::EarlyStopped);
    for w in h.windows(2).take(stop - 2) {
        assert!(w[1].val_metric > w[0].val_metric);
    }
    assert!(h[stop - 1].val_metric <= h[stop - 2].val_metric);
}

#[test]
fn regularizer_free_runs_ignore_statistics() {
    let b = tiny_bundle(4);
    let base = TrainConfig {
        lambda_space: 0.0,
        lambda_div: 0.0,
        ..quick(10, 10)
    };
    let frozen = train_run(&b, tiny_model(&b, 5), &TrainConfig { update_rate: 0.0, ..base.clone() }).unwrap();
    let full = train_run(&b, tiny_model(&b, 5), &TrainConfig { update_rate: 1.0, ..base }).unwrap();
    for (x, y) in frozen.history.iter().zip(&full.history) {
        assert_eq!(x.losses.cls, y.losses.cls);
        assert_eq!(x.losses.total, x.losses.cls);
        assert_eq!(x.val_metric, y.val_metric);
    }
}

#[test]
fn gcn_path_trains() {
    let b = tiny_bundle(5);
    let m = AnyModel::Gcn(GcnModel::new(GcnConfig::default(), b.feature_dim(), b.num_classes, 1).unwrap());
    let out = train_run(&b, m, &quick(20, 20)).unwrap();
    assert!(out.history.iter().all(|r| r.losses.space.is_empty()));
    assert!(history_csv(&out.history).starts_with("epoch,loss_total,loss_cls,val_metric\n"));
}

#[test]
fn divergence_keeps_last_good_model() {
    let b = tiny_bundle(6);
    let cfg = TrainConfig {
        lr: 1e300,
        ..quick(20, 20)
    };
    let initial = tiny_model(&b, 1);
    let out = train_run(&b, initial.clone(), &cfg).unwrap();
    assert!(matches!(out.status, RunStatus::Diverged { .. }), "{:?}", out.status);
    for ((_, p), (_, q)) in out.model.parameters().iter().zip(initial.parameters()) {
        assert!(p.iter().all(|v| v.is_finite()));
        assert_eq!(p.dim(), q.dim());
    }
}

#[test]
fn history_csv_layout() {
    let h = vec![EpochRecord {
        epoch: 1,
        losses: LossValues {
            total: 1.5,
            cls: 1.0,
            space: vec![2.0, 3.0],
            div: vec![0.1, 0.2],
        },
        val_metric: 0.25,
    }];
    assert_eq!(
        history_csv(&h),
        "epoch,loss_total,loss_cls,loss_space_l1,loss_space_l2,loss_div_l1,loss_div_l2,val_metric\n1,1.5,1,2,3,0.1,0.2,0.25\n"
    );
}

#[test]
fn config_checks() {
    assert!(TrainConfig { update_rate: 1.5, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { patience: 5, epochs: 3, ..TrainConfig::default() }.validate().is_err());
    TrainConfig::default().validate().unwrap();
    let b = tiny_bundle(7);
    let wrong = AnyModel::Gcn(GcnModel::new(GcnConfig::default(), 3, 2, 0).unwrap());
    assert!(matches!(train_run(&b, wrong, &quick(2, 1)), Err(Error::Validation(_))));
}
