use prunekit::config::{PipelineConfig, PruneMode, SubsetPolicy, TrainConfig};
use prunekit::data::{generate_synthetic, DatasetBundle, SyntheticConfig};
use prunekit::model::Architecture;
use prunekit::pipeline::{run, train_baseline, Phase, RunLog, RunStatus};
use prunekit::Network;

fn tiny() -> DatasetBundle {
    generate_synthetic(&SyntheticConfig {
        train_per_class: 40,
        test_per_class: 20,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn baseline(bundle: &DatasetBundle, cfg: TrainConfig) -> Network {
    train_baseline(bundle, &TrainConfig { epochs: 2, ..cfg }).unwrap().0
}

fn quick(mode: PruneMode) -> PipelineConfig {
    PipelineConfig {
        mode,
        tick_prune_fraction: 0.05,
        ticks_per_tock: 2,
        tock_epochs: 1,
        finetune_epochs: 1,
        tick_subset: SubsetPolicy::PerClass(10),
        min_channels: 2,
        ..PipelineConfig::default()
    }
}

fn flops_never_increase(log: &RunLog) -> bool {
    log.records.windows(2).all(|w| {
        let removed = w[1].removed_filters > 0;
        (removed && w[1].flops < w[0].flops) || (!removed && w[1].flops <= w[0].flops)
    })
}

#[test]
fn every_mode_follows_its_grammar() {
    let bundle = tiny();
    let base = baseline(
        &bundle,
        TrainConfig {
            widths: vec![8, 12, 12, 16],
            ..TrainConfig::default()
        },
    );
    for mode in [PruneMode::OneShot, PruneMode::TickOnly, PruneMode::TickTock] {
        let cfg = quick(mode);
        let out = run(&cfg, &base, &bundle).unwrap();
        assert!(out.log.matches_grammar(mode, cfg.ticks_per_tock), "{mode}: {:?}", out.log.phases());
        assert_eq!(out.status, RunStatus::Complete, "{mode}");
        assert!(out.final_cost.flops as f64 <= 0.6 * out.baseline_cost.flops as f64);
        assert!(flops_never_increase(&out.log), "{mode}");
        assert_eq!(out.log.phases().last(), Some(&Phase::Finetune));
        assert_eq!(RunLog::from_jsonl(&out.log.to_jsonl()).unwrap(), out.log);
        assert!(out.network.decoration.is_none());
    }
}

#[test]
fn residual_tick_tock_prunes_groups_together() {
    let bundle = tiny();
    let base = baseline(
        &bundle,
        TrainConfig {
            architecture: Architecture::Residual,
            widths: vec![8, 16],
            blocks_per_stage: vec![1, 1],
            ..TrainConfig::default()
        },
    );
    let out = run(&quick(PruneMode::TickTock), &base, &bundle).unwrap();
    assert_eq!(out.status, RunStatus::Complete);
    // The merged network must still execute: adds only see aligned operands.
    out.network.spec.validate().unwrap();
}

#[test]
fn unreachable_target_is_partial() {
    let bundle = tiny();
    let base = baseline(
        &bundle,
        TrainConfig {
            widths: vec![4, 6],
            ..TrainConfig::default()
        },
    );
    for mode in [PruneMode::OneShot, PruneMode::TickOnly] {
        let cfg = PipelineConfig {
            flops_target: 0.05,
            min_channels: 3,
            ..quick(mode)
        };
        let out = run(&cfg, &base, &bundle).unwrap();
        assert!(matches!(out.status, RunStatus::Partial { .. }), "{mode}");
        assert_eq!(out.log.phases().last(), Some(&Phase::Finetune));
        assert!(out.log.matches_grammar(mode, cfg.ticks_per_tock));
    }
}

#[test]
fn gated_convolution_pipeline_without_batch_norm() {
    let bundle = tiny();
    let base = baseline(
        &bundle,
        TrainConfig {
            batch_norm: false,
            widths: vec![8, 12, 12],
            lr_low: 1e-3,
            lr_high: 1e-2,
            ..TrainConfig::default()
        },
    );
    let out = run(&quick(PruneMode::TickOnly), &base, &bundle).unwrap();
    assert_eq!(out.gated.decoration.as_ref().unwrap().mode, prunekit::gates::DecorateMode::GatedConv);
    assert!(out.network.params.keys().all(|k| !k.ends_with(".phi")));
    assert!(out.final_cost.flops_reduction_pct() >= 40.0);
}
