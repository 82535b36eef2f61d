use proptest::prelude::*;

use serde::Deserialize;

use super::*;
use crate::hybrid::Optimizer;
use crate::numerics::stf;
use crate::seqpar::SpKind;

fn with_layout(kind: SpKind, sp: usize, tp: usize, pp: usize, dp: usize) -> RunConfig {
    let layout = ParallelLayout::new(kind, sp, tp, pp, dp);
    let batch = 2 * dp * layout.micro_batches;
    RunConfig {
        layout,
        batch_size: batch.max(2),
        ..RunConfig::default()
    }
}

fn invariant(cfg: &RunConfig) -> &'static str {
    match cfg.validate() {
        Err(Error::Config { invariant, .. }) => invariant,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn empty_json_is_the_default() {
    let cfg = RunConfig::from_json("{}").unwrap();
    assert_eq!(cfg, RunConfig::default());
    cfg.validate().unwrap();
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    let err = RunConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
    assert!(matches!(err, Error::Config { invariant: "config-format", .. }));
    let cfg = RunConfig::from_json(r#"{"layout": {"sp": 2, "strategy": "lss"}, "dtype": "f32"}"#).unwrap();
    assert_eq!(cfg.layout.strategy, SpKind::Lss);
    assert_eq!(cfg.dtype, DType::F32);
}

#[test]
fn validation_names_each_invariant() {
    let base = RunConfig::default();
    assert_eq!(invariant(&RunConfig { steps: 0, ..base.clone() }), "step-count");
    assert_eq!(invariant(&RunConfig { batch_size: 0, ..base.clone() }), "batch-size");
    let big = with_layout(SpKind::Lss, 4, 1, 1, 8);
    assert_eq!(invariant(&big), "world-cap");
    assert!(RunConfig { max_world: 32, ..big }.validate().is_ok());
    let mut c = base.clone();
    c.data.samples = 3;
    assert_eq!(invariant(&c), "data-samples");
    let mut c = base.clone();
    c.data.noise = -1.0;
    assert_eq!(invariant(&c), "data-noise");
    let c = RunConfig {
        optimizer: Optimizer::Sgd { lr: 0.0 },
        ..base.clone()
    };
    assert_eq!(invariant(&c), "learning-rate");
    // Four sp ranks cannot split two heads under Ulysses.
    let mut c = with_layout(SpKind::Ulysses, 4, 1, 1, 1);
    c.model.heads = 2;
    assert!(matches!(c.validate(), Err(Error::HeadDivisibility { heads: 2, degree: 4 })));
    assert!(matches!(verify(&c, None), Err(Error::HeadDivisibility { .. })));
}

#[test]
fn noiseless_target_is_the_rolled_input() {
    let spec = SyntheticClimateSpec {
        noise: 0.0,
        ..RunConfig::default().data_spec()
    };
    for s in gen_synthetic::<f64>(&spec, 4, 5).unwrap() {
        assert_eq!(s.target, roll_field(&s.input, spec.advection));
        s.input.check_finite("input").unwrap();
    }
}

#[test]
fn generator_is_seeded() {
    let spec = RunConfig::default().data_spec();
    let a = gen_synthetic::<f64>(&spec, 1, 3).unwrap();
    assert_eq!(a, gen_synthetic::<f64>(&spec, 1, 3).unwrap());
    let b = gen_synthetic::<f64>(&spec, 2, 3).unwrap();
    assert_ne!(a[0].input, b[0].input);
    // A prefix of a longer stream is the shorter stream.
    assert_eq!(gen_synthetic::<f64>(&spec, 1, 5).unwrap()[..3], a[..]);
}

#[test]
fn target_correlates_with_input() {
    let spec = RunConfig::default().data_spec();
    let samples = gen_synthetic::<f64>(&spec, 7, 100).unwrap();
    let mean: f64 = samples
        .iter()
        .map(|s| anomaly_correlation(&s.input, &s.target).unwrap())
        .sum::<f64>()
        / 100.0;
    assert!(mean > 0.5, "{mean}");
}

#[test]
fn anomaly_correlation_examples() {
    let spec = RunConfig::default().data_spec();
    let s = &gen_synthetic::<f64>(&spec, 3, 1).unwrap()[0];
    assert!((anomaly_correlation(&s.input, &s.input).unwrap() - 1.0).abs() < 1e-12);
    let neg = s.input.scale(-2.0);
    assert!((anomaly_correlation(&s.input, &neg).unwrap() + 1.0).abs() < 1e-12);
}

#[test]
fn identical_seeds_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        steps: 3,
        ..RunConfig::default()
    };
    let mut texts = Vec::new();
    for i in 0..2 {
        let out = train::<f64>(&cfg).unwrap();
        let path = dir.path().join(format!("loss{i}.csv"));
        write_loss_csv(&path, &out.losses).unwrap();
        let sub = dir.path().join(format!("ckpt{i}"));
        let (stf_path, json_path) = write_checkpoint(&sub, &cfg, &out).unwrap();
        texts.push((
            std::fs::read(path).unwrap(),
            std::fs::read(stf_path).unwrap(),
            std::fs::read(json_path).unwrap(),
        ));
    }
    assert_eq!(texts[0], texts[1]);
    let csv = String::from_utf8(texts[0].0.clone()).unwrap();
    assert!(csv.starts_with("step,loss\n1,"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        steps: 1,
        dtype: DType::F32,
        ..RunConfig::default()
    };
    let out = train::<f32>(&cfg).unwrap();
    let (stf_path, json_path) = write_checkpoint(dir.path(), &cfg, &out).unwrap();
    let loaded = stf::load(&stf_path).unwrap();
    let tensors = out.params.tensors();
    assert_eq!(loaded.len(), tensors.len());
    for (a, b) in loaded.into_iter().zip(tensors) {
        assert_eq!(a.dtype(), DType::F32);
        assert_eq!(&a.into_tensor::<f32>(), b);
    }
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json_path).unwrap()).unwrap();
    assert_eq!(meta["format"], "STF1");
    assert_eq!(meta["tensors"][0]["name"], "embed.w_patch");
    assert_eq!(RunConfig::deserialize(&meta["config"]).unwrap(), cfg);
}

#[test]
fn missing_directory_surfaces_path() {
    let err = write_loss_csv(std::path::Path::new("/nonexistent/dir/loss.csv"), &[1.0]).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/dir/loss.csv"), "{err}");
}

#[test]
fn first_step_loss_is_layout_independent() {
    let base = train::<f64>(&RunConfig {
        steps: 1,
        ..RunConfig::default()
    })
    .unwrap();
    for kind in [SpKind::Ulysses, SpKind::Lss] {
        let cfg = RunConfig {
            steps: 1,
            ..with_layout(kind, 4, 1, 1, 1)
        };
        let got = train::<f64>(&cfg).unwrap();
        assert!((got.losses[0] - base.losses[0]).abs() < 1e-6, "{kind:?}");
    }
}

#[test]
fn training_reduces_loss() {
    let cfg = RunConfig {
        steps: 50,
        ..RunConfig::default()
    };
    let out = train::<f64>(&cfg).unwrap();
    let (first, last) = (out.losses[0], *out.losses.last().unwrap());
    assert!(last < first, "{first} -> {last}");
    assert!(out.accuracy.is_finite());
}

#[test]
fn verify_passes_on_tiny_sp2() {
    let report = verify(&with_layout(SpKind::Ulysses, 2, 1, 1, 1), None).unwrap();
    assert!(report.passed, "{}", report.to_json());
    assert!(report.max_error < 1e-5);
    assert_eq!(report.checks.len(), 7);
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["checks"][2]["name"], "seqpar.ulysses.forward");
}

#[test]
fn verify_passes_across_layouts_and_dtypes() {
    for (kind, sp, tp, pp, dp) in [(SpKind::Lss, 4, 1, 1, 1), (SpKind::Ulysses, 2, 2, 1, 1), (SpKind::Lss, 2, 1, 2, 2)] {
        for dtype in [DType::F32, DType::F64] {
            let cfg = RunConfig {
                dtype,
                ..with_layout(kind, sp, tp, pp, dp)
            };
            let report = verify(&cfg, None).unwrap();
            assert!(report.passed, "{}", report.to_json());
        }
    }
    let mut cfg = with_layout(SpKind::Ulysses, 2, 1, 1, 1);
    cfg.layout.kernel = crate::attention::AttentionKernel::Tiled { block_q: 8, block_k: 16 };
    assert!(verify(&cfg, None).unwrap().passed);
}

#[test]
fn corrupted_shard_range_fails_by_name() {
    for sp in [1, 2] {
        let report = verify(&with_layout(SpKind::Lss, sp, 1, 1, 1), Some(Fault::ShardRange)).unwrap();
        assert!(!report.passed);
        let bad = report.checks.iter().find(|c| c.name == "seqpar.lss.forward").unwrap();
        assert!(bad.detail.as_deref().unwrap().contains("range-tiling"), "{bad:?}");
    }
}

#[test]
fn bench_reports_ledger_bytes() {
    let opts = BenchOptions {
        scales: vec![1, 2],
        token_budget: 256,
        repeats: 1,
    };
    let rows = bench(&RunConfig::default(), &opts).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].seq_len, 2 * rows[0].seq_len);
    assert!(rows.iter().all(|r| r.bytes_communicated == 0 && r.images_per_s > 0.0));
    let rows = bench(&with_layout(SpKind::Lss, 2, 1, 2, 1), &opts).unwrap();
    for r in &rows {
        assert!(r.bytes_communicated > 0);
        assert_eq!(r.bytes_communicated, r.predicted_bytes);
    }
    let csv = bench_csv(&rows);
    assert!(csv.starts_with("layout,seq_len,tokens_per_s,images_per_s,peak_scratch,bytes_communicated\n"));
    assert_eq!(csv.lines().count(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn invalid_layouts_never_pass_validation(sp in 1usize..9, tp in 1usize..5, heads in 1usize..9) {
        let mut cfg = with_layout(SpKind::Ulysses, sp, tp, 1, 1);
        cfg.model.heads = heads;
        cfg.model.dim = 8 * heads;
        let ok = cfg.validate().is_ok();
        let h_local = heads / tp;
        let expect = heads % tp == 0
            && (cfg.model.dim * cfg.model.mlp_ratio).is_multiple_of(tp)
            && h_local % sp == 0
            && cfg.model.tokens().is_multiple_of(sp)
            && sp * tp <= MAX_WORLD;
        prop_assert_eq!(ok, expect);
    }
}
