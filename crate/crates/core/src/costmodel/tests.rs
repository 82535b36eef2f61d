use proptest::prelude::*;

use super::*;
use crate::hybrid::{run_layout, Batch};
use crate::numerics::{Scalar, SeededRng};
use crate::vit::{EmbedMode, ViTParams};

fn cfg(dim: usize, depth: usize, img: usize) -> ViTConfig {
    ViTConfig {
        dim,
        depth,
        heads: 4,
        mlp_ratio: 2,
        patch: 2,
        img_h: img,
        img_w: img,
        channels: 2,
        embed: EmbedMode::AggCh,
        lead_time: 1,
    }
}

fn batch<T: Scalar>(cfg: &ViTConfig, n: usize) -> Batch<T> {
    let f = |s: u64| SeededRng::new(9, s).normal_tensor(&[cfg.channels, cfg.img_h, cfg.img_w], 1.0);
    Batch::new((0..n as u64).map(f).collect(), (50..50 + n as u64).map(f).collect()).unwrap()
}

fn layout(kind: SpKind, sp: usize, tp: usize, pp: usize, dp: usize) -> ParallelLayout {
    ParallelLayout::new(kind, sp, tp, pp, dp)
}

fn check<T: Scalar>(layout: &ParallelLayout, cfg: &ViTConfig, n: usize, steps: usize) {
    let params = ViTParams::<T>::init(cfg, 3).unwrap();
    let batches: Vec<_> = (0..steps).map(|_| batch::<T>(cfg, n)).collect();
    let run = run_layout(layout, cfg, &params, &batches, &Optimizer::default()).unwrap();
    let pred = comm_predict(layout, cfg, n, std::mem::size_of::<T>()).unwrap();
    pred.check_ledger(&run.ledger, steps as u64)
        .unwrap_or_else(|e| panic!("{}: {e}", layout.label()));
    assert_eq!(pred.world_bytes(layout, steps as u64), run.ledger.total_bytes_sent());
}

#[test]
fn ulysses_prediction_equals_ledger() {
    // S = 64, d = 32, two layers, f32.
    let c = cfg(32, 2, 16);
    assert_eq!(c.tokens(), 64);
    check::<f32>(&layout(SpKind::Ulysses, 4, 1, 1, 1), &c, 1, 1);
    check::<f32>(&layout(SpKind::Lss, 4, 1, 1, 1), &c, 1, 1);
}

#[test]
fn composed_layouts_equal_ledger() {
    let c = cfg(16, 3, 8);
    check::<f64>(&layout(SpKind::Ulysses, 2, 2, 1, 1), &c, 2, 2);
    check::<f64>(&layout(SpKind::Lss, 2, 1, 2, 1), &c, 2, 1);
    check::<f64>(&layout(SpKind::Ulysses, 1, 2, 2, 2), &c, 4, 1);
    check::<f32>(&layout(SpKind::Lss, 2, 1, 1, 2), &c, 2, 1);
    let mut l = layout(SpKind::Ulysses, 2, 1, 1, 2);
    l.zero = true;
    check::<f64>(&l, &c, 2, 2);
    let mut l = layout(SpKind::Lss, 1, 1, 3, 1);
    l.micro_batches = 3;
    check::<f64>(&l, &c, 3, 1);
}

#[test]
fn single_rank_predicts_nothing() {
    let c = cfg(16, 2, 8);
    let p = comm_predict(&ParallelLayout::single(), &c, 2, 8).unwrap();
    assert!(p.per_layer.is_empty());
    assert_eq!(p.total_bytes(), 0);
    assert_eq!(p.to_csv().lines().count(), 1);
}

#[test]
fn per_layer_laws() {
    let c = cfg(32, 2, 16);
    let (s, d, w) = (64u64, 32u64, 4u64);
    for p in [2u64, 4] {
        let u = comm_predict(&layout(SpKind::Ulysses, p as usize, 1, 1, 1), &c, 1, 4).unwrap();
        assert_eq!(u.per_layer[0].bytes_per_rank, 8 * s * d * w * (p - 1) / (p * p));
        let l = comm_predict(&layout(SpKind::Lss, p as usize, 1, 1, 1), &c, 1, 4).unwrap();
        let kv = 2 * s * d * w * (p - 1) / p;
        assert_eq!(l.per_layer[0].bytes_per_rank, kv);
        assert_eq!(l.per_layer[1].bytes_per_rank, kv);
        assert_eq!(u.per_layer[0].bytes_per_rank * p, 4 * kv);
    }
}

#[test]
fn prediction_csv_has_one_row_per_stream() {
    let c = cfg(16, 3, 8);
    let p = comm_predict(&layout(SpKind::Ulysses, 2, 1, 2, 1), &c, 2, 8).unwrap();
    let csv = p.to_csv();
    assert!(csv.starts_with("strategy,degree,layers,collective,calls,bytes_per_rank\n"));
    let rows: usize = p.stages.iter().map(|s| s.calls.len()).sum();
    assert_eq!(csv.lines().count(), rows + 1);
    assert!(csv.contains("ulysses,2,2,all_to_all,16,"));
}

#[test]
fn flops_and_time() {
    let i = CostInputs::new(84_000_000, 1_000_000_000, 1e14, 8).unwrap();
    assert_eq!(total_flops(&i), 6 * 84_000_000u128 * 1_000_000_000);
    let t = train_time(&i);
    assert!((t - total_flops(&i) as f64 / (1e14 * 8.0)).abs() / t < 1e-12);
    // Large values do not overflow.
    let big = CostInputs::new(u64::MAX / 8, u64::MAX / 8, 1.0, 1).unwrap();
    assert!(total_flops(&big) > u64::MAX as u128);
}

#[test]
fn cost_input_errors() {
    assert!(CostInputs::new(0, 10, 1.0, 1).is_err());
    assert!(CostInputs::new(10, 10, 0.0, 1).is_err());
    assert!(CostInputs::new(10, 10, 1.0, 0).is_err());
    let mut i = CostInputs::new(10, 20, 1.0, 1).unwrap();
    i.gamma = 3.0;
    assert!(matches!(
        i.validate(),
        Err(Error::Config { invariant: "gamma-consistency", .. })
    ));
    assert!(CostInputs::from_gamma(0.0, 10, 1.0, 1).is_err());
}

#[test]
fn curves_csv() {
    let csv = emit_cost_curves(&[1_000, 2_000], &[10, 20, 30], 1e12, 4).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "P,D,flops,time_s");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("10,1000,60000,"));
    assert!(emit_cost_curves(&[], &[1], 1.0, 1).is_err());
}

fn measured_peak(layout: &ParallelLayout, c: &ViTConfig, n: usize) -> (u64, u64) {
    let params = ViTParams::<f64>::init(c, 1).unwrap();
    let run = run_layout(layout, c, &params, &[batch::<f64>(c, n)], &Optimizer::default()).unwrap();
    let local = n / layout.dp;
    (run.peak_scratch as u64, attention_scratch_reals(c, layout, local))
}

#[test]
fn scratch_estimate_tracks_meter() {
    let c = cfg(16, 2, 8);
    for kernel in [AttentionKernel::Naive, AttentionKernel::Tiled { block_q: 4, block_k: 4 }] {
        for kind in [SpKind::Ulysses, SpKind::Lss] {
            for (sp, pp) in [(1, 1), (2, 1), (2, 2)] {
                let mut l = layout(kind, sp, 1, pp, 1);
                l.kernel = kernel;
                let (measured, est) = measured_peak(&l, &c, 2);
                assert!(measured > 0);
                let ratio = est as f64 / measured as f64;
                assert!((0.5..=2.0).contains(&ratio), "{kernel:?} {}: est {est} measured {measured}", l.label());
            }
        }
    }
}

#[test]
fn tiled_memory_grows_linearly() {
    let opt = Optimizer::default();
    let naive = ParallelLayout::single();
    let mut tiled = naive;
    tiled.kernel = AttentionKernel::Tiled { block_q: 16, block_k: 16 };
    let mut prev: Option<(u64, u64)> = None;
    for img in [32, 64, 128] {
        let c = ViTConfig { img_h: img, img_w: img, ..cfg(16, 2, 8) };
        let n = memory_estimate(&c, &naive, 1, &opt, 4).unwrap().attention_scratch;
        let t = memory_estimate(&c, &tiled, 1, &opt, 4).unwrap().activations
            + memory_estimate(&c, &tiled, 1, &opt, 4).unwrap().attention_scratch;
        if let Some((pn, pt)) = prev {
            // Doubling the side quadruples S.
            assert!(n as f64 / pn as f64 > 15.0);
            assert!((t as f64 / pt as f64) < 4.5);
        }
        prev = Some((n, t));
    }
}

#[test]
fn zero_shrinks_optimizer_memory() {
    let c = cfg(16, 2, 8);
    let adam = Optimizer::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let plain = memory_estimate(&c, &layout(SpKind::Ulysses, 1, 1, 1, 4), 1, &adam, 4).unwrap();
    let mut l = layout(SpKind::Ulysses, 1, 1, 1, 4);
    l.zero = true;
    let zero = memory_estimate(&c, &l, 1, &adam, 4).unwrap();
    assert_eq!(plain.params, zero.params);
    assert!(zero.optimizer * 4 >= plain.optimizer);
    assert!(zero.optimizer * 4 < plain.optimizer + 4 * 8 * 4);
    let sgd = memory_estimate(&c, &l, 1, &Optimizer::default(), 4).unwrap();
    assert_eq!(sgd.optimizer, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn time_scales_quadratically_in_p(p in 1u64..1_000_000, gamma in 1u64..100, n in 1u64..64) {
        let a = CostInputs::new(p, gamma * p, 1e12, n).unwrap();
        let b = CostInputs::new(2 * p, gamma * 2 * p, 1e12, n).unwrap();
        prop_assert_eq!(total_flops(&b), 4 * total_flops(&a));
        let r = train_time(&b) / train_time(&a);
        prop_assert!((r - 4.0).abs() < 1e-9);
        let c = CostInputs::new(p, gamma * p, 1e12, 2 * n).unwrap();
        prop_assert!((train_time(&a) / train_time(&c) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn degree_one_is_silent(depth in 0usize..4, b in 1usize..4) {
        let c = cfg(16, depth, 8);
        let p = comm_predict(&ParallelLayout::single(), &c, b, 4).unwrap();
        prop_assert_eq!(p.total_bytes(), 0);
    }

    #[test]
    fn ulysses_to_lss_ratio(k in 1u32..3, b in 1usize..5, depth in 1usize..4) {
        let c = cfg(32, depth, 16);
        let p = 2usize.pow(k);
        let u = comm_predict(&layout(SpKind::Ulysses, p, 1, 1, 1), &c, b, 4).unwrap();
        let l = comm_predict(&layout(SpKind::Lss, p, 1, 1, 1), &c, b, 4).unwrap();
        let ub = u.per_layer[0].bytes_per_rank;
        let lb: u64 = l.per_layer.iter().map(|x| x.bytes_per_rank).sum();
        // Per rank, Ulysses moves 2/p of what LSS moves.
        prop_assert_eq!(ub * p as u64, 2 * lb);
    }
}
