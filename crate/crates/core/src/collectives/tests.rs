use proptest::prelude::*;

use super::*;
use crate::numerics::{SeededRng, Tensor};

fn scalar(v: f64) -> Tensor<f64> {
    Tensor::scalar(v)
}

#[test]
fn single_rank_returns_id_and_empty_ledger() {
    let out = spawn_world(WorldSpec::flat(1).unwrap(), |ctx| Ok(ctx.rank())).unwrap();
    assert_eq!(out.results, vec![0]);
    assert!(out.ledger.is_empty());
}

#[test]
fn all_reduce_of_rank_ids() {
    let out = spawn_world(WorldSpec::flat(4).unwrap(), |ctx| {
        let r = ctx.all_reduce_sum(GroupKind::World, &scalar(ctx.rank() as f64))?;
        Ok(r.data()[0])
    })
    .unwrap();
    assert_eq!(out.results, vec![6.0; 4]);
    out.ledger.check_uniform().unwrap();
}

#[test]
fn mismatched_collectives_deadlock() {
    let err = spawn_world(WorldSpec::flat(2).unwrap(), |ctx| {
        let x = scalar(1.0);
        if ctx.rank() == 0 {
            ctx.with_tag("layer0", |ctx| ctx.all_gather(GroupKind::World, &x).map(|_| ()))
        } else {
            ctx.with_tag("layer1", |ctx| ctx.all_reduce_sum(GroupKind::World, &x).map(|_| ()))
        }
    })
    .unwrap_err();
    match err {
        Error::Deadlock(msg) => {
            assert!(msg.contains("layer0") && msg.contains("layer1"), "{msg}");
        }
        other => panic!("expected deadlock, got {other}"),
    }
}

#[test]
fn missing_peer_is_a_deadlock() {
    let err = spawn_world(WorldSpec::flat(3).unwrap(), |ctx| {
        if ctx.rank() != 2 {
            ctx.all_reduce_sum(GroupKind::World, &scalar(1.0))?;
        }
        Ok(())
    })
    .unwrap_err();
    assert!(matches!(err, Error::Deadlock(_)), "{err}");

    let err = spawn_world(WorldSpec::flat(2).unwrap(), |ctx| {
        let peer = 1 - ctx.rank();
        ctx.recv::<f64>(GroupKind::World, peer).map(|_| ())
    })
    .unwrap_err();
    assert!(matches!(err, Error::Deadlock(_)), "{err}");
}

#[test]
fn rank_error_beats_consequential_deadlock() {
    let err = spawn_world(WorldSpec::flat(2).unwrap(), |ctx| {
        if ctx.rank() == 1 {
            return Err(Error::Stage("boom".into()));
        }
        ctx.all_reduce_sum(GroupKind::World, &scalar(1.0)).map(|_| ())
    })
    .unwrap_err();
    assert!(matches!(err, Error::Stage(_)), "{err}");
}

#[test]
fn panics_are_reported() {
    let err = spawn_world(WorldSpec::flat(2).unwrap(), |ctx| {
        if ctx.rank() == 0 {
            panic!("bad rank");
        }
        Ok(())
    })
    .unwrap_err();
    assert!(matches!(err, Error::RankPanic { rank: 0, .. }), "{err}");
}

#[test]
fn all_to_all_definition_p2() {
    let out = spawn_world(WorldSpec::flat(2).unwrap(), |ctx| {
        let base = 10.0 * ctx.rank() as f64;
        let shards = vec![scalar(base), scalar(base + 1.0)];
        let got = ctx.all_to_all(GroupKind::World, shards)?;
        Ok(got.iter().map(|t| t.data()[0]).collect::<Vec<_>>())
    })
    .unwrap();
    // rank0 sent [a0, a1] = [0, 1], rank1 sent [b0, b1] = [10, 11]
    assert_eq!(out.results[0], vec![0.0, 10.0]);
    assert_eq!(out.results[1], vec![1.0, 11.0]);
}

#[test]
fn all_to_all_single_rank_is_identity() {
    let out = spawn_world(WorldSpec::flat(1).unwrap(), |ctx| {
        let x = SeededRng::new(1, 0).normal_tensor::<f64>(&[3, 2], 1.0);
        let got = ctx.all_to_all(GroupKind::World, vec![x.clone()])?;
        Ok(got[0] == x)
    })
    .unwrap();
    assert!(out.results[0]);
}

#[test]
fn all_to_all_rejects_ragged_shards() {
    let err = spawn_world(WorldSpec::flat(2).unwrap(), |ctx| {
        let shards = vec![Tensor::<f64>::zeros(&[2]), Tensor::<f64>::zeros(&[3])];
        ctx.all_to_all(GroupKind::World, shards).map(|_| ())
    })
    .unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

#[test]
fn all_gather_of_rank_scalars() {
    let out = spawn_world(WorldSpec::flat(3).unwrap(), |ctx| {
        let g = ctx.all_gather(GroupKind::World, &scalar(ctx.rank() as f64))?;
        Ok(g.iter().map(|t| t.data()[0]).collect::<Vec<_>>())
    })
    .unwrap();
    for r in out.results {
        assert_eq!(r, vec![0.0, 1.0, 2.0]);
    }
}

#[test]
fn reduce_scatter_then_all_gather_is_all_reduce() {
    let out = spawn_world(WorldSpec::flat(4).unwrap(), |ctx| {
        let x = SeededRng::new(5, ctx.rank() as u64).normal_tensor::<f64>(&[8, 3], 1.0);
        let full = ctx.all_reduce_sum(GroupKind::World, &x)?;
        let mine = ctx.reduce_scatter_sum(GroupKind::World, x.split_rows(4)?)?;
        let parts = ctx.all_gather(GroupKind::World, &mine)?;
        Ok((full, Tensor::concat_rows(&parts)?))
    })
    .unwrap();
    for (full, composed) in out.results {
        assert_eq!(full, composed);
    }
}

#[test]
fn broadcast_and_send_recv() {
    let out = spawn_world(WorldSpec::flat(3).unwrap(), |ctx| {
        let root_val = scalar(42.0);
        let b = ctx.broadcast(GroupKind::World, 1, (ctx.rank() == 1).then_some(&root_val))?;
        let next = (ctx.rank() + 1) % 3;
        let prev = (ctx.rank() + 2) % 3;
        ctx.send(GroupKind::World, next, &scalar(ctx.rank() as f64))?;
        let got = ctx.recv::<f64>(GroupKind::World, prev)?;
        Ok((b.data()[0], got.data()[0]))
    })
    .unwrap();
    assert_eq!(out.results, vec![(42.0, 2.0), (42.0, 0.0), (42.0, 1.0)]);
    out.ledger.check_uniform().unwrap();
}

#[test]
fn sub_groups_partition_ranks() {
    let spec = WorldSpec::new(2, 2, 2, 1).unwrap();
    for g in [GroupKind::Sp, GroupKind::Tp, GroupKind::Pp, GroupKind::Dp, GroupKind::World] {
        let mut seen = vec![0usize; spec.world_size()];
        let mut instances = std::collections::BTreeSet::new();
        for r in 0..spec.world_size() {
            let inst = spec.group_instance(r, g);
            if instances.insert(inst) {
                for m in spec.members(r, g) {
                    seen[m] += 1;
                }
            }
            assert!(spec.members(r, g).contains(&r));
        }
        assert!(seen.iter().all(|&c| c == 1), "{g}: {seen:?}");
    }
}

#[test]
fn groups_only_talk_within_themselves() {
    let spec = WorldSpec::new(2, 1, 1, 2).unwrap();
    let out = spawn_world(spec, |ctx| {
        let s = ctx.all_reduce_sum(GroupKind::Sp, &scalar(ctx.rank() as f64))?;
        let d = ctx.all_reduce_sum(GroupKind::Dp, &scalar(ctx.rank() as f64))?;
        Ok((s.data()[0], d.data()[0]))
    })
    .unwrap();
    // sp groups {0,1},{2,3}; dp groups {0,2},{1,3}
    assert_eq!(out.results, vec![(1.0, 2.0), (1.0, 4.0), (5.0, 2.0), (5.0, 4.0)]);
}

#[test]
fn ledger_tags_and_csv() {
    let out = spawn_world(WorldSpec::flat(2).unwrap(), |ctx| {
        let x = Tensor::<f32>::zeros(&[4]);
        ctx.with_tag("layer0", |ctx| {
            ctx.all_to_all(GroupKind::World, vec![x.clone(), x.clone()])
        })?;
        Ok(())
    })
    .unwrap();
    let csv = out.ledger.to_csv();
    assert_eq!(
        csv,
        "collective,group,layer_tag,calls,bytes_per_rank\nall_to_all,world,layer0,1,16\n"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn all_to_all_twice_restores(p in 1usize..6, rows in 1usize..4, seed in 0u64..100) {
        let out = spawn_world(WorldSpec::flat(p).unwrap(), |ctx| {
            let shards: Vec<Tensor<f64>> = (0..p)
                .map(|j| SeededRng::new(seed, (ctx.rank() * p + j) as u64).normal_tensor(&[rows, 2], 1.0))
                .collect();
            let once = ctx.all_to_all(GroupKind::World, shards.clone())?;
            let twice = ctx.all_to_all(GroupKind::World, once)?;
            Ok(twice == shards)
        }).unwrap();
        prop_assert!(out.results.iter().all(|&ok| ok));
    }

    #[test]
    fn ledger_conserves_bytes(p in 1usize..6, n in 1usize..5) {
        let out = spawn_world(WorldSpec::flat(p).unwrap(), |ctx| {
            let x = Tensor::<f64>::full(&[n * p, 1], ctx.rank() as f64);
            ctx.all_reduce_sum(GroupKind::World, &x)?;
            ctx.all_gather(GroupKind::World, &x)?;
            ctx.reduce_scatter_sum(GroupKind::World, x.split_rows(p)?)?;
            ctx.all_to_all(GroupKind::World, x.split_rows(p)?)?;
            ctx.broadcast(GroupKind::World, 0, (ctx.rank() == 0).then_some(&x))?;
            Ok(())
        }).unwrap();
        for c in [Collective::AllReduce, Collective::AllGather, Collective::ReduceScatter,
                  Collective::AllToAll, Collective::Broadcast] {
            let sent: u64 = out.ledger.ranks().iter().map(|r| r.total(c, GroupKind::World).bytes_sent).sum();
            let recv: u64 = out.ledger.ranks().iter().map(|r| r.total(c, GroupKind::World).bytes_recv).sum();
            prop_assert_eq!(sent, recv, "{}", c);
        }
        prop_assert!(out.ledger.check_uniform().is_ok());
    }

    #[test]
    fn results_independent_of_interleaving(p in 2usize..6, seed in 0u64..50) {
        let run = |jitter: bool| spawn_world(WorldSpec::flat(p).unwrap(), |ctx| {
            if jitter {
                std::thread::sleep(std::time::Duration::from_micros(((ctx.rank() * 37 + seed as usize) % 5) as u64 * 200));
            }
            let x = SeededRng::new(seed, ctx.rank() as u64).normal_tensor::<f32>(&[16, 1], 1.0);
            let s = ctx.all_reduce_sum(GroupKind::World, &x)?;
            let chunks = (0..p).map(|j| x.scale(j as f32 + 0.5)).collect();
            let rs = ctx.reduce_scatter_sum(GroupKind::World, chunks)?;
            Ok((s, rs))
        }).unwrap().results;
        prop_assert_eq!(run(false), run(true));
    }
}
