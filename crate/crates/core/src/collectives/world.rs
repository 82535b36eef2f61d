use std::any::Any;
use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use super::ledger::{Collective, CommLedger, RankLedger};
use super::{GroupKind, WorldSpec};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

type Payload = Arc<dyn Any + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
struct OpDesc {
    kind: Collective,
    root: Option<usize>,
}

#[derive(Default)]
struct Slot {
    round: u64,
    op: Option<OpDesc>,
    deposits: Vec<Option<Payload>>,
    tags: Vec<Option<String>>,
    arrived: usize,
    results: Option<Arc<Vec<Payload>>>,
    readers_left: usize,
}

struct State {
    slots: HashMap<(GroupKind, usize), Slot>,
    mailboxes: HashMap<(usize, usize), VecDeque<Payload>>,
    running: usize,
    blocked: usize,
    epoch: u64,
    waiting_on: Vec<String>,
    failure: Option<String>,
}

struct Shared {
    state: Mutex<State>,
    cv: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn changed(&self, st: &mut State) {
        st.epoch += 1;
        st.blocked = 0;
        self.cv.notify_all();
    }

    fn fail(&self, st: &mut State, msg: String) -> Error {
        if st.failure.is_none() {
            st.failure = Some(msg.clone());
        }
        self.changed(st);
        Error::Deadlock(st.failure.clone().unwrap_or(msg))
    }

    /// Block until `ready` holds. Declares a deadlock when every live rank
    /// is blocked and none of their conditions can become true.
    fn wait_until<'a>(
        &'a self,
        mut st: MutexGuard<'a, State>,
        me: usize,
        what: &str,
        mut ready: impl FnMut(&mut State) -> bool,
    ) -> Result<MutexGuard<'a, State>> {
        let mut counted = None;
        loop {
            if let Some(msg) = &st.failure {
                return Err(Error::Deadlock(msg.clone()));
            }
            if ready(&mut st) {
                st.waiting_on[me].clear();
                return Ok(st);
            }
            if counted != Some(st.epoch) {
                counted = Some(st.epoch);
                st.blocked += 1;
                st.waiting_on[me] = what.to_string();
                if st.blocked >= st.running {
                    let stuck: Vec<String> = st
                        .waiting_on
                        .iter()
                        .enumerate()
                        .filter(|(_, w)| !w.is_empty())
                        .map(|(r, w)| format!("rank {r} waiting in {w}"))
                        .collect();
                    let msg = format!("no rank can make progress: {}", stuck.join("; "));
                    return Err(self.fail(&mut st, msg));
                }
            }
            st = self.cv.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }
}

/// Per-rank handle to the simulated world. Confined to its rank's worker.
pub struct RankContext<'w> {
    rank: usize,
    spec: WorldSpec,
    shared: &'w Shared,
    tags: Vec<String>,
    ledger: RankLedger,
    seq: HashMap<(GroupKind, usize), u64>,
}

impl<'w> RankContext<'w> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world(&self) -> &WorldSpec {
        &self.spec
    }

    /// This rank's index within `group`.
    pub fn group_rank(&self, group: GroupKind) -> usize {
        self.spec.group_rank(self.rank, group)
    }

    pub fn group_size(&self, group: GroupKind) -> usize {
        self.spec.group_size(group)
    }

    pub fn push_tag(&mut self, tag: impl Into<String>) {
        self.tags.push(tag.into());
    }

    pub fn pop_tag(&mut self) {
        self.tags.pop();
    }

    /// Run `f` with `tag` pushed on the attribution stack.
    pub fn with_tag<R>(&mut self, tag: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push_tag(tag);
        let out = f(self);
        self.pop_tag();
        out
    }

    pub fn current_tag(&self) -> String {
        if self.tags.is_empty() {
            "untagged".to_string()
        } else {
            self.tags.join("/")
        }
    }

    fn record(&mut self, kind: Collective, group: GroupKind, sent: usize, recv: usize) {
        let tag = self.current_tag();
        self.ledger.record(kind, group, tag, sent as u64, recv as u64);
    }

    /// Deposit a payload in the group's slot and return every member's
    /// deposit in group-rank order once all have arrived.
    fn exchange(
        &mut self,
        group: GroupKind,
        op: OpDesc,
        payload: Payload,
    ) -> Result<Arc<Vec<Payload>>> {
        let size = self.spec.group_size(group);
        let instance = self.spec.group_instance(self.rank, group);
        let gi = self.spec.group_rank(self.rank, group);
        let key = (group, instance);
        let round = {
            let r = self.seq.entry(key).or_insert(0);
            *r += 1;
            *r - 1
        };
        let tag = self.current_tag();
        let what = format!("{} on {group} [{tag}]", op.kind);
        let shared = self.shared;
        let me = self.rank;

        let st = shared.lock();
        let mut st = shared.wait_until(st, me, &what, |st| {
            let slot = st.slots.entry(key).or_default();
            slot.round == round && slot.results.is_none()
        })?;
        {
            let slot = st.slots.get_mut(&key).expect("slot exists");
            if slot.deposits.len() != size {
                slot.deposits = vec![None; size];
                slot.tags = vec![None; size];
            }
            if let Some(existing) = &slot.op {
                if *existing != op {
                    let others: Vec<String> = slot
                        .tags
                        .iter()
                        .enumerate()
                        .filter_map(|(i, t)| t.as_ref().map(|t| format!("member {i} at {t}")))
                        .collect();
                    let msg = format!(
                        "collective mismatch on {group}: rank {me} called {} at [{tag}] while {} is pending ({})",
                        op.kind,
                        existing.kind,
                        others.join(", ")
                    );
                    return Err(shared.fail(&mut st, msg));
                }
            } else {
                slot.op = Some(op);
            }
            slot.deposits[gi] = Some(payload);
            slot.tags[gi] = Some(tag);
            slot.arrived += 1;
            if slot.arrived == size {
                let all: Vec<Payload> = slot
                    .deposits
                    .iter_mut()
                    .map(|d| d.take().expect("every member deposited"))
                    .collect();
                slot.results = Some(Arc::new(all));
                slot.readers_left = size;
                slot.arrived = 0;
                slot.op = None;
                slot.tags.iter_mut().for_each(|t| *t = None);
            }
        }
        shared.changed(&mut st);

        let mut st = shared.wait_until(st, me, &what, |st| {
            let slot = st.slots.get(&key).expect("slot exists");
            slot.round == round && slot.results.is_some()
        })?;
        let slot = st.slots.get_mut(&key).expect("slot exists");
        let results = slot.results.clone().expect("results ready");
        slot.readers_left -= 1;
        if slot.readers_left == 0 {
            slot.results = None;
            slot.round += 1;
        }
        shared.changed(&mut st);
        Ok(results)
    }

    fn typed<T: Scalar>(p: &Payload) -> Result<&Vec<Tensor<T>>> {
        p.downcast_ref::<Vec<Tensor<T>>>()
            .ok_or_else(|| Error::Group("members exchanged different element types".into()))
    }

    /// Sum over the group, reduced in ascending group-rank order.
    pub fn all_reduce_sum<T: Scalar>(&mut self, group: GroupKind, x: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.group_size(group);
        let op = OpDesc {
            kind: Collective::AllReduce,
            root: None,
        };
        let all = self.exchange(group, op, Arc::new(vec![x.clone()]))?;
        let mut acc: Option<Tensor<T>> = None;
        for dep in all.iter() {
            let t = &Self::typed::<T>(dep)?[0];
            match &mut acc {
                None => acc = Some(t.clone()),
                Some(a) => a.add_assign(t)?,
            }
        }
        let w = std::mem::size_of::<T>();
        self.record(
            Collective::AllReduce,
            group,
            x.numel() * w * (p - 1),
            x.numel() * w * (p - 1),
        );
        Ok(acc.expect("group is non-empty"))
    }

    /// Every member's tensor, in group-rank order.
    pub fn all_gather<T: Scalar>(&mut self, group: GroupKind, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let me = self.group_rank(group);
        let op = OpDesc {
            kind: Collective::AllGather,
            root: None,
        };
        let all = self.exchange(group, op, Arc::new(vec![x.clone()]))?;
        let mut out = Vec::with_capacity(all.len());
        for dep in all.iter() {
            out.push(Self::typed::<T>(dep)?[0].clone());
        }
        let p = out.len();
        let w = std::mem::size_of::<T>();
        let recv: usize = out
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != me)
            .map(|(_, t)| t.numel() * w)
            .sum();
        self.record(Collective::AllGather, group, x.numel() * w * (p - 1), recv);
        Ok(out)
    }

    /// `chunks[j]` is this rank's contribution to member `j`; returns the
    /// rank-ordered sum of every member's chunk for this rank.
    pub fn reduce_scatter_sum<T: Scalar>(
        &mut self,
        group: GroupKind,
        chunks: Vec<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let p = self.group_size(group);
        if chunks.len() != p {
            return Err(Error::Group(format!(
                "reduce_scatter needs {p} chunks, got {}",
                chunks.len()
            )));
        }
        let me = self.group_rank(group);
        let w = std::mem::size_of::<T>();
        let sent: usize = chunks
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != me)
            .map(|(_, c)| c.numel() * w)
            .sum();
        let op = OpDesc {
            kind: Collective::ReduceScatter,
            root: None,
        };
        let all = self.exchange(group, op, Arc::new(chunks))?;
        let mut acc: Option<Tensor<T>> = None;
        let mut recv = 0;
        for (i, dep) in all.iter().enumerate() {
            let t = &Self::typed::<T>(dep)?[me];
            if i != me {
                recv += t.numel() * w;
            }
            match &mut acc {
                None => acc = Some(t.clone()),
                Some(a) => a.add_assign(t)?,
            }
        }
        self.record(Collective::ReduceScatter, group, sent, recv);
        Ok(acc.expect("group is non-empty"))
    }

    /// Root's tensor on every member. Non-root members pass `None`.
    pub fn broadcast<T: Scalar>(
        &mut self,
        group: GroupKind,
        root: usize,
        x: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let p = self.group_size(group);
        if root >= p {
            return Err(Error::Group(format!("broadcast root {root} outside group of {p}")));
        }
        let me = self.group_rank(group);
        let mine: Vec<Tensor<T>> = match (me == root, x) {
            (true, Some(t)) => vec![t.clone()],
            (true, None) => return Err(Error::Group("broadcast root supplied no tensor".into())),
            (false, _) => Vec::new(),
        };
        let op = OpDesc {
            kind: Collective::Broadcast,
            root: Some(root),
        };
        let all = self.exchange(group, op, Arc::new(mine))?;
        let t = Self::typed::<T>(&all[root])?[0].clone();
        let w = std::mem::size_of::<T>();
        let n = t.numel() * w;
        if me == root {
            self.record(Collective::Broadcast, group, n * (p - 1), 0);
        } else {
            self.record(Collective::Broadcast, group, 0, n);
        }
        Ok(t)
    }

    /// `shards[j]` goes to member `j`; result `[i]` is what member `i` sent here.
    pub fn all_to_all<T: Scalar>(
        &mut self,
        group: GroupKind,
        shards: Vec<Tensor<T>>,
    ) -> Result<Vec<Tensor<T>>> {
        let p = self.group_size(group);
        if shards.len() != p {
            return Err(Error::Group(format!(
                "all_to_all needs {p} shards, got {}",
                shards.len()
            )));
        }
        if shards.iter().any(|s| s.shape() != shards[0].shape()) {
            return Err(Error::shape("all_to_all shards must share one shape"));
        }
        let me = self.group_rank(group);
        let w = std::mem::size_of::<T>();
        let shard_bytes = shards[0].numel() * w;
        let op = OpDesc {
            kind: Collective::AllToAll,
            root: None,
        };
        let all = self.exchange(group, op, Arc::new(shards))?;
        let mut out = Vec::with_capacity(p);
        let mut recv = 0;
        for (i, dep) in all.iter().enumerate() {
            let t = Self::typed::<T>(dep)?[me].clone();
            if i != me {
                recv += t.numel() * w;
            }
            out.push(t);
        }
        self.record(Collective::AllToAll, group, shard_bytes * (p - 1), recv);
        Ok(out)
    }

    /// Non-blocking point-to-point send to member `dst` of `group`.
    pub fn send<T: Scalar>(&mut self, group: GroupKind, dst: usize, x: &Tensor<T>) -> Result<()> {
        let target = self.spec.member(self.rank, group, dst)?;
        let shared = self.shared;
        let mut st = shared.lock();
        if let Some(msg) = &st.failure {
            return Err(Error::Deadlock(msg.clone()));
        }
        let payload: Payload = Arc::new(vec![x.clone()]);
        st.mailboxes
            .entry((self.rank, target))
            .or_default()
            .push_back(payload);
        shared.changed(&mut st);
        drop(st);
        self.record(Collective::Send, group, x.numel() * std::mem::size_of::<T>(), 0);
        Ok(())
    }

    /// Blocking receive of the next message from member `src` of `group`.
    pub fn recv<T: Scalar>(&mut self, group: GroupKind, src: usize) -> Result<Tensor<T>> {
        let source = self.spec.member(self.rank, group, src)?;
        let key = (source, self.rank);
        let what = format!("recv from rank {source} on {group} [{}]", self.current_tag());
        let shared = self.shared;
        let st = shared.lock();
        let mut st = shared.wait_until(st, self.rank, &what, |st| {
            st.mailboxes.get(&key).is_some_and(|q| !q.is_empty())
        })?;
        let payload = st
            .mailboxes
            .get_mut(&key)
            .and_then(|q| q.pop_front())
            .expect("message present");
        shared.changed(&mut st);
        drop(st);
        let t = Self::typed::<T>(&payload)?[0].clone();
        self.record(Collective::Recv, group, 0, t.numel() * std::mem::size_of::<T>());
        Ok(t)
    }
}

/// Per-rank return values plus the merged communication ledger.
#[derive(Debug)]
pub struct WorldOutput<R> {
    pub results: Vec<R>,
    pub ledger: CommLedger,
}

/// Run `program` on every rank of `spec`, one worker thread per rank.
///
/// If any rank fails, the first failure that is not a consequential deadlock
/// is returned (lowest rank wins among equals).
pub fn spawn_world<R, F>(spec: WorldSpec, program: F) -> Result<WorldOutput<R>>
where
    R: Send,
    F: Fn(&mut RankContext<'_>) -> Result<R> + Sync,
{
    let n = spec.world_size();
    let shared = Shared {
        state: Mutex::new(State {
            slots: HashMap::new(),
            mailboxes: HashMap::new(),
            running: n,
            blocked: 0,
            epoch: 0,
            waiting_on: vec![String::new(); n],
            failure: None,
        }),
        cv: Condvar::new(),
    };

    let outcomes: Vec<(Result<R>, RankLedger)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .map(|rank| {
                let shared = &shared;
                let program = &program;
                let spec = spec;
                scope.spawn(move || {
                    let mut ctx = RankContext {
                        rank,
                        spec,
                        shared,
                        tags: Vec::new(),
                        ledger: RankLedger::default(),
                        seq: HashMap::new(),
                    };
                    let out = catch_unwind(AssertUnwindSafe(|| program(&mut ctx)));
                    let out = out.unwrap_or_else(|panic| {
                        let message = panic
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "unknown panic".into());
                        Err(Error::RankPanic { rank, message })
                    });
                    let mut st = shared.lock();
                    st.running -= 1;
                    st.waiting_on[rank].clear();
                    shared.changed(&mut st);
                    drop(st);
                    (out, ctx.ledger)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank worker never unwinds past catch_unwind"))
            .collect()
    });

    let mut results = Vec::with_capacity(n);
    let mut ledgers = Vec::with_capacity(n);
    let mut first_deadlock = None;
    let mut first_other = None;
    for (out, ledger) in outcomes {
        ledgers.push(ledger);
        match out {
            Ok(r) => results.push(r),
            Err(e @ Error::Deadlock(_)) => {
                first_deadlock.get_or_insert(e);
            }
            Err(e) => {
                first_other.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_other.or(first_deadlock) {
        return Err(e);
    }
    Ok(WorldOutput {
        results,
        ledger: CommLedger::new(spec, ledgers),
    })
}
