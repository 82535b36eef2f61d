use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::{GroupKind, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Collective {
    AllToAll,
    AllGather,
    ReduceScatter,
    AllReduce,
    Broadcast,
    Send,
    Recv,
}

impl Collective {
    pub fn is_point_to_point(self) -> bool {
        matches!(self, Collective::Send | Collective::Recv)
    }

    pub fn name(self) -> &'static str {
        match self {
            Collective::AllToAll => "all_to_all",
            Collective::AllGather => "all_gather",
            Collective::ReduceScatter => "reduce_scatter",
            Collective::AllReduce => "all_reduce",
            Collective::Broadcast => "broadcast",
            Collective::Send => "send",
            Collective::Recv => "recv",
        }
    }
}

impl fmt::Display for Collective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LedgerKey {
    pub collective: Collective,
    pub group: GroupKind,
    pub tag: String,
}

/// Calls and logical bytes moved off-rank (`bytes_sent`) or onto it (`bytes_recv`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerEntry {
    pub calls: u64,
    pub bytes_sent: u64,
    pub bytes_recv: u64,
}

/// One rank's view of its communication.
#[derive(Debug, Clone, Default)]
pub struct RankLedger {
    entries: BTreeMap<LedgerKey, LedgerEntry>,
}

impl RankLedger {
    pub(crate) fn record(
        &mut self,
        collective: Collective,
        group: GroupKind,
        tag: String,
        sent: u64,
        recv: u64,
    ) {
        let e = self
            .entries
            .entry(LedgerKey {
                collective,
                group,
                tag,
            })
            .or_default();
        e.calls += 1;
        e.bytes_sent += sent;
        e.bytes_recv += recv;
    }

    pub fn entries(&self) -> &BTreeMap<LedgerKey, LedgerEntry> {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Totals over every tag for one collective on one group.
    pub fn total(&self, collective: Collective, group: GroupKind) -> LedgerEntry {
        self.entries
            .iter()
            .filter(|(k, _)| k.collective == collective && k.group == group)
            .fold(LedgerEntry::default(), |mut acc, (_, e)| {
                acc.calls += e.calls;
                acc.bytes_sent += e.bytes_sent;
                acc.bytes_recv += e.bytes_recv;
                acc
            })
    }

    /// Totals keyed by (collective, group), summed over tags.
    pub fn totals(&self) -> BTreeMap<(Collective, GroupKind), LedgerEntry> {
        let mut out: BTreeMap<(Collective, GroupKind), LedgerEntry> = BTreeMap::new();
        for (k, e) in &self.entries {
            let acc = out.entry((k.collective, k.group)).or_default();
            acc.calls += e.calls;
            acc.bytes_sent += e.bytes_sent;
            acc.bytes_recv += e.bytes_recv;
        }
        out
    }

    /// Calls whose tag starts with `prefix`.
    pub fn calls_tagged(&self, collective: Collective, group: GroupKind, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|(k, _)| k.collective == collective && k.group == group && k.tag.starts_with(prefix))
            .map(|(_, e)| e.calls)
            .sum()
    }

    pub fn bytes_sent(&self) -> u64 {
        self.entries.values().map(|e| e.bytes_sent).sum()
    }
}

/// Merged row of the ledger CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergedEntry {
    pub calls: u64,
    pub bytes_per_rank: u64,
    pub ranks: usize,
}

/// Communication record of a whole world, merged at teardown.
#[derive(Debug, Clone)]
pub struct CommLedger {
    spec: WorldSpec,
    ranks: Vec<RankLedger>,
}

impl CommLedger {
    pub(crate) fn new(spec: WorldSpec, ranks: Vec<RankLedger>) -> Self {
        Self { spec, ranks }
    }

    pub fn world(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn rank(&self, r: usize) -> &RankLedger {
        &self.ranks[r]
    }

    pub fn ranks(&self) -> &[RankLedger] {
        &self.ranks
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.iter().all(RankLedger::is_empty)
    }

    pub fn total_bytes_sent(&self) -> u64 {
        self.ranks.iter().map(RankLedger::bytes_sent).sum()
    }

    /// Keyed aggregation over ranks: per key, the largest per-rank call count
    /// and byte total among the ranks that recorded it.
    pub fn merged(&self) -> BTreeMap<LedgerKey, MergedEntry> {
        let mut out: BTreeMap<LedgerKey, MergedEntry> = BTreeMap::new();
        for rl in &self.ranks {
            for (k, e) in &rl.entries {
                let m = out.entry(k.clone()).or_insert(MergedEntry {
                    calls: 0,
                    bytes_per_rank: 0,
                    ranks: 0,
                });
                m.calls = m.calls.max(e.calls);
                m.bytes_per_rank = m.bytes_per_rank.max(e.bytes_sent);
                m.ranks += 1;
            }
        }
        out
    }

    /// Every member of a group instance must record the same calls (and, for
    /// symmetric collectives, the same bytes) under each key.
    pub fn check_uniform(&self) -> Result<(), String> {
        for (r, rl) in self.ranks.iter().enumerate() {
            for (k, e) in &rl.entries {
                if k.collective.is_point_to_point() {
                    continue;
                }
                let members = self.spec.members(r, k.group);
                for m in members {
                    let other = self.ranks[m].entries.get(k).copied().unwrap_or_default();
                    let same_bytes = k.collective == Collective::Broadcast
                        || (other.bytes_sent == e.bytes_sent && other.bytes_recv == e.bytes_recv);
                    if other.calls != e.calls || !same_bytes {
                        return Err(format!(
                            "{} on {} [{}]: rank {r} has {e:?}, rank {m} has {other:?}",
                            k.collective, k.group, k.tag
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("collective,group,layer_tag,calls,bytes_per_rank\n");
        for (k, m) in self.merged() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                k.collective, k.group, k.tag, m.calls, m.bytes_per_rank
            ));
        }
        out
    }
}
