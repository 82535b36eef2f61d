//! Simulated multi-rank runtime with MPI-style collectives and a
//! communication ledger.
//!
//! Ranks run as worker threads and synchronise only at collective calls.
//! Reductions always accumulate in ascending group-rank order, so a program's
//! results do not depend on thread interleaving.

mod ledger;
mod world;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use ledger::{Collective, CommLedger, LedgerEntry, LedgerKey, MergedEntry, RankLedger};
pub use world::{spawn_world, RankContext, WorldOutput};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    World,
    Sp,
    Tp,
    Pp,
    Dp,
}

impl GroupKind {
    pub fn name(self) -> &'static str {
        match self {
            GroupKind::World => "world",
            GroupKind::Sp => "sp",
            GroupKind::Tp => "tp",
            GroupKind::Pp => "pp",
            GroupKind::Dp => "dp",
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of the simulated world: `world_size = sp * tp * pp * dp`.
///
/// Ranks are laid out with sp fastest, then tp, pp and dp:
/// `rank = sp_r + sp * (tp_r + tp * (pp_r + pp * dp_r))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub sp: usize,
    pub tp: usize,
    pub pp: usize,
    pub dp: usize,
}

/// Coordinates of a rank along each parallel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankCoords {
    pub sp: usize,
    pub tp: usize,
    pub pp: usize,
    pub dp: usize,
}

impl WorldSpec {
    pub fn new(sp: usize, tp: usize, pp: usize, dp: usize) -> Result<Self> {
        if sp == 0 || tp == 0 || pp == 0 || dp == 0 {
            return Err(Error::config(
                "degree-factorization",
                format!("degrees must be positive, got sp={sp} tp={tp} pp={pp} dp={dp}"),
            ));
        }
        Ok(Self { sp, tp, pp, dp })
    }

    /// `n` ranks with no structure beyond the world group.
    pub fn flat(n: usize) -> Result<Self> {
        Self::new(1, 1, 1, n)
    }

    pub fn world_size(&self) -> usize {
        self.sp * self.tp * self.pp * self.dp
    }

    pub fn coords(&self, rank: usize) -> RankCoords {
        RankCoords {
            sp: rank % self.sp,
            tp: (rank / self.sp) % self.tp,
            pp: (rank / (self.sp * self.tp)) % self.pp,
            dp: rank / (self.sp * self.tp * self.pp),
        }
    }

    pub fn rank_of(&self, c: RankCoords) -> usize {
        c.sp + self.sp * (c.tp + self.tp * (c.pp + self.pp * c.dp))
    }

    pub fn group_size(&self, group: GroupKind) -> usize {
        match group {
            GroupKind::World => self.world_size(),
            GroupKind::Sp => self.sp,
            GroupKind::Tp => self.tp,
            GroupKind::Pp => self.pp,
            GroupKind::Dp => self.dp,
        }
    }

    pub fn group_rank(&self, rank: usize, group: GroupKind) -> usize {
        let c = self.coords(rank);
        match group {
            GroupKind::World => rank,
            GroupKind::Sp => c.sp,
            GroupKind::Tp => c.tp,
            GroupKind::Pp => c.pp,
            GroupKind::Dp => c.dp,
        }
    }

    /// Identifier of the group instance `rank` belongs to: its rank with the
    /// group's own coordinate zeroed.
    pub fn group_instance(&self, rank: usize, group: GroupKind) -> usize {
        let mut c = self.coords(rank);
        match group {
            GroupKind::World => return 0,
            GroupKind::Sp => c.sp = 0,
            GroupKind::Tp => c.tp = 0,
            GroupKind::Pp => c.pp = 0,
            GroupKind::Dp => c.dp = 0,
        }
        self.rank_of(c)
    }

    /// Global rank of member `index` of `rank`'s group.
    pub fn member(&self, rank: usize, group: GroupKind, index: usize) -> Result<usize> {
        let size = self.group_size(group);
        if index >= size {
            return Err(Error::Group(format!(
                "member {index} outside {group} group of size {size}"
            )));
        }
        let mut c = self.coords(rank);
        match group {
            GroupKind::World => return Ok(index),
            GroupKind::Sp => c.sp = index,
            GroupKind::Tp => c.tp = index,
            GroupKind::Pp => c.pp = index,
            GroupKind::Dp => c.dp = index,
        }
        Ok(self.rank_of(c))
    }

    /// All members of `rank`'s group in group-rank order.
    pub fn members(&self, rank: usize, group: GroupKind) -> Vec<usize> {
        (0..self.group_size(group))
            .map(|i| self.member(rank, group, i).expect("index in range"))
            .collect()
    }
}

#[cfg(test)]
mod tests;
