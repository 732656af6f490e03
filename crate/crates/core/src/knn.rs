//! Nearest-neighbor chunk retrieval over demonstration proprio states.

use std::collections::{BTreeMap, HashSet};

use crate::wiser::DemoDataset;
use crate::world::{Action, Gripper, Proprio, GRID_H, GRID_W};
use crate::Error;

/// Penalty for a gripper-state mismatch: the squared grid diagonal, so gripper
/// state dominates any same-gripper cell distance.
pub const GRIPPER_PENALTY: i32 = GRID_W * GRID_W + GRID_H * GRID_H;

pub fn proprio_distance(a: Proprio, b: Proprio) -> i32 {
    a.cell.dist2(b.cell) + if a.gripper == b.gripper { 0 } else { GRIPPER_PENALTY }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub chunk: Vec<Action>,
    pub traj: u32,
    pub step: u32,
    pub distance: i32,
}

/// Every (trajectory, step) pair bucketed by its proprio state.
///
/// Steps run from 0 to the trajectory length inclusive; chunks that run past
/// the end are padded with no-ops.
#[derive(Clone, Debug)]
pub struct ProprioIndex {
    horizon: usize,
    buckets: BTreeMap<(i32, i32, u8), Vec<(usize, u32)>>,
}

fn key(p: Proprio) -> (i32, i32, u8) {
    (p.cell.x, p.cell.y, matches!(p.gripper, Gripper::Closed) as u8)
}

fn unkey(k: (i32, i32, u8)) -> Proprio {
    Proprio {
        cell: crate::world::Cell::new(k.0, k.1),
        gripper: if k.2 == 1 { Gripper::Closed } else { Gripper::Open },
    }
}

impl ProprioIndex {
    pub fn build(ds: &DemoDataset, horizon: usize) -> Result<Self, Error> {
        if horizon == 0 {
            return Err(Error::Precondition("horizon must be at least 1".into()));
        }
        let mut buckets: BTreeMap<_, Vec<(usize, u32)>> = BTreeMap::new();
        for (ti, t) in ds.trajectories.iter().enumerate() {
            for (k, p) in t.proprio.iter().enumerate() {
                buckets.entry(key(*p)).or_default().push((ti, k as u32));
            }
        }
        if buckets.is_empty() {
            return Err(Error::Precondition("dataset has no transitions to retrieve from".into()));
        }
        Ok(Self { horizon, buckets })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Top-`n` distinct chunks ranked by (distance, trajectory id, step).
    pub fn query(&self, ds: &DemoDataset, at: Proprio, n: usize) -> Result<Vec<Candidate>, Error> {
        if n == 0 {
            return Err(Error::Precondition("N must be at least 1".into()));
        }
        let mut by_distance: BTreeMap<i32, Vec<(u32, u32, usize)>> = BTreeMap::new();
        for (k, entries) in &self.buckets {
            let d = proprio_distance(at, unkey(*k));
            let slot = by_distance.entry(d).or_default();
            slot.extend(entries.iter().map(|&(ti, step)| (ds.trajectories[ti].id, step, ti)));
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        for (d, mut group) in by_distance {
            group.sort_unstable();
            for (id, step, ti) in group {
                let chunk = ds.trajectories[ti].chunk(step as usize, self.horizon);
                if seen.insert(chunk.clone()) {
                    out.push(Candidate { chunk, traj: id, step, distance: d });
                    if out.len() == n {
                        return Ok(out);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Straight scan over all pairs; the reference the index must agree with.
pub fn brute_force(ds: &DemoDataset, at: Proprio, n: usize, horizon: usize) -> Vec<Candidate> {
    let mut all: Vec<(i32, u32, u32, usize)> = Vec::new();
    for (ti, t) in ds.trajectories.iter().enumerate() {
        for (k, p) in t.proprio.iter().enumerate() {
            all.push((proprio_distance(at, *p), t.id, k as u32, ti));
        }
    }
    all.sort();
    let mut out: Vec<Candidate> = Vec::new();
    for (d, id, step, ti) in all {
        let chunk = ds.trajectories[ti].chunk(step as usize, horizon);
        if out.iter().all(|c| c.chunk != chunk) {
            out.push(Candidate { chunk, traj: id, step, distance: d });
            if out.len() == n {
                break;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;
    use crate::wiser::{collect_demos, collect_demos_for, generate_suite, BenchConfig};
    use crate::world::{Cell, RETRACT};
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeSet;

    #[test]
    fn index_matches_brute_force_on_random_queries() {
        let (train, _) = generate_suite(&BenchConfig { categories: 3 }, &Vocabulary::standard(), 2).unwrap();
        let ds = collect_demos(&train, 2, 4).unwrap();
        let idx = ProprioIndex::build(&ds, 12).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let at = Proprio {
                cell: Cell::new(rng.random_range(0..GRID_W), rng.random_range(0..GRID_H)),
                gripper: if rng.random_bool(0.5) { Gripper::Open } else { Gripper::Closed },
            };
            let n = rng.random_range(1..=16);
            assert_eq!(idx.query(&ds, at, n).unwrap(), brute_force(&ds, at, n, 12));
        }
    }

    #[test]
    fn stored_state_ranks_its_own_chunk_first() {
        let (train, _) = generate_suite(&BenchConfig { categories: 1 }, &Vocabulary::standard(), 2).unwrap();
        let ds = collect_demos_for(&train, &[5], 1, 0).unwrap();
        let idx = ProprioIndex::build(&ds, 6).unwrap();
        let t = &ds.trajectories[0];
        for step in 0..t.proprio.len() {
            let top = &idx.query(&ds, t.proprio[step], 3).unwrap()[0];
            assert_eq!(top.distance, 0);
            assert_eq!(top.chunk, t.chunk(step, 6));
        }
    }

    #[test]
    fn reset_pose_sees_all_twelve_motions() {
        let (train, _) = generate_suite(&BenchConfig::default(), &Vocabulary::standard(), 0).unwrap();
        let ds = collect_demos(&train, 6, 1).unwrap();
        let idx = ProprioIndex::build(&ds, 12).unwrap();
        let at = Proprio { cell: RETRACT, gripper: Gripper::Open };
        let cands = idx.query(&ds, at, 12).unwrap();
        assert_eq!(cands.len(), 12);
        assert!(cands.iter().all(|c| c.distance == 0));
        let motions: BTreeSet<_> = cands
            .iter()
            .map(|c| {
                let task = train.task(ds.trajectories[c.traj as usize].task).unwrap();
                (task.cube_slot(), task.mark_slot())
            })
            .collect();
        assert_eq!(motions.len(), 12);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let ds = DemoDataset::default();
        assert!(ProprioIndex::build(&ds, 12).is_err());
    }
}
