//! k-nearest-neighbour subvolumes.
//!
//! Each interior atom becomes the center of one subvolume made of itself and
//! its `k - 1` nearest atoms in frame 0. The member list is frozen and reused
//! for every later frame so that consecutive frames describe the same atoms.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory_io::{AtomId, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Points per subvolume, center included.
    pub k: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { k: 10 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SubvolumeError {
    #[error("k = {k} must be at least 2")]
    KTooSmall { k: usize },
    #[error("k = {k} exceeds the atom count {atoms}")]
    KTooLarge { k: usize, atoms: usize },
    #[error("no interior atoms to center subvolumes on")]
    NoCenters,
    #[error("center id {0} is not present in the trajectory")]
    UnknownCenter(AtomId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subvolume {
    pub center_id: AtomId,
    /// Center first, then neighbours by increasing frame-0 distance.
    pub member_ids: Vec<AtomId>,
    /// Storage indices of `member_ids` inside each frame.
    pub member_indices: Vec<usize>,
}

impl Subvolume {
    pub fn k(&self) -> usize {
        self.member_ids.len()
    }

    pub fn positions_at(&self, traj: &Trajectory, frame: usize) -> Vec<[f64; 3]> {
        let f = traj.frame(frame);
        self.member_indices.iter().map(|&i| f.positions[i]).collect()
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Orders candidates by squared distance, then ascending atom id.
fn by_distance_then_id(a: &(f64, AtomId, usize), b: &(f64, AtomId, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Uniform bucket grid over frame-0 positions.
struct Grid {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    /// Atom storage indices, bucketed by cell.
    buckets: Vec<Vec<usize>>,
}

impl Grid {
    fn new(points: &[[f64; 3]], per_cell: usize) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent: [f64; 3] = std::array::from_fn(|a| (hi[a] - lo[a]).max(1e-12));
        let volume = extent[0] * extent[1] * extent[2];
        let target_cells = (points.len() / per_cell.max(1)).max(1) as f64;
        let mut cell = (volume / target_cells).cbrt();
        if !cell.is_finite() || cell <= 0.0 {
            cell = extent.iter().cloned().fold(0.0, f64::max);
        }
        let dims: [usize; 3] =
            std::array::from_fn(|a| ((extent[a] / cell).floor() as usize + 1).min(1 << 10));
        let mut grid = Self {
            origin: lo,
            cell,
            dims,
            buckets: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
        };
        for (i, p) in points.iter().enumerate() {
            let c = grid.cell_of(p);
            let slot = grid.slot(c);
            grid.buckets[slot].push(i);
        }
        grid
    }

    fn cell_of(&self, p: &[f64; 3]) -> [usize; 3] {
        std::array::from_fn(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell).floor();
            (c.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    fn slot(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Lower bound on the distance from `p` to any point outside the block of
    /// cells within Chebyshev radius `r` of `c`. Infinite once the block
    /// covers the grid.
    fn outside_bound(&self, p: &[f64; 3], c: [usize; 3], r: usize) -> f64 {
        let mut bound = f64::INFINITY;
        for a in 0..3 {
            if c[a] >= r {
                let face = self.origin[a] + (c[a] - r) as f64 * self.cell;
                bound = bound.min(p[a] - face);
            }
            if c[a] + r + 1 < self.dims[a] {
                let face = self.origin[a] + (c[a] + r + 1) as f64 * self.cell;
                bound = bound.min(face - p[a]);
            }
        }
        bound.max(0.0)
    }

    fn visit_shell(&self, c: [usize; 3], r: usize, mut f: impl FnMut(usize)) {
        let r = r as isize;
        let range = |a: usize| {
            let lo = (c[a] as isize - r).max(0);
            let hi = (c[a] as isize + r).min(self.dims[a] as isize - 1);
            lo..=hi
        };
        for i in range(0) {
            for j in range(1) {
                for k in range(2) {
                    let on_shell = (i - c[0] as isize).abs() == r
                        || (j - c[1] as isize).abs() == r
                        || (k - c[2] as isize).abs() == r;
                    if on_shell {
                        let slot = self.slot([i as usize, j as usize, k as usize]);
                        for &idx in &self.buckets[slot] {
                            f(idx);
                        }
                    }
                }
            }
        }
    }

    fn max_radius(&self) -> usize {
        *self.dims.iter().max().unwrap()
    }
}

/// Builds one subvolume per interior id from frame-0 neighbourhoods.
///
/// Neighbours may lie outside the interior set. Distance ties are broken by
/// ascending atom id, so the result does not depend on storage order.
pub fn knn_subvolumes(
    traj: &Trajectory,
    interior_ids: &BTreeSet<AtomId>,
    cfg: &SamplingConfig,
) -> Result<Vec<Subvolume>, SubvolumeError> {
    let frame = traj.frame(0);
    let n = frame.len();
    if cfg.k < 2 {
        return Err(SubvolumeError::KTooSmall { k: cfg.k });
    }
    if cfg.k > n {
        return Err(SubvolumeError::KTooLarge { k: cfg.k, atoms: n });
    }
    if interior_ids.is_empty() {
        return Err(SubvolumeError::NoCenters);
    }
    let grid = Grid::new(&frame.positions, cfg.k);

    let mut out = Vec::with_capacity(interior_ids.len());
    let mut cands: Vec<(f64, AtomId, usize)> = Vec::new();
    for &center_id in interior_ids {
        let ci = frame
            .index_of(center_id)
            .ok_or(SubvolumeError::UnknownCenter(center_id))?;
        let p = frame.positions[ci];
        let cell = grid.cell_of(&p);
        cands.clear();
        let mut r = 0;
        loop {
            grid.visit_shell(cell, r, |idx| {
                cands.push((dist2(&p, &frame.positions[idx]), frame.ids[idx], idx));
            });
            if cands.len() >= cfg.k {
                cands.select_nth_unstable_by(cfg.k - 1, by_distance_then_id);
                cands.truncate(cfg.k);
                let kth = cands[cfg.k - 1].0;
                let bound = grid.outside_bound(&p, cell, r);
                // Strict: an unseen atom exactly at the bound could win the id tie-break.
                if kth < bound * bound {
                    break;
                }
            }
            if r > grid.max_radius() {
                break;
            }
            r += 1;
        }
        cands.sort_by(by_distance_then_id);
        // The center has distance 0; a coincident atom with a smaller id would
        // otherwise displace it from slot 0.
        if let Some(pos) = cands.iter().position(|c| c.2 == ci) {
            let c = cands.remove(pos);
            cands.insert(0, c);
        }
        out.push(Subvolume {
            center_id,
            member_ids: cands.iter().map(|c| c.1).collect(),
            member_indices: cands.iter().map(|c| c.2).collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory_io::{AtomFrame, BoxBounds};

    fn line_traj(xs: &[f64]) -> Trajectory {
        let frame = AtomFrame {
            timestep: 0,
            ids: (0..xs.len() as AtomId).collect(),
            positions: xs.iter().map(|&x| [x, 0.0, 0.0]).collect(),
            bounds: BoxBounds {
                lo: [-10.0; 3],
                hi: [10.0; 3],
            },
        };
        Trajectory::new(vec![frame]).unwrap()
    }

    #[test]
    fn collinear_nearest_neighbour() {
        let traj = line_traj(&[0.0, 1.0, 3.0]);
        let subs = knn_subvolumes(&traj, &BTreeSet::from([0]), &SamplingConfig { k: 2 }).unwrap();
        assert_eq!(subs[0].member_ids, vec![0, 1]);
    }

    #[test]
    fn full_k_covers_everything() {
        let traj = line_traj(&[0.0, 1.0, 3.0, 7.0]);
        let subs =
            knn_subvolumes(&traj, &traj.ids().iter().copied().collect(), &SamplingConfig { k: 4 })
                .unwrap();
        for s in &subs {
            let set: BTreeSet<_> = s.member_ids.iter().copied().collect();
            assert_eq!(set.len(), 4);
            assert_eq!(s.member_ids[0], s.center_id);
        }
        assert_eq!(subs[3].member_ids, vec![3, 2, 1, 0]);
    }

    #[test]
    fn ties_break_by_id() {
        let traj = line_traj(&[-1.0, 0.0, 1.0]);
        let subs = knn_subvolumes(&traj, &BTreeSet::from([1]), &SamplingConfig { k: 2 }).unwrap();
        assert_eq!(subs[0].member_ids, vec![1, 0]);
    }

    #[test]
    fn k_bounds_checked() {
        let traj = line_traj(&[0.0, 1.0]);
        let ids = BTreeSet::from([0]);
        assert_eq!(
            knn_subvolumes(&traj, &ids, &SamplingConfig { k: 3 }),
            Err(SubvolumeError::KTooLarge { k: 3, atoms: 2 })
        );
        assert_eq!(
            knn_subvolumes(&traj, &ids, &SamplingConfig { k: 1 }),
            Err(SubvolumeError::KTooSmall { k: 1 })
        );
        assert_eq!(
            knn_subvolumes(&traj, &BTreeSet::new(), &SamplingConfig { k: 2 }),
            Err(SubvolumeError::NoCenters)
        );
    }
}
