//! Coordinates from distances: classical MDS, orthogonal Procrustes
//! superposition and stitching of overlapping subvolumes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph_repr::{
    embed_upper, invert_minmax, lj_invert, Branch, DistanceMatrix, GraphError, LJParams,
    MinMaxScaler,
};
use crate::trajectory_io::AtomId;

/// Relative eigenvalue floor for the Euclidean-embeddability check.
pub const EIGEN_REL_TOL: f64 = 1e-10;

/// Offset above `-epsilon` used when clamping under-range potentials.
pub const WELL_CLAMP_MARGIN: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("distance matrix is not embeddable in {dim} dimensions; spectrum {eigenvalues:?}")]
    NonEuclidean { dim: usize, eigenvalues: Vec<f64> },
    #[error("point sets differ in shape: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("degenerate geometry: cross-covariance rank {rank} < {needed}")]
    Degenerate { rank: usize, needed: usize },
    #[error("atom {0} is not covered by any subvolume")]
    Uncovered(AtomId),
    #[error("atom {0} missing from the reference frame")]
    MissingReference(AtomId),
    #[error("explicit branch list has {found} entries, expected {expected}")]
    BranchCount { expected: usize, found: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// `k x dim` coordinates with optional atom ids per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateSet {
    pub coords: DMatrix<f64>,
    pub ids: Option<Vec<AtomId>>,
}

impl CoordinateSet {
    pub fn new(coords: DMatrix<f64>) -> Self {
        Self { coords, ids: None }
    }

    pub fn from_points(points: &[[f64; 3]]) -> Self {
        Self::new(DMatrix::from_fn(points.len(), 3, |i, j| points[i][j]))
    }

    pub fn with_ids(mut self, ids: Vec<AtomId>) -> Self {
        assert_eq!(ids.len(), self.coords.nrows(), "one id per coordinate row");
        self.ids = Some(ids);
        self
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn distance_matrix(&self) -> DistanceMatrix {
        let k = self.len();
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            for j in (i + 1)..k {
                let d = (self.coords.row(i) - self.coords.row(j)).norm();
                data[i * k + j] = d;
                data[j * k + i] = d;
            }
        }
        DistanceMatrix::from_row_major(k, data)
    }
}

/// Apply as `X * rotation + translation` (row vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct RigidAlignment {
    pub rotation: DMatrix<f64>,
    pub translation: DVector<f64>,
}

impl RigidAlignment {
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.rotation;
        for mut row in y.row_iter_mut() {
            row += self.translation.transpose();
        }
        y
    }
}

/// Double-centred Gram matrix `-1/2 J D^2 J`.
fn gram(d: &DistanceMatrix) -> DMatrix<f64> {
    let k = d.k();
    let sq = DMatrix::from_fn(k, k, |i, j| {
        let v = d.get(i, j);
        v * v
    });
    let row_means: Vec<f64> = (0..k).map(|i| sq.row(i).sum() / k as f64).collect();
    let grand = row_means.iter().sum::<f64>() / k as f64;
    DMatrix::from_fn(k, k, |i, j| -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand))
}

pub fn classical_mds(d: &DistanceMatrix, dim: usize) -> Result<CoordinateSet, GeometryError> {
    let k = d.k();
    let eig = SymmetricEigen::new(gram(d));
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let tol = EIGEN_REL_TOL * scale;
    let positive = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    if positive < dim {
        return Err(GeometryError::NonEuclidean {
            dim,
            eigenvalues: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
        });
    }
    let mut coords = DMatrix::zeros(k, dim);
    for (c, &i) in order.iter().take(dim).enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for r in 0..k {
            coords[(r, c)] = eig.eigenvectors[(r, i)] * s;
        }
    }
    Ok(CoordinateSet::new(coords))
}

fn centroid(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(x.ncols(), |j, _| x.column(j).mean())
}

fn centered(x: &DMatrix<f64>, c: &DVector<f64>) -> DMatrix<f64> {
    let mut y = x.clone();
    for mut row in y.row_iter_mut() {
        row -= c.transpose();
    }
    y
}

/// Least-squares orthogonal superposition of `x` onto `reference`.
/// Reflections are allowed. Returns the alignment and the RMSD after it.
pub fn procrustes_align(
    x: &DMatrix<f64>,
    reference: &DMatrix<f64>,
) -> Result<(RigidAlignment, f64), GeometryError> {
    if x.shape() != reference.shape() {
        return Err(GeometryError::ShapeMismatch {
            left: x.shape(),
            right: reference.shape(),
        });
    }
    let dim = x.ncols();
    let cx = centroid(x);
    let cy = centroid(reference);
    let xc = centered(x, &cx);
    let yc = centered(reference, &cy);
    let h = xc.transpose() * &yc;
    let svd = h.svd(true, true);
    let sv = &svd.singular_values;
    let top = sv.iter().cloned().fold(0.0, f64::max);
    let rank = sv.iter().filter(|&&s| s > 1e-10 * top.max(f64::MIN_POSITIVE)).count();
    let needed = dim.saturating_sub(1).max(1);
    if top == 0.0 || rank < needed {
        return Err(GeometryError::Degenerate { rank, needed });
    }
    let rotation = svd.u.unwrap() * svd.v_t.unwrap();
    let translation = cy - (cx.transpose() * &rotation).transpose();
    let align = RigidAlignment {
        rotation,
        translation,
    };
    let rmsd = rmsd(&align.apply(x), reference);
    Ok((align, rmsd))
}

pub fn rmsd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    ((a - b).norm_squared() / a.nrows() as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Inverse featurization

/// Which LJ branch to invert each pair potential on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BranchPolicy {
    /// Attractive for `V < 0`, repulsive for `V >= 0`.
    AttractiveWhenNegative,
    Always(Branch),
    /// One branch per upper-triangle entry.
    Explicit(Vec<Branch>),
}

impl Default for BranchPolicy {
    fn default() -> Self {
        Self::AttractiveWhenNegative
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub coords: CoordinateSet,
    pub distances: DistanceMatrix,
    /// Entries clamped up to `-epsilon + WELL_CLAMP_MARGIN`.
    pub clamped: usize,
}

/// Scaled potential vector -> distances -> coordinates.
pub fn reconstruct_subvolume(
    v: &[f64],
    scaler: &MinMaxScaler,
    params: &LJParams,
    policy: &BranchPolicy,
) -> Result<Reconstruction, GeometryError> {
    let potentials = invert_minmax(v, scaler);
    if let BranchPolicy::Explicit(b) = policy {
        if b.len() != potentials.len() {
            return Err(GeometryError::BranchCount {
                expected: potentials.len(),
                found: b.len(),
            });
        }
    }
    let floor = -params.epsilon + WELL_CLAMP_MARGIN;
    let mut clamped = 0;
    let mut radii = Vec::with_capacity(potentials.len());
    for (i, &p) in potentials.iter().enumerate() {
        let p = if p < floor {
            clamped += 1;
            floor
        } else {
            p
        };
        let branch = if p >= 0.0 {
            Branch::Repulsive
        } else {
            match policy {
                BranchPolicy::AttractiveWhenNegative => Branch::Attractive,
                BranchPolicy::Always(b) => *b,
                BranchPolicy::Explicit(bs) => bs[i],
            }
        };
        radii.push(lj_invert(p, params, branch)?);
    }
    let (k, data) = embed_upper(&radii, 0.0)?;
    let distances = DistanceMatrix::from_row_major(k, data);
    let coords = classical_mds(&distances, 3)?;
    Ok(Reconstruction {
        coords,
        distances,
        clamped,
    })
}

/// Aligns each subvolume onto the reference positions of its atoms and
/// averages every atom's aligned estimates. Output rows are in ascending id
/// order; atoms in no subvolume are omitted unless `require` lists them.
pub fn stitch_volume(
    parts: &[CoordinateSet],
    reference: &BTreeMap<AtomId, [f64; 3]>,
    require: Option<&[AtomId]>,
) -> Result<CoordinateSet, GeometryError> {
    let mut sums: BTreeMap<AtomId, ([f64; 3], usize)> = BTreeMap::new();
    for part in parts {
        let ids = part
            .ids
            .as_ref()
            .expect("stitched coordinate sets need atom ids");
        let refs = ids
            .iter()
            .map(|id| reference.get(id).copied().ok_or(GeometryError::MissingReference(*id)))
            .collect::<Result<Vec<_>, _>>()?;
        let target = DMatrix::from_fn(refs.len(), 3, |i, j| refs[i][j]);
        let (align, _) = procrustes_align(&part.coords, &target)?;
        let aligned = align.apply(&part.coords);
        for (r, id) in ids.iter().enumerate() {
            let e = sums.entry(*id).or_insert(([0.0; 3], 0));
            for j in 0..3 {
                e.0[j] += aligned[(r, j)];
            }
            e.1 += 1;
        }
    }
    if let Some(ids) = require {
        if let Some(missing) = ids.iter().find(|id| !sums.contains_key(id)) {
            return Err(GeometryError::Uncovered(*missing));
        }
    }
    let ids: Vec<AtomId> = sums.keys().copied().collect();
    let coords = DMatrix::from_fn(ids.len(), 3, |i, j| {
        let (s, n) = sums[&ids[i]];
        s[j] / n as f64
    });
    Ok(CoordinateSet::new(coords).with_ids(ids))
}

/// XYZ text: atom count, comment line, then `C x y z` rows.
pub fn write_xyz(set: &CoordinateSet, comment: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", set.len());
    let _ = writeln!(out, "{}", comment.replace('\n', " "));
    for r in 0..set.len() {
        let g = |j: usize| if j < set.dim() { set.coords[(r, j)] } else { 0.0 };
        let _ = writeln!(out, "C {:.10} {:.10} {:.10}", g(0), g(1), g(2));
    }
    out
}
