//! Canonical graph-potential features.
//!
//! A subvolume's pairwise distance matrix is reordered by ascending row norm,
//! mapped elementwise through the Lennard-Jones 12-6 potential, flattened to
//! its strict upper triangle and finally min-max scaled into `[0, 1]` with one
//! global scalar range.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::subvolume::{knn_subvolumes, SamplingConfig, Subvolume, SubvolumeError};
use crate::trajectory_io::{AtomId, Trajectory};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("distance {0} is not positive")]
    NonPositiveDistance(f64),
    #[error("potential {value} is below the well depth -{epsilon}")]
    BelowWell { value: f64, epsilon: f64 },
    #[error("attractive branch requires a negative potential, got {0}")]
    NotAttractive(f64),
    #[error("permutation of length {perm} does not match matrix of size {size}")]
    LengthMismatch { perm: usize, size: usize },
    #[error("not a permutation of 0..{0}")]
    NotAPermutation(usize),
    #[error("vector of length {len} is not a triangular number k(k-1)/2")]
    NotTriangular { len: usize },
    #[error("min-max scaling needs at least two distinct values")]
    DegenerateRange,
    #[error("invalid LJ parameters epsilon={epsilon}, sigma={sigma}")]
    InvalidParams { epsilon: f64, sigma: f64 },
    #[error("dataset needs at least two frames, got {0}")]
    TooFewFrames(usize),
    #[error(transparent)]
    Subvolume(#[from] SubvolumeError),
    #[error("dataset file line {line}: {message}")]
    Format { line: usize, message: String },
}

// ---------------------------------------------------------------------------
// Distance matrices and canonical ordering

/// Dense symmetric `k x k` distance matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    k: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_points(points: &[[f64; 3]]) -> Self {
        let k = points.len();
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            for j in (i + 1)..k {
                let d = crate::subvolume::dist2(&points[i], &points[j]).sqrt();
                data[i * k + j] = d;
                data[j * k + i] = d;
            }
        }
        Self { k, data }
    }

    /// Wraps row-major data without checking symmetry.
    pub fn from_row_major(k: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), k * k, "distance matrix data must be k*k");
        Self { k, data }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Euclidean norm of row `i`. Squares are summed in ascending order so the
    /// value depends only on the multiset of row entries, not their order.
    pub fn row_norm(&self, i: usize) -> f64 {
        let mut sq: Vec<f64> = self.row(i).iter().map(|d| d * d).collect();
        sq.sort_by(f64::total_cmp);
        sq.iter().sum::<f64>().sqrt()
    }
}

/// Distance matrix of a subvolume at `frame`, in member order.
pub fn distance_matrix(sub: &Subvolume, traj: &Trajectory, frame: usize) -> DistanceMatrix {
    DistanceMatrix::from_points(&sub.positions_at(traj, frame))
}

/// Row indices ordered by ascending row norm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalPermutation(Vec<usize>);

impl CanonicalPermutation {
    pub fn new(order: Vec<usize>) -> Result<Self, GraphError> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(GraphError::NotAPermutation(n));
            }
        }
        Ok(Self(order))
    }

    pub fn identity(k: usize) -> Self {
        Self((0..k).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (a, &i) in self.0.iter().enumerate() {
            inv[i] = a;
        }
        Self(inv)
    }
}

/// Sorts rows by Euclidean norm; exact ties keep ascending original index.
pub fn canonical_permutation(d: &DistanceMatrix) -> CanonicalPermutation {
    let norms: Vec<f64> = (0..d.k()).map(|i| d.row_norm(i)).collect();
    let mut order: Vec<usize> = (0..d.k()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    CanonicalPermutation(order)
}

/// `out[a][b] = d[p[a]][p[b]]`.
pub fn apply_permutation(
    d: &DistanceMatrix,
    p: &CanonicalPermutation,
) -> Result<DistanceMatrix, GraphError> {
    let k = d.k();
    if p.0.len() != k {
        return Err(GraphError::LengthMismatch {
            perm: p.0.len(),
            size: k,
        });
    }
    let mut data = Vec::with_capacity(k * k);
    for &pa in &p.0 {
        for &pb in &p.0 {
            data.push(d.get(pa, pb));
        }
    }
    Ok(DistanceMatrix { k, data })
}

pub fn canonicalize(d: &DistanceMatrix) -> (DistanceMatrix, CanonicalPermutation) {
    let p = canonical_permutation(d);
    let c = apply_permutation(d, &p).expect("permutation built from the matrix itself");
    (c, p)
}

// ---------------------------------------------------------------------------
// Lennard-Jones

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LJParams {
    pub epsilon: f64,
    pub sigma: f64,
}

impl Default for LJParams {
    /// Carbon-like parameters.
    fn default() -> Self {
        Self {
            epsilon: 0.7,
            sigma: 1.45,
        }
    }
}

impl LJParams {
    pub fn new(epsilon: f64, sigma: f64) -> Result<Self, GraphError> {
        if !(epsilon > 0.0 && sigma > 0.0 && epsilon.is_finite() && sigma.is_finite()) {
            return Err(GraphError::InvalidParams { epsilon, sigma });
        }
        Ok(Self { epsilon, sigma })
    }

    /// Separation of the potential minimum, `2^(1/6) sigma`.
    pub fn r_min(&self) -> f64 {
        2f64.powf(1.0 / 6.0) * self.sigma
    }
}

/// `4 eps [(sigma/r)^12 - (sigma/r)^6]`.
///
/// Evaluated as `4 eps * s (s - 1)` with `s = (sigma/r)^6`, which keeps the
/// result at or above `-eps` under rounding.
pub fn lj_potential(r: f64, params: &LJParams) -> Result<f64, GraphError> {
    if !(r > 0.0) {
        return Err(GraphError::NonPositiveDistance(r));
    }
    let sr = params.sigma / r;
    let sr2 = sr * sr;
    let s = sr2 * sr2 * sr2;
    Ok((4.0 * params.epsilon) * (s * (s - 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// `r <= 2^(1/6) sigma`
    Repulsive,
    /// `r >= 2^(1/6) sigma`
    Attractive,
}

/// Inverts the potential on one branch via the quadratic in `(sigma/r)^6`.
pub fn lj_invert(v: f64, params: &LJParams, branch: Branch) -> Result<f64, GraphError> {
    let x = v / params.epsilon;
    if !(x >= -1.0) {
        return Err(GraphError::BelowWell {
            value: v,
            epsilon: params.epsilon,
        });
    }
    let root = (1.0 + x).sqrt();
    let s = match branch {
        Branch::Repulsive => 0.5 * (1.0 + root),
        Branch::Attractive => {
            if !(v < 0.0) {
                return Err(GraphError::NotAttractive(v));
            }
            // (1 - root) / 2 without cancellation near v = 0.
            -0.5 * x / (1.0 + root)
        }
    };
    Ok(params.sigma * s.powf(-1.0 / 6.0))
}

// ---------------------------------------------------------------------------
// Potential vectors

/// Strict upper triangle of the elementwise LJ matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialVector(pub Vec<f64>);

pub fn triangle_len(k: usize) -> usize {
    k * (k - 1) / 2
}

/// Inverse of [`triangle_len`].
pub fn k_from_triangle_len(len: usize) -> Result<usize, GraphError> {
    let k = ((1.0 + (1.0 + 8.0 * len as f64).sqrt()) / 2.0).round() as usize;
    if k >= 2 && triangle_len(k) == len {
        Ok(k)
    } else {
        Err(GraphError::NotTriangular { len })
    }
}

/// Expects `d` already canonicalized.
pub fn potential_vector(d: &DistanceMatrix, params: &LJParams) -> Result<PotentialVector, GraphError> {
    let k = d.k();
    let mut v = Vec::with_capacity(triangle_len(k));
    for i in 0..k {
        for j in (i + 1)..k {
            v.push(lj_potential(d.get(i, j), params)?);
        }
    }
    Ok(PotentialVector(v))
}

/// Symmetric `k x k` matrix from a strict upper triangle; the diagonal is
/// filled with `diag`.
pub fn embed_upper(values: &[f64], diag: f64) -> Result<(usize, Vec<f64>), GraphError> {
    let k = k_from_triangle_len(values.len())?;
    let mut m = vec![diag; k * k];
    let mut it = values.iter();
    for i in 0..k {
        for j in (i + 1)..k {
            let v = *it.next().unwrap();
            m[i * k + j] = v;
            m[j * k + i] = v;
        }
    }
    Ok((k, m))
}

/// Canonical potential vector of one subvolume at one frame, with the
/// permutation that produced it.
pub fn featurize(
    sub: &Subvolume,
    traj: &Trajectory,
    frame: usize,
    params: &LJParams,
) -> Result<(PotentialVector, CanonicalPermutation), GraphError> {
    let (canon, perm) = canonicalize(&distance_matrix(sub, traj, frame));
    Ok((potential_vector(&canon, params)?, perm))
}

/// Atom ids of `sub` listed in canonical order at `frame`.
pub fn canonical_members(sub: &Subvolume, traj: &Trajectory, frame: usize) -> Vec<AtomId> {
    let perm = canonical_permutation(&distance_matrix(sub, traj, frame));
    perm.as_slice().iter().map(|&i| sub.member_ids[i]).collect()
}

// ---------------------------------------------------------------------------
// Min-max scaling

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub lo: f64,
    pub hi: f64,
}

impl MinMaxScaler {
    pub fn new(lo: f64, hi: f64) -> Result<Self, GraphError> {
        if !(lo < hi) {
            return Err(GraphError::DegenerateRange);
        }
        Ok(Self { lo, hi })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.lo) / (self.hi - self.lo)
    }

    pub fn invert(&self, u: f64) -> f64 {
        self.lo + u * (self.hi - self.lo)
    }
}

pub fn fit_minmax<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<MinMaxScaler, GraphError> {
    let (lo, hi) = values
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    MinMaxScaler::new(lo, hi)
}

pub fn apply_minmax(v: &[f64], s: &MinMaxScaler) -> Vec<f64> {
    v.iter().map(|&x| s.apply(x)).collect()
}

pub fn invert_minmax(v: &[f64], s: &MinMaxScaler) -> Vec<f64> {
    v.iter().map(|&u| s.invert(u)).collect()
}

// ---------------------------------------------------------------------------
// Paired dataset

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub center_id: AtomId,
    /// Index `t` of the transition `t -> t + 1`.
    pub transition: usize,
    pub u_t: Vec<f64>,
    pub u_t1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub k: usize,
    pub num_frames: usize,
    pub centers: Vec<AtomId>,
    pub scaler: MinMaxScaler,
    pub lj: LJParams,
    /// Ordered by (center, transition).
    pub pairs: Vec<SamplePair>,
}

impl Dataset {
    pub fn feature_dim(&self) -> usize {
        triangle_len(self.k)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(center_id, transition)` of every pair, in pair order.
    pub fn provenance(&self) -> Vec<(AtomId, usize)> {
        self.pairs.iter().map(|p| (p.center_id, p.transition)).collect()
    }

    pub fn find(&self, center_id: AtomId, transition: usize) -> Option<&SamplePair> {
        let t = self.num_frames - 1;
        let c = self.centers.binary_search(&center_id).ok()?;
        let p = self.pairs.get(c * t + transition)?;
        (p.center_id == center_id && p.transition == transition).then_some(p)
    }
}

/// Featurizes every subvolume at every frame, fits one global scaler over all
/// of those vectors and pairs consecutive frames.
pub fn build_dataset(
    traj: &Trajectory,
    interior_ids: &BTreeSet<AtomId>,
    cfg: &SamplingConfig,
    params: &LJParams,
) -> Result<Dataset, GraphError> {
    let t = traj.num_frames();
    if t < 2 {
        return Err(GraphError::TooFewFrames(t));
    }
    let subs = knn_subvolumes(traj, interior_ids, cfg)?;
    let mut raw: Vec<Vec<Vec<f64>>> = Vec::with_capacity(subs.len());
    for sub in &subs {
        let per_frame = (0..t)
            .map(|f| featurize(sub, traj, f, params).map(|(v, _)| v.0))
            .collect::<Result<Vec<_>, _>>()?;
        raw.push(per_frame);
    }
    let scaler = fit_minmax(raw.iter().flatten().flatten())?;
    let mut pairs = Vec::with_capacity(subs.len() * (t - 1));
    for (sub, frames) in subs.iter().zip(&raw) {
        let scaled: Vec<Vec<f64>> = frames.iter().map(|v| apply_minmax(v, &scaler)).collect();
        for (i, w) in scaled.windows(2).enumerate() {
            pairs.push(SamplePair {
                center_id: sub.center_id,
                transition: i,
                u_t: w[0].clone(),
                u_t1: w[1].clone(),
            });
        }
    }
    Ok(Dataset {
        k: cfg.k,
        num_frames: t,
        centers: subs.iter().map(|s| s.center_id).collect(),
        scaler,
        lj: *params,
        pairs,
    })
}

// ---------------------------------------------------------------------------
// Dataset file
//
// Text file. Header lines start with `#` and hold `key=value` pairs; the
// first line is the magic `# opae-dataset v1`. After the header comes one
// column-name line and then one comma-separated row per pair:
//
//     center_id,transition,ut_0..ut_{m-1},ut1_0..ut1_{m-1}
//
// Floats use the shortest representation that parses back to the same bits.

const DATASET_MAGIC: &str = "# opae-dataset v1";

pub fn write_dataset(ds: &Dataset) -> String {
    let m = ds.feature_dim();
    let mut out = String::new();
    let _ = writeln!(out, "{DATASET_MAGIC}");
    let _ = writeln!(out, "# k={}", ds.k);
    let _ = writeln!(out, "# frames={}", ds.num_frames);
    let _ = writeln!(out, "# centers={}", ds.centers.len());
    let _ = writeln!(out, "# scaler_lo={:?}", ds.scaler.lo);
    let _ = writeln!(out, "# scaler_hi={:?}", ds.scaler.hi);
    let _ = writeln!(out, "# lj_epsilon={:?}", ds.lj.epsilon);
    let _ = writeln!(out, "# lj_sigma={:?}", ds.lj.sigma);
    out.push_str("center_id,transition");
    for i in 0..m {
        let _ = write!(out, ",ut_{i}");
    }
    for i in 0..m {
        let _ = write!(out, ",ut1_{i}");
    }
    out.push('\n');
    for p in &ds.pairs {
        let _ = write!(out, "{},{}", p.center_id, p.transition);
        for x in p.u_t.iter().chain(&p.u_t1) {
            let _ = write!(out, ",{x:?}");
        }
        out.push('\n');
    }
    out
}

pub fn read_dataset(text: &str) -> Result<Dataset, GraphError> {
    let err = |line: usize, message: String| GraphError::Format { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, DATASET_MAGIC)) => {}
        _ => return Err(err(1, "missing dataset magic line".into())),
    }
    let mut header = std::collections::HashMap::new();
    let mut columns_line = 0;
    for (n, l) in lines.by_ref() {
        if let Some(kv) = l.strip_prefix('#') {
            let (key, value) = kv
                .trim()
                .split_once('=')
                .ok_or_else(|| err(n, format!("malformed header `{l}`")))?;
            header.insert(key.trim().to_string(), (n, value.trim().to_string()));
        } else {
            columns_line = n;
            break;
        }
    }
    fn field<T: std::str::FromStr>(
        header: &std::collections::HashMap<String, (usize, String)>,
        key: &str,
    ) -> Result<T, GraphError> {
        let (n, v) = header.get(key).ok_or_else(|| GraphError::Format {
            line: 1,
            message: format!("missing header `{key}`"),
        })?;
        v.parse().map_err(|_| GraphError::Format {
            line: *n,
            message: format!("bad value `{v}` for `{key}`"),
        })
    }
    let k: usize = field(&header, "k")?;
    let num_frames: usize = field(&header, "frames")?;
    let num_centers: usize = field(&header, "centers")?;
    let scaler = MinMaxScaler::new(field(&header, "scaler_lo")?, field(&header, "scaler_hi")?)?;
    let lj = LJParams::new(field(&header, "lj_epsilon")?, field(&header, "lj_sigma")?)?;
    if k < 2 || num_frames < 2 {
        return Err(err(1, format!("invalid k={k} or frames={num_frames}")));
    }
    if columns_line == 0 {
        return Err(err(1, "missing column header".into()));
    }
    let m = triangle_len(k);
    let mut pairs = Vec::new();
    let mut centers: Vec<AtomId> = Vec::new();
    for (n, l) in lines {
        if l.is_empty() {
            continue;
        }
        let fields: Vec<&str> = l.split(',').collect();
        if fields.len() != 2 + 2 * m {
            return Err(err(n, format!("expected {} fields, found {}", 2 + 2 * m, fields.len())));
        }
        let center_id: AtomId = fields[0]
            .parse()
            .map_err(|_| err(n, format!("bad center id `{}`", fields[0])))?;
        let transition: usize = fields[1]
            .parse()
            .map_err(|_| err(n, format!("bad transition `{}`", fields[1])))?;
        let values = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| err(n, format!("bad value `{f}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        if centers.last() != Some(&center_id) {
            centers.push(center_id);
        }
        pairs.push(SamplePair {
            center_id,
            transition,
            u_t: values[..m].to_vec(),
            u_t1: values[m..].to_vec(),
        });
    }
    if centers.len() != num_centers || pairs.len() != num_centers * (num_frames - 1) {
        return Err(err(
            columns_line,
            format!(
                "header declares {num_centers} centers x {} transitions, found {} rows",
                num_frames - 1,
                pairs.len()
            ),
        ));
    }
    Ok(Dataset {
        k,
        num_frames,
        centers,
        scaler,
        lj,
        pairs,
    })
}
