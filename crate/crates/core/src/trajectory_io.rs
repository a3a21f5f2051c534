//! Trajectory ingestion: LAMMPS text dumps, a synthetic diamond-lattice
//! tensile generator, and boundary truncation.
//!
//! The dump grammar accepted here is the plain-text `custom`/`atom` style:
//!
//! ```text
//! ITEM: TIMESTEP
//! <integer>
//! ITEM: NUMBER OF ATOMS
//! <integer>
//! ITEM: BOX BOUNDS <flags...>
//! <xlo> <xhi>
//! <ylo> <yhi>
//! <zlo> <zhi>
//! ITEM: ATOMS <col> <col> ...
//! <one row per atom>
//! ```
//!
//! Blocks repeat once per frame. Columns are looked up by name from the
//! `ITEM: ATOMS` header; `id`, `x`, `y`, `z` are required (`xu`/`yu`/`zu`
//! are accepted as aliases) and everything else is ignored.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type AtomId = u64;

/// Axis-aligned box, `lo[axis]..hi[axis]` in Å.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl BoxBounds {
    pub fn extent(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }
}

/// One snapshot. `ids` is sorted ascending and `positions[i]` belongs to `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomFrame {
    pub timestep: i64,
    pub ids: Vec<AtomId>,
    pub positions: Vec<[f64; 3]>,
    pub bounds: BoxBounds,
}

impl AtomFrame {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Storage index of `id`, if present.
    pub fn index_of(&self, id: AtomId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    frames: Vec<AtomFrame>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory has no frames")]
    Empty,
    #[error("frame at timestep {timestep} has no atoms")]
    EmptyFrame { timestep: i64 },
    #[error("duplicate atom id {id} at timestep {timestep}")]
    DuplicateId { timestep: i64, id: AtomId },
    #[error("timesteps not strictly increasing: {prev} followed by {next}")]
    NonIncreasingTimestep { prev: i64, next: i64 },
    #[error("atom ids at timestep {timestep} differ from those of the first frame")]
    InconsistentIds { timestep: i64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no atoms survive a {p}% boundary truncation")]
    EmptyInterior { p: f64 },
}

impl Trajectory {
    /// Builds a trajectory, sorting frames by timestep and atoms by id, then
    /// checking that every frame carries the same id set.
    pub fn new(mut frames: Vec<AtomFrame>) -> Result<Self, TrajectoryError> {
        if frames.is_empty() {
            return Err(TrajectoryError::Empty);
        }
        for frame in &mut frames {
            sort_frame_by_id(frame)?;
        }
        frames.sort_by_key(|f| f.timestep);
        for pair in frames.windows(2) {
            if pair[1].timestep <= pair[0].timestep {
                return Err(TrajectoryError::NonIncreasingTimestep {
                    prev: pair[0].timestep,
                    next: pair[1].timestep,
                });
            }
        }
        let reference = &frames[0].ids;
        if let Some(bad) = frames.iter().skip(1).find(|f| &f.ids != reference) {
            return Err(TrajectoryError::InconsistentIds {
                timestep: bad.timestep,
            });
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[AtomFrame] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> &AtomFrame {
        &self.frames[index]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_atoms(&self) -> usize {
        self.frames[0].len()
    }

    pub fn ids(&self) -> &[AtomId] {
        &self.frames[0].ids
    }
}

fn sort_frame_by_id(frame: &mut AtomFrame) -> Result<(), TrajectoryError> {
    if frame.ids.is_empty() {
        return Err(TrajectoryError::EmptyFrame {
            timestep: frame.timestep,
        });
    }
    let mut order: Vec<usize> = (0..frame.ids.len()).collect();
    order.sort_by_key(|&i| frame.ids[i]);
    let ids: Vec<AtomId> = order.iter().map(|&i| frame.ids[i]).collect();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(TrajectoryError::DuplicateId {
            timestep: frame.timestep,
            id: w[0],
        });
    }
    frame.positions = order.iter().map(|&i| frame.positions[i]).collect();
    frame.ids = ids;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dump parsing

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("line {line}: expected `{expected}`, found `{found}`")]
    Header {
        line: usize,
        expected: &'static str,
        found: String,
    },
    #[error("line {line}: unexpected end of input while reading {context}")]
    UnexpectedEof { line: usize, context: &'static str },
    #[error("line {line}: cannot parse `{token}` as {what}")]
    InvalidNumber {
        line: usize,
        token: String,
        what: &'static str,
    },
    #[error("line {line}: NUMBER OF ATOMS declares {declared} atoms but {found} atom rows follow")]
    AtomCount {
        line: usize,
        declared: usize,
        found: usize,
    },
    #[error("line {line}: ATOMS header lacks required column `{column}`")]
    MissingColumn { line: usize, column: &'static str },
    #[error("line {line}: atom row has {found} fields, header declares {expected}")]
    RowWidth {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: timestep {timestep} has an atom id set different from the first frame")]
    InconsistentIds { line: usize, timestep: i64 },
    #[error("line {line}: {source}")]
    Frame {
        line: usize,
        #[source]
        source: TrajectoryError,
    },
    #[error("no frames found")]
    NoFrames,
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate().peekable(),
            last: 0,
        }
    }

    /// Next non-blank line with its 1-based number.
    fn next(&mut self, context: &'static str) -> Result<(usize, &'a str), ParseError> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            if !l.trim().is_empty() {
                return Ok((i + 1, l.trim()));
            }
        }
        Err(ParseError::UnexpectedEof {
            line: self.last,
            context,
        })
    }

    fn at_end(&mut self) -> bool {
        while let Some((_, l)) = self.inner.peek() {
            if l.trim().is_empty() {
                self.inner.next();
            } else {
                return false;
            }
        }
        true
    }

    /// Non-blank lines until the next `ITEM:` line or end of input.
    fn take_rows(&mut self) -> Vec<(usize, &'a str)> {
        let mut rows = Vec::new();
        while let Some(&(i, l)) = self.inner.peek() {
            let t = l.trim();
            if t.starts_with("ITEM:") {
                break;
            }
            self.inner.next();
            self.last = i + 1;
            if !t.is_empty() {
                rows.push((i + 1, t));
            }
        }
        rows
    }
}

fn expect_item<'a>(
    lines: &mut Lines<'a>,
    keyword: &'static str,
) -> Result<(usize, &'a str), ParseError> {
    let (n, l) = lines.next(keyword)?;
    match l.strip_prefix(keyword) {
        Some(rest) => Ok((n, rest.trim())),
        None => Err(ParseError::Header {
            line: n,
            expected: keyword,
            found: l.to_string(),
        }),
    }
}

fn parse_num<T: std::str::FromStr>(
    token: &str,
    line: usize,
    what: &'static str,
) -> Result<T, ParseError> {
    token.parse().map_err(|_| ParseError::InvalidNumber {
        line,
        token: token.to_string(),
        what,
    })
}

struct AtomColumns {
    id: usize,
    xyz: [usize; 3],
    width: usize,
}

fn atom_columns(header: &str, line: usize) -> Result<AtomColumns, ParseError> {
    let names: Vec<&str> = header.split_whitespace().collect();
    let find = |cands: &[&str]| names.iter().position(|n| cands.contains(n));
    let id = find(&["id"]).ok_or(ParseError::MissingColumn { line, column: "id" })?;
    let x = find(&["x", "xu"]).ok_or(ParseError::MissingColumn { line, column: "x" })?;
    let y = find(&["y", "yu"]).ok_or(ParseError::MissingColumn { line, column: "y" })?;
    let z = find(&["z", "zu"]).ok_or(ParseError::MissingColumn { line, column: "z" })?;
    Ok(AtomColumns {
        id,
        xyz: [x, y, z],
        width: names.len(),
    })
}

/// Parses a LAMMPS text dump into a [`Trajectory`].
pub fn parse_lammps_dump(text: &str) -> Result<Trajectory, ParseError> {
    let mut lines = Lines::new(text);
    let mut frames = Vec::new();
    // (first line of the frame block, timestep) for error reporting
    let mut starts = Vec::new();

    while !lines.at_end() {
        let (start, _) = expect_item(&mut lines, "ITEM: TIMESTEP")?;
        let (n, l) = lines.next("timestep value")?;
        let timestep: i64 = parse_num(l, n, "timestep")?;

        let (_, _) = expect_item(&mut lines, "ITEM: NUMBER OF ATOMS")?;
        let (count_line, l) = lines.next("atom count")?;
        let declared: usize = parse_num(l, count_line, "atom count")?;

        expect_item(&mut lines, "ITEM: BOX BOUNDS")?;
        let mut lo = [0.0_f64; 3];
        let mut hi = [0.0; 3];
        for axis in 0..3 {
            let (n, l) = lines.next("box bounds")?;
            let mut tok = l.split_whitespace();
            let a = tok.next().unwrap_or("");
            let b = tok.next().ok_or(ParseError::UnexpectedEof {
                line: n,
                context: "box upper bound",
            })?;
            lo[axis] = parse_num(a, n, "box bound")?;
            hi[axis] = parse_num(b, n, "box bound")?;
        }

        let (header_line, header) = expect_item(&mut lines, "ITEM: ATOMS")?;
        let cols = atom_columns(header, header_line)?;
        let rows = lines.take_rows();
        if rows.len() != declared {
            return Err(ParseError::AtomCount {
                line: count_line,
                declared,
                found: rows.len(),
            });
        }
        let mut ids = Vec::with_capacity(declared);
        let mut positions = Vec::with_capacity(declared);
        for (n, row) in rows {
            let fields: Vec<&str> = row.split_whitespace().collect();
            if fields.len() != cols.width {
                return Err(ParseError::RowWidth {
                    line: n,
                    expected: cols.width,
                    found: fields.len(),
                });
            }
            ids.push(parse_num::<AtomId>(fields[cols.id], n, "atom id")?);
            let mut p = [0.0; 3];
            for (axis, &c) in cols.xyz.iter().enumerate() {
                p[axis] = parse_num(fields[c], n, "coordinate")?;
            }
            positions.push(p);
        }
        let mut frame = AtomFrame {
            timestep,
            ids,
            positions,
            bounds: BoxBounds { lo, hi },
        };
        sort_frame_by_id(&mut frame).map_err(|source| ParseError::Frame {
            line: start,
            source,
        })?;
        starts.push((start, timestep));
        frames.push(frame);
    }

    if frames.is_empty() {
        return Err(ParseError::NoFrames);
    }
    // Report id mismatches against the block where they occur.
    let reference = frames[0].ids.clone();
    for (frame, &(line, timestep)) in frames.iter().zip(&starts).skip(1) {
        if frame.ids != reference {
            return Err(ParseError::InconsistentIds { line, timestep });
        }
    }
    let first_line = starts[0].0;
    Trajectory::new(frames).map_err(|source| ParseError::Frame {
        line: first_line,
        source,
    })
}

/// Serializes a trajectory as a text dump with columns `id type x y z`.
/// All atoms are written with type 1. Coordinates use the shortest
/// round-trip float representation, so re-parsing is exact.
pub fn write_lammps_dump(traj: &Trajectory) -> String {
    let mut out = String::new();
    for f in traj.frames() {
        let _ = writeln!(out, "ITEM: TIMESTEP\n{}", f.timestep);
        let _ = writeln!(out, "ITEM: NUMBER OF ATOMS\n{}", f.len());
        let _ = writeln!(out, "ITEM: BOX BOUNDS pp pp pp");
        for a in 0..3 {
            let _ = writeln!(out, "{:?} {:?}", f.bounds.lo[a], f.bounds.hi[a]);
        }
        let _ = writeln!(out, "ITEM: ATOMS id type x y z");
        for (id, p) in f.ids.iter().zip(&f.positions) {
            let _ = writeln!(out, "{} 1 {:?} {:?} {:?}", id, p[0], p[1], p[2]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Synthetic diamond lattice under uniaxial tension

/// Fractional coordinates of the 8-site diamond-cubic conventional cell.
pub const DIAMOND_BASIS: [[f64; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
    [0.5, 0.5, 0.0],
    [0.25, 0.25, 0.25],
    [0.25, 0.75, 0.75],
    [0.75, 0.25, 0.75],
    [0.75, 0.75, 0.25],
];

/// Lattice sites sit this fraction of a cell inside the box origin, so that
/// no site coincides with a box face or a truncation margin.
pub const LATTICE_ORIGIN_OFFSET: f64 = 0.125;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub cells_per_axis: usize,
    /// Conventional cell edge, Å.
    pub lattice_constant: f64,
    /// Engineering strain added along x per frame.
    pub strain_per_step: f64,
    pub poisson_ratio: f64,
    /// Standard deviation of positional jitter, Å.
    pub noise_std: f64,
    pub num_frames: usize,
    /// Timestep label spacing between frames.
    pub timestep_interval: i64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cells_per_axis: 5,
            lattice_constant: 3.567,
            strain_per_step: 0.005,
            poisson_ratio: 0.1,
            noise_std: 0.005,
            num_frames: 10,
            timestep_interval: 1000,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let bad = |m: &str| Err(TrajectoryError::InvalidConfig(m.to_string()));
        if self.cells_per_axis < 1 {
            return bad("cells_per_axis must be >= 1");
        }
        if !(self.lattice_constant > 0.0) {
            return bad("lattice_constant must be positive");
        }
        if !(self.strain_per_step >= 0.0) {
            return bad("strain_per_step must be >= 0");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0");
        }
        if self.num_frames < 2 {
            return bad("num_frames must be >= 2");
        }
        if self.timestep_interval < 1 {
            return bad("timestep_interval must be >= 1");
        }
        let lateral = 1.0 - self.poisson_ratio * (self.num_frames - 1) as f64 * self.strain_per_step;
        if !(lateral > 0.0) {
            return bad("poisson contraction collapses the lattice");
        }
        Ok(())
    }

    /// Per-axis scale factors applied to frame `t`.
    pub fn scale_at(&self, t: usize) -> [f64; 3] {
        let e = t as f64 * self.strain_per_step;
        let lateral = 1.0 - self.poisson_ratio * e;
        [1.0 + e, lateral, lateral]
    }
}

/// Unstrained, noiseless lattice sites in id order (ids start at 1).
pub fn diamond_lattice(cells_per_axis: usize, lattice_constant: f64) -> Vec<[f64; 3]> {
    let mut sites = Vec::with_capacity(8 * cells_per_axis.pow(3));
    for i in 0..cells_per_axis {
        for j in 0..cells_per_axis {
            for k in 0..cells_per_axis {
                for b in &DIAMOND_BASIS {
                    let cell = [i as f64, j as f64, k as f64];
                    let mut p = [0.0; 3];
                    for a in 0..3 {
                        p[a] = (cell[a] + b[a] + LATTICE_ORIGIN_OFFSET) * lattice_constant;
                    }
                    sites.push(p);
                }
            }
        }
    }
    sites
}

pub fn generate_synthetic_trajectory(cfg: &SynthConfig) -> Result<Trajectory, TrajectoryError> {
    cfg.validate()?;
    let sites = diamond_lattice(cfg.cells_per_axis, cfg.lattice_constant);
    let ids: Vec<AtomId> = (1..=sites.len() as AtomId).collect();
    let side = cfg.cells_per_axis as f64 * cfg.lattice_constant;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| TrajectoryError::InvalidConfig(e.to_string()))?;

    let mut frames = Vec::with_capacity(cfg.num_frames);
    for t in 0..cfg.num_frames {
        let s = cfg.scale_at(t);
        let mut lo = [0.0_f64; 3];
        let mut hi = [side * s[0], side * s[1], side * s[2]];
        let positions: Vec<[f64; 3]> = sites
            .iter()
            .map(|p| {
                let mut q = [p[0] * s[0], p[1] * s[1], p[2] * s[2]];
                if cfg.noise_std > 0.0 {
                    for c in &mut q {
                        *c += noise.sample(&mut rng);
                    }
                }
                q
            })
            .collect();
        // Box always encloses the atoms, even for absurd noise levels.
        for p in &positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        frames.push(AtomFrame {
            timestep: t as i64 * cfg.timestep_interval,
            ids: ids.clone(),
            positions,
            bounds: BoxBounds { lo, hi },
        });
    }
    Trajectory::new(frames)
}

// ---------------------------------------------------------------------------
// Boundary truncation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationConfig {
    /// Margin as a percentage of each axis' box extent, in `[0, 50)`.
    pub percent: f64,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self { percent: 5.0 }
    }
}

impl TruncationConfig {
    pub fn new(percent: f64) -> Result<Self, TrajectoryError> {
        if !(0.0..50.0).contains(&percent) {
            return Err(TrajectoryError::InvalidConfig(format!(
                "truncation percent {percent} outside [0, 50)"
            )));
        }
        Ok(Self { percent })
    }
}

/// Ids of atoms whose frame-0 position keeps at least `percent`% of the box
/// extent from both faces on every axis. Membership is decided once, on
/// frame 0, and applies to the whole trajectory.
pub fn truncate_boundary(
    traj: &Trajectory,
    cfg: &TruncationConfig,
) -> Result<BTreeSet<AtomId>, TrajectoryError> {
    TruncationConfig::new(cfg.percent)?;
    let frame = traj.frame(0);
    let b = &frame.bounds;
    let margin: [f64; 3] = std::array::from_fn(|a| cfg.percent / 100.0 * b.extent(a));
    let interior: BTreeSet<AtomId> = frame
        .ids
        .iter()
        .zip(&frame.positions)
        .filter(|(_, p)| {
            (0..3).all(|a| p[a] - b.lo[a] >= margin[a] && b.hi[a] - p[a] >= margin[a])
        })
        .map(|(&id, _)| id)
        .collect();
    if interior.is_empty() {
        return Err(TrajectoryError::EmptyInterior { p: cfg.percent });
    }
    Ok(interior)
}
