//! Discrete domain: rectangular node-centered grids, scalar fields over
//! them, and the (density, concentration) state pair.
//!
//! Node layout is vertex-centered. A periodic grid owns the nodes
//! `0..n` per axis (the duplicate right/top boundary nodes are excluded
//! so plain sums match the periodic summation range); a Neumann grid
//! owns `0..=n` with nodes sitting on the boundary.

use std::fmt;
use std::io::{self, BufRead, Write};

use thiserror::Error;

/// Boundary-condition kind attached to a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryKind {
    /// Solution wraps around both axes.
    Periodic,
    /// Zero-flux (homogeneous Neumann) closure: the discrete fluxes at
    /// the half points nearest each boundary are taken to be zero.
    NeumannSymmetric,
}

impl fmt::Display for BoundaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryKind::Periodic => write!(f, "periodic"),
            BoundaryKind::NeumannSymmetric => write!(f, "neumann"),
        }
    }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("degenerate domain: ({xmin}, {xmax}) x ({ymin}, {ymax})")]
    DegenerateDomain {
        xmin: f64,
        xmax: f64,
        ymin: f64,
        ymax: f64,
    },
    #[error("too few intervals: nx = {nx}, ny = {ny} (need at least 3 each)")]
    TooFewIntervals { nx: usize, ny: usize },
    #[error("sampled function returned non-finite value {value} at node ({i}, {j}) = ({x}, {y})")]
    NonFiniteSample {
        i: usize,
        j: usize,
        x: f64,
        y: f64,
        value: f64,
    },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("malformed field file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Rectangular domain `[xmin, xmax] x [ymin, ymax]` split into `nx` by
/// `ny` uniform intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub nx: usize,
    pub ny: usize,
    pub bc: BoundaryKind,
    pub dx: f64,
    pub dy: f64,
}

impl GridSpec {
    pub fn new(
        xmin: f64,
        xmax: f64,
        ymin: f64,
        ymax: f64,
        nx: usize,
        ny: usize,
        bc: BoundaryKind,
    ) -> Result<Self, GridError> {
        if !(xmax > xmin && ymax > ymin)
            || !xmin.is_finite()
            || !xmax.is_finite()
            || !ymin.is_finite()
            || !ymax.is_finite()
        {
            return Err(GridError::DegenerateDomain {
                xmin,
                xmax,
                ymin,
                ymax,
            });
        }
        if nx < 3 || ny < 3 {
            return Err(GridError::TooFewIntervals { nx, ny });
        }
        Ok(Self {
            xmin,
            xmax,
            ymin,
            ymax,
            nx,
            ny,
            bc,
            dx: (xmax - xmin) / nx as f64,
            dy: (ymax - ymin) / ny as f64,
        })
    }

    /// Convenience constructor for a square domain with equal intervals.
    pub fn square(min: f64, max: f64, n: usize, bc: BoundaryKind) -> Result<Self, GridError> {
        Self::new(min, max, min, max, n, n, bc)
    }

    /// Number of owned nodes along x.
    pub fn npx(&self) -> usize {
        match self.bc {
            BoundaryKind::Periodic => self.nx,
            BoundaryKind::NeumannSymmetric => self.nx + 1,
        }
    }

    /// Number of owned nodes along y.
    pub fn npy(&self) -> usize {
        match self.bc {
            BoundaryKind::Periodic => self.ny,
            BoundaryKind::NeumannSymmetric => self.ny + 1,
        }
    }

    pub fn node_count(&self) -> usize {
        self.npx() * self.npy()
    }

    /// x-coordinate of node `i`. Computed as an affine map of the index
    /// ratio so node `nx` reproduces `xmax` without cumulative drift.
    pub fn x(&self, i: usize) -> f64 {
        self.xmin + (i as f64 / self.nx as f64) * (self.xmax - self.xmin)
    }

    pub fn y(&self, j: usize) -> f64 {
        self.ymin + (j as f64 / self.ny as f64) * (self.ymax - self.ymin)
    }

    /// True for nodes on the domain boundary (always false on periodic
    /// grids, which own no boundary duplicates).
    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        match self.bc {
            BoundaryKind::Periodic => false,
            BoundaryKind::NeumannSymmetric => i == 0 || i == self.nx || j == 0 || j == self.ny,
        }
    }
}

/// Construct a grid; alias kept close to the mathematical vocabulary.
pub fn make_grid(
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
    nx: usize,
    ny: usize,
    bc: BoundaryKind,
) -> Result<GridSpec, GridError> {
    GridSpec::new(xmin, xmax, ymin, ymax, nx, ny, bc)
}

/// Nodal scalar field over a [`GridSpec`]. Values are stored row-major
/// with `j` as the row index: entry `(i, j)` lives at `j * npx + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            values: vec![0.0; grid.node_count()],
            grid,
        }
    }

    pub fn constant(grid: GridSpec, v: f64) -> Self {
        Self {
            values: vec![v; grid.node_count()],
            grid,
        }
    }

    /// Build a field from raw values (row-major, row = fixed j).
    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.node_count() {
            return Err(GridError::GridMismatch);
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.grid.npx() && j < self.grid.npy());
        j * self.grid.npx() + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.npx() + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.idx(i, j);
        self.values[idx] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Entrywise map into a new field.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Entrywise combination of two fields on the same grid.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        debug_assert_eq!(self.grid, other.grid);
        Field {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Write the field as a CSV matrix (row = fixed j, columns = i)
    /// preceded by a one-line JSON header with the grid metadata.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "{{\"xmin\":{},\"xmax\":{},\"ymin\":{},\"ymax\":{},\"nx\":{},\"ny\":{},\"bc\":\"{}\"}}",
            fmt_f64(self.grid.xmin),
            fmt_f64(self.grid.xmax),
            fmt_f64(self.grid.ymin),
            fmt_f64(self.grid.ymax),
            self.grid.nx,
            self.grid.ny,
            self.grid.bc
        )?;
        for j in 0..self.grid.npy() {
            let row: Vec<String> = (0..self.grid.npx())
                .map(|i| fmt_f64(self.get(i, j)))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Parse a field written by [`Field::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> Result<Field, GridError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| GridError::Parse("empty file".into()))??;
        let grid = parse_header(&header)?;
        let mut values = Vec::with_capacity(grid.node_count());
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for tok in line.split(',') {
                let v: f64 = tok
                    .trim()
                    .parse()
                    .map_err(|_| GridError::Parse(format!("bad number: {tok:?}")))?;
                values.push(v);
            }
        }
        Field::from_values(grid, values)
    }
}

/// Shortest decimal representation that round-trips to the same f64.
pub(crate) fn fmt_f64(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains(['.', 'e', 'E', 'n', 'i']) {
        s.push_str(".0");
    }
    s
}

fn parse_header(line: &str) -> Result<GridSpec, GridError> {
    let body = line
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| GridError::Parse("missing JSON header".into()))?;
    let mut xmin = None;
    let mut xmax = None;
    let mut ymin = None;
    let mut ymax = None;
    let mut nx = None;
    let mut ny = None;
    let mut bc = None;
    for pair in body.split(',') {
        let (k, v) = pair
            .split_once(':')
            .ok_or_else(|| GridError::Parse(format!("bad header entry: {pair:?}")))?;
        let k = k.trim().trim_matches('"');
        let v = v.trim();
        match k {
            "xmin" => xmin = v.parse().ok(),
            "xmax" => xmax = v.parse().ok(),
            "ymin" => ymin = v.parse().ok(),
            "ymax" => ymax = v.parse().ok(),
            "nx" => nx = v.parse().ok(),
            "ny" => ny = v.parse().ok(),
            "bc" => {
                bc = match v.trim_matches('"') {
                    "periodic" => Some(BoundaryKind::Periodic),
                    "neumann" => Some(BoundaryKind::NeumannSymmetric),
                    _ => None,
                }
            }
            other => return Err(GridError::Parse(format!("unknown header key: {other:?}"))),
        }
    }
    match (xmin, xmax, ymin, ymax, nx, ny, bc) {
        (Some(x0), Some(x1), Some(y0), Some(y1), Some(nx), Some(ny), Some(bc)) => {
            GridSpec::new(x0, x1, y0, y1, nx, ny, bc)
        }
        _ => Err(GridError::Parse("incomplete header".into())),
    }
}

/// Sample a scalar function onto the grid nodes.
pub fn sample_field(grid: &GridSpec, f: impl Fn(f64, f64) -> f64) -> Result<Field, GridError> {
    let mut out = Field::zeros(*grid);
    for j in 0..grid.npy() {
        for i in 0..grid.npx() {
            let (x, y) = (grid.x(i), grid.y(j));
            let v = f(x, y);
            if !v.is_finite() {
                return Err(GridError::NonFiniteSample {
                    i,
                    j,
                    x,
                    y,
                    value: v,
                });
            }
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Paired density/concentration fields at one time level.
#[derive(Debug, Clone)]
pub struct State {
    pub rho: Field,
    pub c: Field,
    pub t: f64,
}

impl State {
    pub fn new(rho: Field, c: Field, t: f64) -> Result<Self, GridError> {
        if rho.grid() != c.grid() {
            return Err(GridError::GridMismatch);
        }
        Ok(Self { rho, c, t })
    }

    pub fn grid(&self) -> &GridSpec {
        self.rho.grid()
    }
}
