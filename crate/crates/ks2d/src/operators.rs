//! Discrete difference operators.
//!
//! Everything is built on two primitives: the undivided second
//! difference `delta2 v = v_{k+1} - 2 v_k + v_{k-1}` and the weighted
//! form `delta(M delta g)` whose half-point weights are geometric means
//! of the nodal values. The symmetrized operators `tau` used by the
//! density equation are thin wrappers around the weighted primitive.
//!
//! Operators are undivided: callers scale by `mu = dt / dx^2` (and
//! friends) themselves, matching how the time steppers are written.
//!
//! Boundary handling:
//! * periodic grids wrap indices;
//! * Neumann grids implement the zero-flux closure by taking the
//!   discrete flux at the half points nearest each boundary to be zero,
//!   which is what makes the plain nodal sums conserve mass exactly.

use thiserror::Error;

use crate::grid::{BoundaryKind, Field};
use crate::linalg::{CyclicTridiagSystem, LineSystem, TridiagSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("weight field must be strictly positive, found {value} at node ({i}, {j})")]
    NonPositiveWeight { i: usize, j: usize, value: f64 },
    #[error("fields live on different grids")]
    GridMismatch,
}

/// How the stencil treats the domain edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Closure {
    /// Wrap indices around the axis.
    Periodic,
    /// Zero-flux: the extreme half-point fluxes along the axis vanish,
    /// so boundary rows are zero and their neighbours lose one coupling.
    ZeroFlux,
    /// Full stencil at interior nodes, zero rows on the boundary; used
    /// when boundary values are pinned externally (Dirichlet closures).
    PinnedInterior,
}

pub(crate) fn closure_for(bc: BoundaryKind) -> Closure {
    match bc {
        BoundaryKind::Periodic => Closure::Periodic,
        BoundaryKind::NeumannSymmetric => Closure::ZeroFlux,
    }
}

/// Half-point weights along one axis: entry `k` of line `l` holds the
/// geometric mean of the two nodes the half point sits between.
#[derive(Debug, Clone)]
pub struct HalfPointCoeffs {
    pub axis: Axis,
    /// Number of half points per line.
    pub per_line: usize,
    /// Number of lines (nodes along the other axis).
    pub lines: usize,
    values: Vec<f64>,
}

impl HalfPointCoeffs {
    /// Weight at half point `k + 1/2` of line `l`.
    #[inline]
    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.values[l * self.per_line + k]
    }
}

fn check_positive(m: &Field) -> Result<(), OperatorError> {
    for j in 0..m.grid().npy() {
        for i in 0..m.grid().npx() {
            let v = m.get(i, j);
            if v <= 0.0 || !v.is_finite() {
                return Err(OperatorError::NonPositiveWeight { i, j, value: v });
            }
        }
    }
    Ok(())
}

/// Geometric-mean half-point weights of `m` along `axis`. Half points
/// beyond a Neumann boundary are not materialized.
pub fn half_point_coeffs(m: &Field, axis: Axis) -> Result<HalfPointCoeffs, OperatorError> {
    check_positive(m)?;
    let (np_axis, lines) = match axis {
        Axis::X => (m.grid().npx(), m.grid().npy()),
        Axis::Y => (m.grid().npy(), m.grid().npx()),
    };
    let per_line = match m.grid().bc {
        BoundaryKind::Periodic => np_axis,
        BoundaryKind::NeumannSymmetric => np_axis - 1,
    };
    let at = |k: usize, l: usize| match axis {
        Axis::X => m.get(k, l),
        Axis::Y => m.get(l, k),
    };
    let mut values = Vec::with_capacity(per_line * lines);
    for l in 0..lines {
        for k in 0..per_line {
            let next = (k + 1) % np_axis;
            values.push((at(k, l) * at(next, l)).sqrt());
        }
    }
    Ok(HalfPointCoeffs {
        axis,
        per_line,
        lines,
        values,
    })
}

/// Reads a field along lines of the given axis.
#[inline]
pub(crate) fn line_get(f: &Field, axis: Axis, k: usize, line: usize) -> f64 {
    match axis {
        Axis::X => f.get(k, line),
        Axis::Y => f.get(line, k),
    }
}

#[inline]
pub(crate) fn line_set(f: &mut Field, axis: Axis, k: usize, line: usize, v: f64) {
    match axis {
        Axis::X => f.set(k, line, v),
        Axis::Y => f.set(line, k, v),
    }
}

pub(crate) fn axis_len(f: &Field, axis: Axis) -> usize {
    match axis {
        Axis::X => f.grid().npx(),
        Axis::Y => f.grid().npy(),
    }
}

pub(crate) fn line_count(f: &Field, axis: Axis) -> usize {
    match axis {
        Axis::X => f.grid().npy(),
        Axis::Y => f.grid().npx(),
    }
}

/// Undivided second difference along `axis` with the grid's closure.
pub fn apply_delta2(f: &Field, axis: Axis) -> Field {
    delta2_with_closure(f, axis, closure_for(f.grid().bc))
}

pub(crate) fn delta2_with_closure(f: &Field, axis: Axis, closure: Closure) -> Field {
    let n = axis_len(f, axis);
    let lines = line_count(f, axis);
    let mut out = Field::zeros(*f.grid());
    for l in 0..lines {
        match closure {
            // Flux (difference-of-differences) form throughout, so the
            // unit-weight reduction of the weighted operator is bit-exact.
            Closure::Periodic => {
                for k in 0..n {
                    let kp = (k + 1) % n;
                    let km = (k + n - 1) % n;
                    let up = line_get(f, axis, kp, l) - line_get(f, axis, k, l);
                    let down = line_get(f, axis, k, l) - line_get(f, axis, km, l);
                    line_set(&mut out, axis, k, l, up - down);
                }
            }
            Closure::ZeroFlux => {
                // Fluxes at half points 1/2 and n-3/2 vanish; rows 0 and
                // n-1 are zero.
                for k in 1..n - 1 {
                    let up = if k == n - 2 {
                        0.0
                    } else {
                        line_get(f, axis, k + 1, l) - line_get(f, axis, k, l)
                    };
                    let down = if k == 1 {
                        0.0
                    } else {
                        line_get(f, axis, k, l) - line_get(f, axis, k - 1, l)
                    };
                    line_set(&mut out, axis, k, l, up - down);
                }
            }
            Closure::PinnedInterior => {
                for k in 1..n - 1 {
                    let up = line_get(f, axis, k + 1, l) - line_get(f, axis, k, l);
                    let down = line_get(f, axis, k, l) - line_get(f, axis, k - 1, l);
                    line_set(&mut out, axis, k, l, up - down);
                }
            }
        }
    }
    out
}

/// Weighted second difference `delta(M delta g)` along `axis`, half-point
/// `M` values taken as geometric means. This is the symmetric core of
/// the density operators: `sqrt(M) tau(h)` with `g = h / sqrt(M)`.
pub fn apply_weighted_delta2(m: &Field, g: &Field, axis: Axis) -> Result<Field, OperatorError> {
    if m.grid() != g.grid() {
        return Err(OperatorError::GridMismatch);
    }
    check_positive(m)?;
    Ok(weighted_delta2_with_closure(
        m,
        g,
        axis,
        closure_for(m.grid().bc),
    ))
}

pub(crate) fn weighted_delta2_with_closure(
    m: &Field,
    g: &Field,
    axis: Axis,
    closure: Closure,
) -> Field {
    let n = axis_len(g, axis);
    let lines = line_count(g, axis);
    let mut out = Field::zeros(*g.grid());
    let mw =
        |k: usize, kn: usize, l: usize| (line_get(m, axis, k, l) * line_get(m, axis, kn, l)).sqrt();
    for l in 0..lines {
        match closure {
            Closure::Periodic => {
                for k in 0..n {
                    let kp = (k + 1) % n;
                    let km = (k + n - 1) % n;
                    let up = mw(k, kp, l) * (line_get(g, axis, kp, l) - line_get(g, axis, k, l));
                    let down = mw(km, k, l) * (line_get(g, axis, k, l) - line_get(g, axis, km, l));
                    line_set(&mut out, axis, k, l, up - down);
                }
            }
            Closure::ZeroFlux => {
                for k in 1..n - 1 {
                    let up = if k == n - 2 {
                        0.0
                    } else {
                        mw(k, k + 1, l) * (line_get(g, axis, k + 1, l) - line_get(g, axis, k, l))
                    };
                    let down = if k == 1 {
                        0.0
                    } else {
                        mw(k - 1, k, l) * (line_get(g, axis, k, l) - line_get(g, axis, k - 1, l))
                    };
                    line_set(&mut out, axis, k, l, up - down);
                }
            }
            Closure::PinnedInterior => {
                for k in 1..n - 1 {
                    let up =
                        mw(k, k + 1, l) * (line_get(g, axis, k + 1, l) - line_get(g, axis, k, l));
                    let down =
                        mw(k - 1, k, l) * (line_get(g, axis, k, l) - line_get(g, axis, k - 1, l));
                    line_set(&mut out, axis, k, l, up - down);
                }
            }
        }
    }
    out
}

/// The symmetrized density operator:
/// `tau h = (1 / sqrt(M)) delta(M delta(h / sqrt(M)))`, undivided.
pub fn apply_tau(m: &Field, h: &Field, axis: Axis) -> Result<Field, OperatorError> {
    if m.grid() != h.grid() {
        return Err(OperatorError::GridMismatch);
    }
    check_positive(m)?;
    let sqrt_m = m.map(f64::sqrt);
    let g = h.zip_map(&sqrt_m, |hv, sm| hv / sm);
    let s = weighted_delta2_with_closure(m, &g, axis, closure_for(m.grid().bc));
    Ok(s.zip_map(&sqrt_m, |sv, sm| sv / sm))
}

/// Composite operator `tau_x tau_y h`, defined as the composition.
pub fn apply_tau_xy(m: &Field, h: &Field) -> Result<Field, OperatorError> {
    let inner = apply_tau(m, h, Axis::Y)?;
    apply_tau(m, &inner, Axis::X)
}

/// Coefficients of `(1 - mu tau)` on one grid line, assembled in the
/// row-scaled variable `g = h / sqrt(M)` (equivalently `rho / M`): the
/// diagonal at node k is `1 + mu (a + b)` against off-diagonal entries
/// `-mu a`, `-mu b` with `a = sqrt(M_{k-1} / M_k)`, `b = sqrt(M_{k+1} / M_k)`,
/// so every row is strictly diagonally dominant for positive `M`.
/// The right-hand side is left zeroed for the caller to fill.
pub fn assemble_tau_line(
    m: &Field,
    mu: f64,
    line: usize,
    axis: Axis,
) -> Result<LineSystem, OperatorError> {
    check_positive(m)?;
    let n = axis_len(m, axis);
    match m.grid().bc {
        BoundaryKind::Periodic => {
            let mut lower = vec![0.0; n - 1];
            let mut main = vec![0.0; n];
            let mut upper = vec![0.0; n - 1];
            let mut corner_first = 0.0;
            let mut corner_last = 0.0;
            fill_tau_line_periodic(
                m,
                mu,
                line,
                axis,
                &mut lower,
                &mut main,
                &mut upper,
                &mut corner_first,
                &mut corner_last,
            );
            debug_assert!(line_dominant(
                &lower,
                &main,
                &upper,
                corner_first,
                corner_last
            ));
            Ok(LineSystem::Cyclic(CyclicTridiagSystem {
                lower,
                main,
                upper,
                rhs: vec![0.0; n],
                corner_first,
                corner_last,
            }))
        }
        BoundaryKind::NeumannSymmetric => {
            let mut lower = vec![0.0; n - 1];
            let mut main = vec![0.0; n];
            let mut upper = vec![0.0; n - 1];
            fill_tau_line_zero_flux(m, mu, line, axis, &mut lower, &mut main, &mut upper);
            debug_assert!(line_dominant(&lower, &main, &upper, 0.0, 0.0));
            Ok(LineSystem::Open(TridiagSystem {
                lower,
                main,
                upper,
                rhs: vec![0.0; n],
            }))
        }
    }
}

fn line_dominant(lower: &[f64], main: &[f64], upper: &[f64], cf: f64, cl: f64) -> bool {
    let n = main.len();
    (0..n).all(|k| {
        let mut off = 0.0;
        if k > 0 {
            off += lower[k - 1].abs();
        }
        if k + 1 < n {
            off += upper[k].abs();
        }
        if k == 0 {
            off += cf.abs();
        }
        if k == n - 1 {
            off += cl.abs();
        }
        main[k].abs() > off
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fill_tau_line_periodic(
    m: &Field,
    mu: f64,
    line: usize,
    axis: Axis,
    lower: &mut [f64],
    main: &mut [f64],
    upper: &mut [f64],
    corner_first: &mut f64,
    corner_last: &mut f64,
) {
    let n = main.len();
    for k in 0..n {
        let mk = line_get(m, axis, k, line);
        let a = (line_get(m, axis, (k + n - 1) % n, line) / mk).sqrt();
        let b = (line_get(m, axis, (k + 1) % n, line) / mk).sqrt();
        main[k] = 1.0 + mu * (a + b);
        if k > 0 {
            lower[k - 1] = -mu * a;
        } else {
            *corner_first = -mu * a;
        }
        if k + 1 < n {
            upper[k] = -mu * b;
        } else {
            *corner_last = -mu * b;
        }
    }
}

pub(crate) fn fill_tau_line_zero_flux(
    m: &Field,
    mu: f64,
    line: usize,
    axis: Axis,
    lower: &mut [f64],
    main: &mut [f64],
    upper: &mut [f64],
) {
    let n = main.len();
    main[0] = 1.0;
    upper[0] = 0.0;
    main[n - 1] = 1.0;
    lower[n - 2] = 0.0;
    for k in 1..n - 1 {
        let mk = line_get(m, axis, k, line);
        let a = if k == 1 {
            0.0
        } else {
            (line_get(m, axis, k - 1, line) / mk).sqrt()
        };
        let b = if k == n - 2 {
            0.0
        } else {
            (line_get(m, axis, k + 1, line) / mk).sqrt()
        };
        main[k] = 1.0 + mu * (a + b);
        lower[k - 1] = -mu * a;
        upper[k] = -mu * b;
    }
}

/// Coefficients of `(scale - coeff * delta2)` on a line; used by the
/// concentration sweeps.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fill_delta2_line(
    scale: f64,
    coeff: f64,
    n: usize,
    closure: Closure,
    lower: &mut [f64],
    main: &mut [f64],
    upper: &mut [f64],
    corner_first: &mut f64,
    corner_last: &mut f64,
) {
    match closure {
        Closure::Periodic => {
            for k in 0..n {
                main[k] = scale + 2.0 * coeff;
                if k > 0 {
                    lower[k - 1] = -coeff;
                }
                if k + 1 < n {
                    upper[k] = -coeff;
                }
            }
            *corner_first = -coeff;
            *corner_last = -coeff;
        }
        Closure::ZeroFlux => {
            main[0] = scale;
            upper[0] = 0.0;
            main[n - 1] = scale;
            lower[n - 2] = 0.0;
            for k in 1..n - 1 {
                let couplings = match k {
                    1 if k == n - 2 => 0.0,
                    1 => 1.0,
                    _ if k == n - 2 => 1.0,
                    _ => 2.0,
                };
                main[k] = scale + coeff * couplings;
                lower[k - 1] = if k == 1 { 0.0 } else { -coeff };
                upper[k] = if k == n - 2 { 0.0 } else { -coeff };
            }
        }
        Closure::PinnedInterior => unreachable!("pinned lines are assembled by the schemes"),
    }
}

/// `sum sqrt(M) * tauh` over the owned nodes: the discrete mass seen by
/// the density update, which the tau operators telescope to zero.
pub fn apply_mass_weighted_sum(m: &Field, tauh: &Field) -> f64 {
    debug_assert_eq!(m.grid(), tauh.grid());
    m.values()
        .iter()
        .zip(tauh.values())
        .map(|(&mv, &tv)| mv.sqrt() * tv)
        .sum()
}
