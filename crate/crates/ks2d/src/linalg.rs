//! Direct tridiagonal solvers (standard and cyclic), a matrix-free
//! conjugate-gradient solver, and dense reference routines used as test
//! oracles.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("singular system: zero pivot at row {row}")]
    Singular { row: usize },
    #[error("cg did not converge within {iters} iterations (relative residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Tridiagonal system `A x = rhs`. `lower`/`upper` have length `m - 1`,
/// `main` and `rhs` length `m`.
#[derive(Debug, Clone)]
pub struct TridiagSystem {
    pub lower: Vec<f64>,
    pub main: Vec<f64>,
    pub upper: Vec<f64>,
    pub rhs: Vec<f64>,
}

/// Tridiagonal system with wrap-around corner couplings:
/// `corner_first = A[0][m-1]`, `corner_last = A[m-1][0]`.
#[derive(Debug, Clone)]
pub struct CyclicTridiagSystem {
    pub lower: Vec<f64>,
    pub main: Vec<f64>,
    pub upper: Vec<f64>,
    pub rhs: Vec<f64>,
    pub corner_first: f64,
    pub corner_last: f64,
}

/// Either line-system shape produced by the operator assembly.
#[derive(Debug, Clone)]
pub enum LineSystem {
    Open(TridiagSystem),
    Cyclic(CyclicTridiagSystem),
}

impl LineSystem {
    pub fn rhs_mut(&mut self) -> &mut [f64] {
        match self {
            LineSystem::Open(s) => &mut s.rhs,
            LineSystem::Cyclic(s) => &mut s.rhs,
        }
    }

    pub fn solve(&self) -> Result<Vec<f64>, LinalgError> {
        match self {
            LineSystem::Open(s) => solve_tridiagonal(s),
            LineSystem::Cyclic(s) => solve_cyclic_tridiagonal(s),
        }
    }
}

/// Thomas algorithm, O(m). The assembled scheme systems are strictly
/// diagonally dominant, so no pivoting is performed; a vanishing pivot
/// is reported as a singular system.
pub fn solve_tridiagonal(sys: &TridiagSystem) -> Result<Vec<f64>, LinalgError> {
    let m = sys.main.len();
    if sys.rhs.len() != m || sys.lower.len() + 1 != m || sys.upper.len() + 1 != m {
        return Err(LinalgError::Dimension(format!(
            "main {}, lower {}, upper {}, rhs {}",
            m,
            sys.lower.len(),
            sys.upper.len(),
            sys.rhs.len()
        )));
    }
    let mut x = sys.rhs.clone();
    let mut scratch = vec![0.0; m];
    thomas_in_place(&sys.lower, &sys.main, &sys.upper, &mut x, &mut scratch)?;
    Ok(x)
}

/// In-place Thomas kernel: `rhs` is overwritten with the solution,
/// `scratch` must have length `m`. Split out so the sweep loops can
/// reuse buffers across many lines.
pub(crate) fn thomas_in_place(
    lower: &[f64],
    main: &[f64],
    upper: &[f64],
    rhs: &mut [f64],
    scratch: &mut [f64],
) -> Result<(), LinalgError> {
    let m = main.len();
    if main[0] == 0.0 {
        return Err(LinalgError::Singular { row: 0 });
    }
    let mut beta = main[0];
    rhs[0] /= beta;
    for k in 1..m {
        scratch[k] = upper[k - 1] / beta;
        beta = main[k] - lower[k - 1] * scratch[k];
        if beta == 0.0 {
            return Err(LinalgError::Singular { row: k });
        }
        rhs[k] = (rhs[k] - lower[k - 1] * rhs[k - 1]) / beta;
    }
    for k in (0..m - 1).rev() {
        rhs[k] -= scratch[k + 1] * rhs[k + 1];
    }
    Ok(())
}

/// Cyclic tridiagonal solve via Sherman-Morrison rank-one correction:
/// two Thomas solves on a modified matrix.
pub fn solve_cyclic_tridiagonal(sys: &CyclicTridiagSystem) -> Result<Vec<f64>, LinalgError> {
    let m = sys.main.len();
    if m < 3 {
        return Err(LinalgError::Dimension(format!(
            "cyclic system needs m >= 3, got {m}"
        )));
    }
    let mut x = sys.rhs.clone();
    let mut main_mod = vec![0.0; m];
    let mut z = vec![0.0; m];
    let mut scratch = vec![0.0; m];
    cyclic_in_place(
        &sys.lower,
        &sys.main,
        &sys.upper,
        sys.corner_first,
        sys.corner_last,
        &mut x,
        &mut main_mod,
        &mut z,
        &mut scratch,
    )?;
    Ok(x)
}

/// In-place cyclic kernel; `rhs` is overwritten with the solution and
/// the three scratch slices must have length `m`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn cyclic_in_place(
    lower: &[f64],
    main: &[f64],
    upper: &[f64],
    corner_first: f64,
    corner_last: f64,
    rhs: &mut [f64],
    main_mod: &mut [f64],
    z: &mut [f64],
    scratch: &mut [f64],
) -> Result<(), LinalgError> {
    let m = main.len();
    let alpha = corner_first;
    let beta = corner_last;
    // A = T + u v^T with u = (gamma, 0, .., beta), v = (1, 0, .., alpha/gamma),
    // so u v^T carries exactly the two corner entries, and T is the
    // tridiagonal part with its first/last diagonal entries reduced
    // accordingly.
    let gamma = -main[0];
    main_mod.copy_from_slice(main);
    main_mod[0] = main[0] - gamma;
    main_mod[m - 1] = main[m - 1] - alpha * beta / gamma;

    thomas_in_place(lower, main_mod, upper, rhs, scratch)?;

    z.fill(0.0);
    z[0] = gamma;
    z[m - 1] = beta;
    thomas_in_place(lower, main_mod, upper, z, scratch)?;

    let denom = 1.0 + z[0] + (alpha / gamma) * z[m - 1];
    if denom == 0.0 {
        return Err(LinalgError::Singular { row: 0 });
    }
    let factor = (rhs[0] + (alpha / gamma) * rhs[m - 1]) / denom;
    for k in 0..m {
        rhs[k] -= factor * z[k];
    }
    Ok(())
}

/// Matrix-free conjugate gradients for symmetric positive definite
/// operators. `apply(x, out)` writes `A x` into `out`. Returns the
/// solution and the iteration count; converged when the residual norm
/// drops below `tol * ||rhs||`.
pub fn solve_cg(
    apply: impl Fn(&[f64], &mut [f64]),
    rhs: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    maxiter: usize,
) -> Result<(Vec<f64>, usize), LinalgError> {
    let m = rhs.len();
    let mut x = match x0 {
        Some(x0) => {
            if x0.len() != m {
                return Err(LinalgError::Dimension("x0 length".into()));
            }
            x0.to_vec()
        }
        None => vec![0.0; m],
    };
    let norm_rhs = norm2(rhs);
    if norm_rhs == 0.0 {
        return Ok((vec![0.0; m], 0));
    }
    let target = tol * norm_rhs;

    let mut ax = vec![0.0; m];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut rr = dot(&r, &r);
    if rr.sqrt() <= target {
        return Ok((x, 0));
    }
    let mut p = r.clone();
    let mut ap = vec![0.0; m];
    for iter in 1..=maxiter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(LinalgError::Singular { row: iter });
        }
        let alpha = rr / pap;
        for k in 0..m {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= target {
            return Ok((x, iter));
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..m {
            p[k] = r[k] + beta * p[k];
        }
    }
    Err(LinalgError::NoConvergence {
        iters: maxiter,
        residual: rr.sqrt() / norm_rhs,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// Dense reference routines. These exist to cross-check the fast paths in
// tests; they deliberately share no code with the solvers above.
// ---------------------------------------------------------------------------

/// Materialize a linear operator column by column: column k is `apply(e_k)`.
pub fn dense_from_operator(apply: impl Fn(&[f64], &mut [f64]), m: usize) -> Vec<Vec<f64>> {
    let mut cols = vec![vec![0.0; m]; m];
    let mut e = vec![0.0; m];
    for (k, col) in cols.iter_mut().enumerate() {
        e[k] = 1.0;
        apply(&e, col);
        e[k] = 0.0;
    }
    // Transpose columns into rows.
    let mut a = vec![vec![0.0; m]; m];
    for (k, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            a[r][k] = v;
        }
    }
    a
}

/// Dense matrix of a tridiagonal system.
pub fn dense_from_tridiag(sys: &TridiagSystem) -> Vec<Vec<f64>> {
    let m = sys.main.len();
    let mut a = vec![vec![0.0; m]; m];
    for k in 0..m {
        a[k][k] = sys.main[k];
        if k + 1 < m {
            a[k][k + 1] = sys.upper[k];
            a[k + 1][k] = sys.lower[k];
        }
    }
    a
}

/// Dense matrix of a cyclic tridiagonal system.
pub fn dense_from_cyclic(sys: &CyclicTridiagSystem) -> Vec<Vec<f64>> {
    let m = sys.main.len();
    let mut a = dense_from_tridiag(&TridiagSystem {
        lower: sys.lower.clone(),
        main: sys.main.clone(),
        upper: sys.upper.clone(),
        rhs: sys.rhs.clone(),
    });
    a[0][m - 1] += sys.corner_first;
    a[m - 1][0] += sys.corner_last;
    a
}

/// Gaussian elimination with partial pivoting. Reference solver only.
pub fn solve_dense(a: &[Vec<f64>], rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let m = rhs.len();
    let mut aug: Vec<Vec<f64>> = a
        .iter()
        .zip(rhs)
        .map(|(row, &b)| {
            let mut r = row.clone();
            r.push(b);
            r
        })
        .collect();
    for col in 0..m {
        let pivot_row = (col..m)
            .max_by(|&r1, &r2| aug[r1][col].abs().total_cmp(&aug[r2][col].abs()))
            .unwrap();
        if aug[pivot_row][col] == 0.0 {
            return Err(LinalgError::Singular { row: col });
        }
        aug.swap(col, pivot_row);
        for row in col + 1..m {
            let f = aug[row][col] / aug[col][col];
            if f != 0.0 {
                for k in col..=m {
                    aug[row][k] -= f * aug[col][k];
                }
            }
        }
    }
    let mut x = vec![0.0; m];
    for row in (0..m).rev() {
        let mut s = aug[row][m];
        for k in row + 1..m {
            s -= aug[row][k] * x[k];
        }
        x[row] = s / aug[row][row];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn random_dd_system(rng: &mut SplitMix64, m: usize) -> TridiagSystem {
        let lower: Vec<f64> = (0..m - 1).map(|_| rng.range(-1.0, 1.0)).collect();
        let upper: Vec<f64> = (0..m - 1).map(|_| rng.range(-1.0, 1.0)).collect();
        let main: Vec<f64> = (0..m)
            .map(|k| {
                let off = if k > 0 { lower[k - 1].abs() } else { 0.0 }
                    + if k < m - 1 { upper[k].abs() } else { 0.0 };
                let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
                sign * (off + rng.range(0.5, 1.5))
            })
            .collect();
        let rhs: Vec<f64> = (0..m).map(|_| rng.range(-2.0, 2.0)).collect();
        TridiagSystem {
            lower,
            main,
            upper,
            rhs,
        }
    }

    #[test]
    fn identity_system() {
        let sys = TridiagSystem {
            lower: vec![0.0, 0.0],
            main: vec![1.0, 1.0, 1.0],
            upper: vec![0.0, 0.0],
            rhs: vec![3.0, 4.0, 5.0],
        };
        assert_eq!(solve_tridiagonal(&sys).unwrap(), vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn symmetric_two_by_two() {
        let sys = TridiagSystem {
            lower: vec![-1.0],
            main: vec![2.0, 2.0],
            upper: vec![-1.0],
            rhs: vec![1.0, 1.0],
        };
        let x = solve_tridiagonal(&sys).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_system_matches_dense_oracle() {
        let mut rng = SplitMix64::new(1);
        let sys = random_dd_system(&mut rng, 8);
        let x = solve_tridiagonal(&sys).unwrap();
        let y = solve_dense(&dense_from_tridiag(&sys), &sys.rhs).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn cyclic_zero_rhs() {
        let sys = CyclicTridiagSystem {
            lower: vec![-1.0, -1.0],
            main: vec![2.0, 2.0, 2.0],
            upper: vec![-1.0, -1.0],
            rhs: vec![0.0, 0.0, 0.0],
            corner_first: -1.0,
            corner_last: -1.0,
        };
        let x = solve_cyclic_tridiagonal(&sys).unwrap();
        assert!(x.iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn circulant_row_sum_one_gives_constant_solution() {
        let sys = CyclicTridiagSystem {
            lower: vec![-1.0; 3],
            main: vec![3.0; 4],
            upper: vec![-1.0; 3],
            rhs: vec![1.0; 4],
            corner_first: -1.0,
            corner_last: -1.0,
        };
        let x = solve_cyclic_tridiagonal(&sys).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn cyclic_random_matches_dense_oracle() {
        let mut rng = SplitMix64::new(2);
        let base = random_dd_system(&mut rng, 9);
        // Bump the first/last diagonal so dominance survives the corners.
        let mut main = base.main.clone();
        let cf = rng.range(-0.4, 0.4);
        let cl = rng.range(-0.4, 0.4);
        main[0] += main[0].signum() * cf.abs();
        main[8] += main[8].signum() * cl.abs();
        let sys = CyclicTridiagSystem {
            lower: base.lower,
            main,
            upper: base.upper,
            rhs: base.rhs,
            corner_first: cf,
            corner_last: cl,
        };
        let x = solve_cyclic_tridiagonal(&sys).unwrap();
        let y = solve_dense(&dense_from_cyclic(&sys), &sys.rhs).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn cg_identity_converges_in_one_iteration() {
        let rhs = vec![1.0, -2.0, 3.5];
        let (x, iters) = solve_cg(|v, out| out.copy_from_slice(v), &rhs, None, 1e-12, 10).unwrap();
        assert!(iters <= 1);
        for (a, b) in x.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_random_spd_matches_dense_oracle() {
        let mut rng = SplitMix64::new(3);
        let m = 16;
        // SPD matrix B^T B + I.
        let b: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..m).map(|_| rng.range(-1.0, 1.0)).collect())
            .collect();
        let mut a = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                let mut s = 0.0;
                for row in b.iter() {
                    s += row[i] * row[j];
                }
                a[i][j] = s + if i == j { 1.0 } else { 0.0 };
            }
        }
        let rhs: Vec<f64> = (0..m).map(|_| rng.range(-1.0, 1.0)).collect();
        let apply = |v: &[f64], out: &mut [f64]| {
            for i in 0..m {
                out[i] = a[i].iter().zip(v).map(|(x, y)| x * y).sum();
            }
        };
        let (x, _) = solve_cg(apply, &rhs, None, 1e-12, 1000).unwrap();
        let y = solve_dense(&a, &rhs).unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() <= 1e-10 * q.abs().max(1.0));
        }
    }

    #[test]
    fn cg_reports_nonconvergence_with_residual() {
        let m = 8;
        // Laplacian-like SPD system with an absurd iteration cap.
        let apply = |v: &[f64], out: &mut [f64]| {
            for i in 0..m {
                let left = if i > 0 { v[i - 1] } else { 0.0 };
                let right = if i + 1 < m { v[i + 1] } else { 0.0 };
                out[i] = 2.0 * v[i] - left - right;
            }
        };
        let rhs = vec![1.0; m];
        match solve_cg(apply, &rhs, None, 1e-14, 1) {
            Err(LinalgError::NoConvergence { iters, residual }) => {
                assert_eq!(iters, 1);
                assert!(residual > 0.0);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn cg_iterations_grow_with_laplacian_size() {
        // Matrix-free (I - mu * periodic 2D Laplacian) at fixed mu: the
        // condition number, and with it the iteration count, grows with
        // the grid.
        let iters_for = |n: usize| {
            let mu = 0.2 * (n * n) as f64; // mu = dt/dx^2 with dt fixed, dx = 1/n
            let apply = move |v: &[f64], out: &mut [f64]| {
                for j in 0..n {
                    for i in 0..n {
                        let idx = j * n + i;
                        let lap = v[j * n + (i + 1) % n]
                            + v[j * n + (i + n - 1) % n]
                            + v[((j + 1) % n) * n + i]
                            + v[((j + n - 1) % n) * n + i]
                            - 4.0 * v[idx];
                        out[idx] = v[idx] - mu * lap;
                    }
                }
            };
            let mut rng = SplitMix64::new(n as u64);
            let rhs: Vec<f64> = (0..n * n).map(|_| rng.range(-1.0, 1.0)).collect();
            let (_, iters) = solve_cg(apply, &rhs, None, 1e-10, 100 * n * n).unwrap();
            iters
        };
        let (i8, i16, i32) = (iters_for(8), iters_for(16), iters_for(32));
        assert!(i8 < i16 && i16 < i32, "iterations {i8}, {i16}, {i32}");
    }

    #[test]
    fn dense_from_operator_identity() {
        let a = dense_from_operator(|v, out| out.copy_from_slice(v), 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn dense_from_operator_periodic_second_difference() {
        let n = 4;
        let apply = |v: &[f64], out: &mut [f64]| {
            for i in 0..n {
                out[i] = v[(i + 1) % n] - 2.0 * v[i] + v[(i + n - 1) % n];
            }
        };
        let a = dense_from_operator(apply, n);
        assert_eq!(a[0], vec![-2.0, 1.0, 0.0, 1.0]);
        assert_eq!(a[2], vec![0.0, 1.0, -2.0, 1.0]);
    }

    proptest! {
        #[test]
        fn thomas_matches_dense_on_random_dominant_systems(seed in 0u64..200) {
            let mut rng = SplitMix64::new(seed);
            let m = rng.range_usize(3, 32);
            let sys = random_dd_system(&mut rng, m);
            let x = solve_tridiagonal(&sys).unwrap();
            let y = solve_dense(&dense_from_tridiag(&sys), &sys.rhs).unwrap();
            let scale = y.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            for (a, b) in x.iter().zip(&y) {
                prop_assert!((a - b).abs() <= 1e-12 * scale);
            }
        }
    }
}
