//! Convex quadratic programming kernel shared by every agent and operator
//! subproblem and by the centralized welfare oracle.
//!
//! Problems are stated in a canonical separable form
//!
//! ```text
//!     minimize    sum_j (quad_j / 2) x_j^2 + lin_j x_j
//!     subject to  lower_j <= x_j <= upper_j
//!                 row_lo_r <= a_r' x <= row_hi_r
//! ```
//!
//! Any coupling quadratic (for example an augmented-Lagrangian penalty on a
//! sum of variables) is canonicalized by the caller through an auxiliary
//! variable and an equality row. The interior-point solve itself is delegated
//! to Clarabel; the residual check on the returned primal/dual pair is ours.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus,
    SupportedConeT, ZeroConeT,
};

use crate::error::{Error, Result};

/// A linear constraint `lower <= sum coefs * x <= upper`.
#[derive(Debug, Clone)]
pub struct LinearRow {
    pub coefs: Vec<(usize, f64)>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Default)]
pub struct QpProblem {
    pub quad: Vec<f64>,
    pub lin: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<LinearRow>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multiplier of each row, signed so that `quad*x + lin = sum_r y_r a_r + z`.
    /// Positive when the lower side binds, negative when the upper side binds.
    pub row_duals: Vec<f64>,
    /// Multiplier of each variable bound, same sign convention as `row_duals`.
    pub bound_duals: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: u32,
}

impl QpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.quad.len()
    }

    pub fn add_var(&mut self, quad: f64, lin: f64, lower: f64, upper: f64) -> usize {
        self.quad.push(quad);
        self.lin.push(lin);
        self.lower.push(lower);
        self.upper.push(upper);
        self.quad.len() - 1
    }

    pub fn add_row(&mut self, coefs: Vec<(usize, f64)>, lower: f64, upper: f64) -> usize {
        self.rows.push(LinearRow {
            coefs,
            lower,
            upper,
        });
        self.rows.len() - 1
    }

    pub fn add_eq(&mut self, coefs: Vec<(usize, f64)>, rhs: f64) -> usize {
        self.add_row(coefs, rhs, rhs)
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.quad
            .iter()
            .zip(&self.lin)
            .zip(x)
            .map(|((q, c), xi)| 0.5 * q * xi * xi + c * xi)
            .sum()
    }

    pub fn row_value(&self, r: usize, x: &[f64]) -> f64 {
        self.rows[r].coefs.iter().map(|&(j, a)| a * x[j]).sum()
    }

    fn validate(&self) -> Result<()> {
        let n = self.quad.len();
        for (what, len) in [
            ("linear coefficients", self.lin.len()),
            ("lower bounds", self.lower.len()),
            ("upper bounds", self.upper.len()),
        ] {
            if len != n {
                return Err(Error::Dimension {
                    what,
                    expected: n,
                    got: len,
                });
            }
        }
        for (j, &q) in self.quad.iter().enumerate() {
            if !(q >= 0.0) || !q.is_finite() {
                return Err(Error::NonConvex { index: j, value: q });
            }
        }
        for row in &self.rows {
            for &(j, _) in &row.coefs {
                if j >= n {
                    return Err(Error::Dimension {
                        what: "row variable index",
                        expected: n,
                        got: j,
                    });
                }
            }
        }
        for j in 0..n {
            if self.lower[j] > self.upper[j] {
                return Err(Error::Infeasible {
                    detail: format!(
                        "variable {j} has empty box [{}, {}]",
                        self.lower[j], self.upper[j]
                    ),
                    rows: Vec::new(),
                });
            }
        }
        Ok(())
    }
}

enum Side {
    Eq,
    Lo,
    Hi,
}

/// Owner of a conic row: either constraint row `r` or the bound of variable `j`.
enum Origin {
    Row(usize, Side),
    Bound(usize, Side),
}

/// Solve a convex separable QP with box and linear constraints.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution> {
    problem.validate()?;
    let n = problem.num_vars();

    let mut eq: Vec<(Vec<(usize, f64)>, f64, Origin)> = Vec::new();
    let mut ineq: Vec<(Vec<(usize, f64)>, f64, Origin)> = Vec::new();
    for (r, row) in problem.rows.iter().enumerate() {
        if row.lower > row.upper {
            return Err(Error::Infeasible {
                detail: format!("row {r} has empty range [{}, {}]", row.lower, row.upper),
                rows: vec![r],
            });
        }
        if row.lower == row.upper {
            eq.push((row.coefs.clone(), row.lower, Origin::Row(r, Side::Eq)));
            continue;
        }
        if row.lower.is_finite() {
            let neg = row.coefs.iter().map(|&(j, a)| (j, -a)).collect();
            ineq.push((neg, -row.lower, Origin::Row(r, Side::Lo)));
        }
        if row.upper.is_finite() {
            ineq.push((row.coefs.clone(), row.upper, Origin::Row(r, Side::Hi)));
        }
    }
    for j in 0..n {
        let (lo, hi) = (problem.lower[j], problem.upper[j]);
        if lo == hi {
            eq.push((vec![(j, 1.0)], lo, Origin::Bound(j, Side::Eq)));
            continue;
        }
        if lo.is_finite() {
            ineq.push((vec![(j, -1.0)], -lo, Origin::Bound(j, Side::Lo)));
        }
        if hi.is_finite() {
            ineq.push((vec![(j, 1.0)], hi, Origin::Bound(j, Side::Hi)));
        }
    }

    let n_eq = eq.len();
    let m = n_eq + ineq.len();
    let mut ii = Vec::new();
    let mut jj = Vec::new();
    let mut vv = Vec::new();
    let mut b = Vec::with_capacity(m);
    let mut origins = Vec::with_capacity(m);
    for (k, (coefs, rhs, origin)) in eq.into_iter().chain(ineq).enumerate() {
        for (j, a) in coefs {
            if a != 0.0 {
                ii.push(k);
                jj.push(j);
                vv.push(a);
            }
        }
        b.push(rhs);
        origins.push(origin);
    }
    let a_mat = CscMatrix::new_from_triplets(m, n, ii, jj, vv);
    let (pi, pv): (Vec<usize>, Vec<f64>) = problem
        .quad
        .iter()
        .enumerate()
        .filter(|(_, q)| **q != 0.0)
        .map(|(j, q)| (j, *q))
        .unzip();
    let p_mat = CscMatrix::new_from_triplets(n, n, pi.clone(), pi, pv);

    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if n_eq > 0 {
        cones.push(ZeroConeT(n_eq));
    }
    if m > n_eq {
        cones.push(NonnegativeConeT(m - n_eq));
    }

    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(200)
        .tol_gap_abs(1e-10)
        .tol_gap_rel(1e-10)
        .tol_feas(1e-10)
        .tol_ktratio(1e-8)
        .presolve_enable(false)
        .build()
        .map_err(|e| Error::Solver {
            status: format!("settings: {e:?}"),
        })?;

    let mut solver = DefaultSolver::new(&p_mat, &problem.lin, &a_mat, &b, &cones, settings)
        .map_err(|e| Error::Solver {
            status: format!("setup: {e:?}"),
        })?;
    solver.solve();
    let sol = &solver.solution;

    match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            let (detail, rows) = infeasibility_certificate(&sol.z, &origins);
            return Err(Error::Infeasible { detail, rows });
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            return Err(Error::Unbounded {
                agent: "qp".into(),
                detail: "objective unbounded below on the feasible set".into(),
            })
        }
        other => {
            return Err(Error::Solver {
                status: format!("{other:?}"),
            })
        }
    }

    let x = sol.x.clone();
    let mut row_duals = vec![0.0; problem.rows.len()];
    let mut bound_duals = vec![0.0; n];
    for (k, origin) in origins.iter().enumerate() {
        let z = sol.z[k];
        match origin {
            Origin::Row(r, side) => row_duals[*r] += side_dual(side, z),
            Origin::Bound(j, side) => bound_duals[*j] += side_dual(side, z),
        }
    }

    let kkt_residual = kkt_residual(problem, &x, &row_duals, &bound_duals);
    Ok(QpSolution {
        objective: problem.objective(&x),
        x,
        row_duals,
        bound_duals,
        kkt_residual,
        iterations: sol.iterations,
    })
}

fn side_dual(side: &Side, z: f64) -> f64 {
    match side {
        Side::Eq => -z,
        Side::Lo => z,
        Side::Hi => -z,
    }
}

fn infeasibility_certificate(z: &[f64], origins: &[Origin]) -> (String, Vec<usize>) {
    let mut ranked: Vec<(usize, f64)> = z.iter().map(|v| v.abs()).enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let names: Vec<String> = ranked
        .iter()
        .take(6)
        .filter(|(_, v)| *v > 1e-9)
        .map(|(k, _)| match &origins[*k] {
            Origin::Row(r, _) => format!("row {r}"),
            Origin::Bound(j, _) => format!("bound of x{j}"),
        })
        .collect();
    let rows = ranked
        .iter()
        .filter(|(_, v)| *v > 1e-9)
        .filter_map(|(k, _)| match &origins[*k] {
            Origin::Row(r, _) => Some(*r),
            Origin::Bound(..) => None,
        })
        .collect();
    (format!("Farkas certificate concentrated on [{}]", names.join(", ")), rows)
}

/// Relative KKT residual: max of stationarity, primal feasibility and
/// complementarity violations, each scaled by the magnitude of its terms.
pub fn kkt_residual(problem: &QpProblem, x: &[f64], row_duals: &[f64], bound_duals: &[f64]) -> f64 {
    let n = problem.num_vars();
    let mut grad: Vec<f64> = (0..n)
        .map(|j| problem.quad[j] * x[j] + problem.lin[j])
        .collect();
    let mut scale_s = grad.iter().fold(1.0_f64, |a, g| a.max(g.abs()));
    for (r, row) in problem.rows.iter().enumerate() {
        for &(j, a) in &row.coefs {
            grad[j] -= row_duals[r] * a;
            scale_s = scale_s.max((row_duals[r] * a).abs());
        }
    }
    for j in 0..n {
        grad[j] -= bound_duals[j];
    }
    let stat = grad.iter().fold(0.0_f64, |a, g| a.max(g.abs())) / scale_s;

    let mut prim = 0.0_f64;
    let mut comp = 0.0_f64;
    let mut scale_p = 1.0_f64;
    let mut check = |value: f64, lo: f64, hi: f64, dual: f64, mag: f64| {
        let viol = (lo - value).max(value - hi).max(0.0);
        let scale = 1.0_f64.max(mag).max(value.abs());
        prim = prim.max(viol / scale);
        scale_p = scale_p.max(scale);
        // complementarity: a positive dual needs the lower side tight, a negative one the upper side
        let gap = if dual > 0.0 {
            if lo.is_finite() {
                (value - lo).abs()
            } else {
                f64::INFINITY
            }
        } else if dual < 0.0 {
            if hi.is_finite() {
                (hi - value).abs()
            } else {
                f64::INFINITY
            }
        } else {
            0.0
        };
        if gap.is_finite() {
            comp = comp.max(dual.abs() * gap / (scale * scale_s));
        } else {
            comp = comp.max(dual.abs() / scale_s);
        }
    };
    for (r, row) in problem.rows.iter().enumerate() {
        let v = problem.row_value(r, x);
        let mag = row.coefs.iter().map(|&(j, a)| (a * x[j]).abs()).fold(0.0, f64::max);
        check(v, row.lower, row.upper, row_duals[r], mag);
    }
    for j in 0..n {
        check(x[j], problem.lower[j], problem.upper[j], bound_duals[j], 0.0);
    }
    stat.max(prim).max(comp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipped_scalar() {
        // (x-3)^2 = x^2 - 6x + 9 with 0 <= x <= 2
        let mut qp = QpProblem::new();
        qp.add_var(2.0, -6.0, 0.0, 2.0);
        let sol = solve_qp(&qp).unwrap();
        assert!((sol.x[0] - 2.0).abs() < 1e-8);
        assert!(sol.bound_duals[0] < 0.0);
        assert!(sol.kkt_residual < 1e-8);
    }

    #[test]
    fn unconstrained_stationary_point() {
        let mut qp = QpProblem::new();
        qp.add_var(4.0, -2.0, f64::NEG_INFINITY, f64::INFINITY);
        qp.add_var(1.0, 3.0, f64::NEG_INFINITY, f64::INFINITY);
        let sol = solve_qp(&qp).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-12);
        assert!((sol.x[1] + 3.0).abs() < 1e-12);
        assert!(sol.kkt_residual < 1e-12);
    }

    #[test]
    fn equality_dual_is_shadow_price() {
        // min x^2/2 + y^2/2 s.t. x + y = 2 -> x = y = 1, dual = 1
        let mut qp = QpProblem::new();
        let x = qp.add_var(1.0, 0.0, f64::NEG_INFINITY, f64::INFINITY);
        let y = qp.add_var(1.0, 0.0, f64::NEG_INFINITY, f64::INFINITY);
        qp.add_eq(vec![(x, 1.0), (y, 1.0)], 2.0);
        let sol = solve_qp(&qp).unwrap();
        assert!((sol.row_duals[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn infeasible_box_and_row() {
        let mut qp = QpProblem::new();
        let x = qp.add_var(1.0, 0.0, 0.0, 1.0);
        qp.add_row(vec![(x, 1.0)], 2.0, f64::INFINITY);
        assert!(matches!(solve_qp(&qp), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn rejects_negative_curvature() {
        let mut qp = QpProblem::new();
        qp.add_var(-1.0, 0.0, 0.0, 1.0);
        assert!(matches!(solve_qp(&qp), Err(Error::NonConvex { index: 0, .. })));
    }

    #[test]
    fn deterministic() {
        let mut qp = QpProblem::new();
        for j in 0..5 {
            qp.add_var(1.0 + j as f64, -(j as f64), -1.0, 1.0);
        }
        qp.add_row((0..5).map(|j| (j, 1.0)).collect(), 0.5, 0.5);
        let a = solve_qp(&qp).unwrap();
        let b = solve_qp(&qp).unwrap();
        assert_eq!(a.x, b.x);
    }
}
