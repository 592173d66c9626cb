//! Dense convex quadratic programming for small problems.
//!
//! Minimizes `0.5 z' H z + f' z` subject to `G z <= rhs` and `lb <= z <= ub`.
//! Two solve paths: exhaustive activity-pattern enumeration for box-only
//! problems in up to four variables (exact), and a primal active-set method
//! for the general case. Both are deterministic: identical problems produce
//! bit-identical solutions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const PSD_TOLERANCE: f64 = 1e-8;
const FEASIBILITY_TOLERANCE: f64 = 1e-7;
const ACTIVE_TOLERANCE: f64 = 1e-9;
const ZERO_STEP: f64 = 1e-10;

/// Problem data. `g`/`rhs` may be empty (box-only). Infinite bounds allowed.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

/// Which constraint is active in a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveConstraint {
    /// Row index into `g`.
    Row(usize),
    AtLower(usize),
    AtUpper(usize),
}

/// Residual magnitudes of the Karush-Kuhn-Tucker conditions at the solution.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub active_set: Vec<ActiveConstraint>,
    pub iterations: usize,
    pub kkt: KktReport,
}

/// Solve path selection. `Auto` picks enumeration for box-only problems in
/// up to four variables, active-set otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Auto,
    Enumeration,
    ActiveSet,
}

impl QpProblem {
    pub fn box_only(h: DMatrix<f64>, f: DVector<f64>, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        let n = f.len();
        QpProblem {
            h,
            f,
            g: DMatrix::zeros(0, n),
            rhs: DVector::zeros(0),
            lb,
            ub,
        }
    }

    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        g: DMatrix<f64>,
        rhs: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Self {
        QpProblem {
            h,
            f,
            g,
            rhs,
            lb,
            ub,
        }
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (z.transpose() * &self.h * z)[(0, 0)] + self.f.dot(z)
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        if n == 0 {
            return Err(Error::InvalidArgument("empty problem".into()));
        }
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(Error::InvalidArgument(format!(
                "H is {}x{}, expected {}x{}",
                self.h.nrows(),
                self.h.ncols(),
                n,
                n
            )));
        }
        if self.lb.len() != n || self.ub.len() != n {
            return Err(Error::InvalidArgument("bound length mismatch".into()));
        }
        if self.g.nrows() != self.rhs.len() || (self.g.nrows() > 0 && self.g.ncols() != n) {
            return Err(Error::InvalidArgument("constraint shape mismatch".into()));
        }
        if self.h.iter().any(|v| !v.is_finite())
            || self.f.iter().any(|v| !v.is_finite())
            || self.g.iter().any(|v| !v.is_finite())
            || self.rhs.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Numerical("non-finite problem data".into()));
        }
        for i in 0..n {
            if self.lb[i] > self.ub[i] {
                return Err(Error::Infeasible(format!(
                    "lb[{i}] = {} exceeds ub[{i}] = {}",
                    self.lb[i], self.ub[i]
                )));
            }
        }
        Ok(())
    }

    /// Symmetrized, positive-definite copy of H. Rejects matrices whose
    /// smallest eigenvalue is below -1e-8; lifts near-singular ones to 1e-8.
    fn conditioned_h(&self) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] = 0.5 * (self.h[(i, j)] + self.h[(j, i)]);
            }
        }
        let eig = h.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_eig < -PSD_TOLERANCE {
            return Err(Error::NotConvex(min_eig));
        }
        if min_eig < PSD_TOLERANCE {
            let shift = PSD_TOLERANCE - min_eig;
            for i in 0..n {
                h[(i, i)] += shift;
            }
        }
        Ok(h)
    }

    /// All inequality rows in one list: G rows, then finite upper bounds,
    /// then finite lower bounds (negated).
    fn unified_rows(&self) -> Vec<(DVector<f64>, f64, ActiveConstraint)> {
        let n = self.dim();
        let mut rows = Vec::new();
        for r in 0..self.g.nrows() {
            rows.push((
                self.g.row(r).transpose().into_owned(),
                self.rhs[r],
                ActiveConstraint::Row(r),
            ));
        }
        for i in 0..n {
            if self.ub[i].is_finite() {
                let mut a = DVector::zeros(n);
                a[i] = 1.0;
                rows.push((a, self.ub[i], ActiveConstraint::AtUpper(i)));
            }
        }
        for i in 0..n {
            if self.lb[i].is_finite() {
                let mut a = DVector::zeros(n);
                a[i] = -1.0;
                rows.push((a, -self.lb[i], ActiveConstraint::AtLower(i)));
            }
        }
        rows
    }
}

/// Solve with automatic path selection and a default starting point.
pub fn solve(problem: &QpProblem) -> Result<QpSolution> {
    solve_with(problem, Method::Auto, None)
}

/// Solve from a caller-supplied feasible starting point (active-set path).
pub fn solve_from(problem: &QpProblem, z0: DVector<f64>) -> Result<QpSolution> {
    solve_with(problem, Method::Auto, Some(z0))
}

/// Solve with an explicit path choice.
pub fn solve_with(
    problem: &QpProblem,
    method: Method,
    warm_start: Option<DVector<f64>>,
) -> Result<QpSolution> {
    problem.validate()?;
    let h = problem.conditioned_h()?;
    let box_only = problem.g.nrows() == 0;
    let use_enumeration = match method {
        Method::Enumeration => {
            if !box_only || problem.dim() > 4 {
                return Err(Error::InvalidArgument(
                    "enumeration requires a box-only problem in at most 4 variables".into(),
                ));
            }
            true
        }
        Method::ActiveSet => false,
        Method::Auto => box_only && problem.dim() <= 4 && warm_start.is_none(),
    };
    if use_enumeration {
        solve_enumeration(problem, &h)
    } else {
        solve_active_set(problem, &h, warm_start)
    }
}

/// Grid argmin over the (finite) box, for cross-checking. Not exact: the
/// best grid point within `resolution` spacing per axis. Returns `None`
/// when no grid point satisfies the row constraints.
pub fn brute_force_oracle(problem: &QpProblem, resolution: f64) -> Option<(DVector<f64>, f64)> {
    let n = problem.dim();
    if resolution <= 0.0 {
        return None;
    }
    let mut counts = Vec::with_capacity(n);
    for i in 0..n {
        if !problem.lb[i].is_finite() || !problem.ub[i].is_finite() {
            return None;
        }
        let span = problem.ub[i] - problem.lb[i];
        counts.push((span / resolution).floor() as usize + 1);
    }
    let mut index = vec![0usize; n];
    let mut best: Option<(DVector<f64>, f64)> = None;
    loop {
        let mut z = DVector::zeros(n);
        for i in 0..n {
            z[i] = (problem.lb[i] + index[i] as f64 * resolution).min(problem.ub[i]);
        }
        let feasible = (0..problem.g.nrows())
            .all(|r| problem.g.row(r).transpose().dot(&z) <= problem.rhs[r] + 1e-9);
        if feasible {
            let obj = problem.objective(&z);
            if best.as_ref().map_or(true, |(_, b)| obj < *b) {
                best = Some((z, obj));
            }
        }
        // odometer increment over the grid
        let mut axis = 0;
        loop {
            if axis == n {
                return best;
            }
            index[axis] += 1;
            if index[axis] < counts[axis] {
                break;
            }
            index[axis] = 0;
            axis += 1;
        }
    }
}

fn solve_enumeration(problem: &QpProblem, h: &DMatrix<f64>) -> Result<QpSolution> {
    let n = problem.dim();
    let patterns = 3usize.pow(n as u32);
    let mut best: Option<(DVector<f64>, f64, Vec<ActiveConstraint>)> = None;
    'pattern: for code in 0..patterns {
        // digit 0 = free, 1 = at lower bound, 2 = at upper bound
        let mut digits = [0u8; 4];
        let mut c = code;
        for d in digits.iter_mut().take(n) {
            *d = (c % 3) as u8;
            c /= 3;
        }
        let mut z = DVector::zeros(n);
        let mut free = Vec::new();
        for i in 0..n {
            match digits[i] {
                1 => {
                    if !problem.lb[i].is_finite() {
                        continue 'pattern;
                    }
                    z[i] = problem.lb[i];
                }
                2 => {
                    if !problem.ub[i].is_finite() {
                        continue 'pattern;
                    }
                    z[i] = problem.ub[i];
                }
                _ => free.push(i),
            }
        }
        if !free.is_empty() {
            // solve H_ff z_f = -(f_f + H_fb z_b)
            let k = free.len();
            let mut hff = DMatrix::zeros(k, k);
            let mut rhs = DVector::zeros(k);
            for (a, &i) in free.iter().enumerate() {
                let mut acc = problem.f[i];
                for j in 0..n {
                    if !free.contains(&j) {
                        acc += h[(i, j)] * z[j];
                    }
                }
                rhs[a] = -acc;
                for (b, &j) in free.iter().enumerate() {
                    hff[(a, b)] = h[(i, j)];
                }
            }
            let zf = match hff.full_piv_lu().solve(&rhs) {
                Some(v) => v,
                None => continue 'pattern,
            };
            for (a, &i) in free.iter().enumerate() {
                z[i] = zf[a];
            }
        }
        // primal feasibility of the free block
        for &i in &free {
            if z[i] < problem.lb[i] - ACTIVE_TOLERANCE || z[i] > problem.ub[i] + ACTIVE_TOLERANCE {
                continue 'pattern;
            }
        }
        // dual feasibility: gradient signs at the bound block
        let grad = h * &z + &problem.f;
        let mut active = Vec::new();
        for i in 0..n {
            match digits[i] {
                1 => {
                    if grad[i] < -ACTIVE_TOLERANCE {
                        continue 'pattern;
                    }
                    active.push(ActiveConstraint::AtLower(i));
                }
                2 => {
                    if grad[i] > ACTIVE_TOLERANCE {
                        continue 'pattern;
                    }
                    active.push(ActiveConstraint::AtUpper(i));
                }
                _ => {}
            }
        }
        let obj = problem.objective(&z);
        if best.as_ref().map_or(true, |(_, b, _)| obj < *b) {
            best = Some((z, obj, active));
        }
    }
    let (z, objective, active_set) =
        best.ok_or_else(|| Error::Infeasible("no activity pattern satisfies the bounds".into()))?;
    let kkt = kkt_report(problem, h, &z, &active_set, None);
    Ok(QpSolution {
        z,
        objective,
        active_set,
        iterations: patterns,
        kkt,
    })
}

fn solve_active_set(
    problem: &QpProblem,
    h: &DMatrix<f64>,
    warm_start: Option<DVector<f64>>,
) -> Result<QpSolution> {
    let n = problem.dim();
    let rows = problem.unified_rows();
    let mut z = match warm_start {
        Some(z0) => {
            if z0.len() != n {
                return Err(Error::InvalidArgument("warm start length mismatch".into()));
            }
            z0
        }
        None => {
            let mut z0 = DVector::<f64>::zeros(n);
            for i in 0..n {
                z0[i] = z0[i].max(problem.lb[i]).min(problem.ub[i]);
            }
            z0
        }
    };
    let worst = rows
        .iter()
        .map(|(a, b, _)| a.dot(&z) - b)
        .fold(f64::NEG_INFINITY, f64::max);
    if worst > FEASIBILITY_TOLERANCE {
        return Err(Error::Infeasible(format!(
            "starting point violates constraints by {worst:.3e}"
        )));
    }

    let mut working: Vec<usize> = Vec::new();
    let max_iter = 100 * (n + rows.len() + 1);
    let mut lambda = DVector::<f64>::zeros(0);
    for iteration in 1..=max_iter {
        // equality-constrained subproblem on the working set
        let m = working.len();
        let mut kkt = DMatrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        for (k, &r) in working.iter().enumerate() {
            for i in 0..n {
                kkt[(n + k, i)] = rows[r].0[i];
                kkt[(i, n + k)] = rows[r].0[i];
            }
        }
        let grad = h * &z + &problem.f;
        let mut rhs = DVector::zeros(n + m);
        for i in 0..n {
            rhs[i] = -grad[i];
        }
        let sol = match kkt.full_piv_lu().solve(&rhs) {
            Some(v) => v,
            None => {
                // dependent working set: drop the most recent addition
                if working.pop().is_none() {
                    return Err(Error::Numerical("singular KKT system".into()));
                }
                continue;
            }
        };
        let p = sol.rows(0, n).into_owned();
        lambda = sol.rows(n, m).into_owned();

        if p.amax() <= ZERO_STEP {
            // stationary on the working set: check multiplier signs
            let mut drop_idx: Option<usize> = None;
            let mut most_negative = -ACTIVE_TOLERANCE;
            for (k, &l) in lambda.iter().enumerate() {
                if l < most_negative {
                    most_negative = l;
                    drop_idx = Some(k);
                }
            }
            match drop_idx {
                None => {
                    let active: Vec<ActiveConstraint> =
                        working.iter().map(|&r| rows[r].2).collect();
                    let kkt = kkt_report(problem, h, &z, &active, Some((&working, &lambda, &rows)));
                    return Ok(QpSolution {
                        objective: problem.objective(&z),
                        z,
                        active_set: active,
                        iterations: iteration,
                        kkt,
                    });
                }
                Some(k) => {
                    working.remove(k);
                }
            }
        } else {
            // step toward the subproblem solution, stopping at the first blocker
            let mut alpha = 1.0f64;
            let mut blocker: Option<usize> = None;
            for (r, (a, b, _)) in rows.iter().enumerate() {
                if working.contains(&r) {
                    continue;
                }
                let d = a.dot(&p);
                if d > 1e-12 {
                    let ratio = ((b - a.dot(&z)) / d).max(0.0);
                    if ratio < alpha - 1e-12 {
                        alpha = ratio;
                        blocker = Some(r);
                    }
                }
            }
            z += p * alpha;
            if let Some(r) = blocker {
                working.push(r);
            }
        }
    }
    let _ = lambda;
    Err(Error::NonConvergence(max_iter))
}

fn kkt_report(
    problem: &QpProblem,
    h: &DMatrix<f64>,
    z: &DVector<f64>,
    active: &[ActiveConstraint],
    duals: Option<(&Vec<usize>, &DVector<f64>, &Vec<(DVector<f64>, f64, ActiveConstraint)>)>,
) -> KktReport {
    let n = problem.dim();
    let grad = h * z + &problem.f;
    let mut residual = grad.clone();
    let mut complementarity = 0.0f64;
    match duals {
        Some((working, lambda, rows)) => {
            for (k, &r) in working.iter().enumerate() {
                let (a, b, _) = &rows[r];
                residual += a * lambda[k];
                complementarity = complementarity.max((lambda[k] * (a.dot(z) - b)).abs());
            }
        }
        None => {
            // bound-only case: multiplier equals the gradient component
            for c in active {
                match *c {
                    ActiveConstraint::AtLower(i) => {
                        residual[i] -= grad[i].max(0.0);
                        complementarity = complementarity
                            .max((grad[i] * (z[i] - problem.lb[i])).abs());
                    }
                    ActiveConstraint::AtUpper(i) => {
                        residual[i] -= grad[i].min(0.0);
                        complementarity = complementarity
                            .max((grad[i] * (problem.ub[i] - z[i])).abs());
                    }
                    ActiveConstraint::Row(_) => {}
                }
            }
        }
    }
    let mut feasibility = 0.0f64;
    for r in 0..problem.g.nrows() {
        feasibility = feasibility.max(problem.g.row(r).transpose().dot(z) - problem.rhs[r]);
    }
    for i in 0..n {
        feasibility = feasibility.max(problem.lb[i] - z[i]);
        feasibility = feasibility.max(z[i] - problem.ub[i]);
    }
    KktReport {
        stationarity: residual.amax(),
        feasibility: feasibility.max(0.0),
        complementarity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn unconstrained_2d() -> QpProblem {
        // minimize 0.5 z'Iz - 3 z0: unconstrained optimum (3, 0)
        QpProblem::box_only(
            DMatrix::identity(2, 2),
            dvector![-3.0, 0.0],
            dvector![-1.0, -1.0],
            dvector![1.0, 1.0],
        )
    }

    #[test]
    fn clipped_optimum_at_bound() {
        let sol = solve(&unconstrained_2d()).unwrap();
        assert_relative_eq!(sol.z[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(sol.z[1], 0.0, epsilon = 1e-10);
        assert!(sol
            .active_set
            .contains(&ActiveConstraint::AtUpper(0)));
        assert!(sol.kkt.stationarity < 1e-8);
        assert!(sol.kkt.feasibility < 1e-10);
    }

    #[test]
    fn grid_oracle_agrees_on_grid_aligned_optimum() {
        let p = unconstrained_2d();
        let (z, _) = brute_force_oracle(&p, 0.5).unwrap();
        assert_relative_eq!(z[0], 1.0);
        assert_relative_eq!(z[1], 0.0);
    }

    #[test]
    fn active_set_matches_enumeration() {
        let p = unconstrained_2d();
        let a = solve_with(&p, Method::ActiveSet, None).unwrap();
        let b = solve_with(&p, Method::Enumeration, None).unwrap();
        assert!((a.objective - b.objective).abs() < 1e-9);
        assert_relative_eq!(a.z[0], b.z[0], epsilon = 1e-8);
        assert_relative_eq!(a.z[1], b.z[1], epsilon = 1e-8);
    }

    #[test]
    fn general_rows_respected() {
        // minimize (z0-2)^2 + (z1-2)^2 subject to z0 + z1 <= 2: optimum (1, 1)
        let p = QpProblem::new(
            DMatrix::identity(2, 2) * 2.0,
            dvector![-4.0, -4.0],
            dmatrix![1.0, 1.0],
            dvector![2.0],
            dvector![f64::NEG_INFINITY, f64::NEG_INFINITY],
            dvector![f64::INFINITY, f64::INFINITY],
        );
        let sol = solve(&p).unwrap();
        assert_relative_eq!(sol.z[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.z[1], 1.0, epsilon = 1e-9);
        assert!(sol.kkt.stationarity < 1e-8);
    }

    #[test]
    fn not_psd_rejected() {
        let p = QpProblem::box_only(
            dmatrix![1.0, 0.0; 0.0, -1.0],
            dvector![0.0, 0.0],
            dvector![-1.0, -1.0],
            dvector![1.0, 1.0],
        );
        assert!(matches!(solve(&p), Err(Error::NotConvex(_))));
    }

    #[test]
    fn crossed_bounds_rejected() {
        let p = QpProblem::box_only(
            DMatrix::identity(1, 1),
            dvector![0.0],
            dvector![1.0],
            dvector![-1.0],
        );
        assert!(matches!(solve(&p), Err(Error::Infeasible(_))));
    }

    #[test]
    fn semidefinite_h_is_lifted() {
        // rank-1 H; regularization makes the minimizer unique
        let p = QpProblem::box_only(
            dmatrix![1.0, 1.0; 1.0, 1.0],
            dvector![-1.0, -1.0],
            dvector![-2.0, -2.0],
            dvector![2.0, 2.0],
        );
        let sol = solve(&p).unwrap();
        assert!(sol.kkt.feasibility < 1e-9);
        // any point with z0 + z1 = 1 is optimal for the unregularized problem
        assert_relative_eq!(sol.z[0] + sol.z[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn determinism_bitwise() {
        let p = QpProblem::new(
            dmatrix![2.0, 0.3; 0.3, 1.5],
            dvector![-1.0, 0.7],
            dmatrix![1.0, 2.0; -1.0, 0.5],
            dvector![1.5, 2.0],
            dvector![-3.0, -3.0],
            dvector![3.0, 3.0],
        );
        let a = solve(&p).unwrap();
        let b = solve(&p).unwrap();
        assert_eq!(a.z[0].to_bits(), b.z[0].to_bits());
        assert_eq!(a.z[1].to_bits(), b.z[1].to_bits());
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    }

    #[test]
    fn warm_start_infeasible_rejected() {
        let p = unconstrained_2d();
        let err = solve_from(&p, dvector![5.0, 0.0]);
        assert!(matches!(err, Err(Error::Infeasible(_))));
    }
}
