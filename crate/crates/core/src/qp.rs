//! Small dense convex QPs: `min 1/2 z'Hz + f'z  s.t.  Gz <= h`, optionally with
//! one quadratic constraint `z'Wz + 2w'z + c <= radius`.
//!
//! Linear inequalities are handled by a primal active-set method started from
//! a feasible point (elastic phase 1 when none is supplied). The quadratic
//! constraint is handled by a bracketed root search on its multiplier.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, symmetrize};

/// Uniform Hessian regularization.
pub const REGULARIZATION: f64 = 1e-10;
/// Constraint satisfaction tolerance.
pub const FEASIBILITY_TOL: f64 = 1e-9;
const MULTIPLIER_TOL: f64 = 1e-12;
const PHASE1_WEIGHT: f64 = 1e-10;
const PHASE1_TOL: f64 = 1e-7;

/// `z'Wz + 2w'z + constant <= radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticConstraint {
    pub w: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
    pub radius: f64,
}

impl QuadraticConstraint {
    pub fn value(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.w * z)) + 2.0 * self.lin.dot(z) + self.constant
    }

    pub fn violation(&self, z: &DVector<f64>) -> f64 {
        self.value(z) - self.radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseQP {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub ineq: DMatrix<f64>,
    pub bound: DVector<f64>,
    pub quadratic: Vec<QuadraticConstraint>,
}

impl DenseQP {
    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let d = linear.len();
        DenseQP {
            hessian,
            linear,
            ineq: DMatrix::zeros(0, d),
            bound: DVector::zeros(0),
            quadratic: Vec::new(),
        }
    }

    pub fn with_inequalities(mut self, ineq: DMatrix<f64>, bound: DVector<f64>) -> Self {
        self.ineq = ineq;
        self.bound = bound;
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.bound.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z)
    }

    /// Largest violation of any constraint (0 when feasible).
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        let lin = if self.n_ineq() > 0 {
            (&self.ineq * z - &self.bound).max()
        } else {
            f64::NEG_INFINITY
        };
        let quad = self
            .quadratic
            .iter()
            .map(|q| q.violation(z))
            .fold(f64::NEG_INFINITY, f64::max);
        lin.max(quad).max(0.0)
    }

    pub fn is_feasible(&self, z: &DVector<f64>, tol: f64) -> bool {
        self.max_violation(z) <= tol
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.hessian.nrows() != d || self.hessian.ncols() != d {
            return Err(Error::Dimension(format!(
                "Hessian is {}x{}, expected {d}x{d}",
                self.hessian.nrows(),
                self.hessian.ncols()
            )));
        }
        if self.ineq.ncols() != d || self.ineq.nrows() != self.bound.len() {
            return Err(Error::Dimension("inequality matrix and bound are inconsistent".into()));
        }
        for q in &self.quadratic {
            if q.w.nrows() != d || q.w.ncols() != d || q.lin.len() != d {
                return Err(Error::Dimension("quadratic constraint has wrong size".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterLimit,
    /// The optimal value is provably above the requested cutoff; `value`
    /// holds the lower bound that proved it.
    Cutoff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub value: f64,
    pub status: QpStatus,
    /// Indices of linear constraints in the final working set, ascending.
    pub active_set: Vec<usize>,
    /// Multipliers of the linear constraints (zero off the active set).
    pub multipliers: DVector<f64>,
    /// Multiplier of the quadratic constraint, if any.
    pub quadratic_multiplier: f64,
    pub iterations: usize,
    /// Objective after each active-set iteration.
    pub objective_history: Vec<f64>,
    pub regularization: f64,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    fn infeasible(d: usize, p: usize) -> Self {
        QpSolution {
            z: DVector::zeros(d),
            value: f64::INFINITY,
            status: QpStatus::Infeasible,
            active_set: Vec::new(),
            multipliers: DVector::zeros(p),
            quadratic_multiplier: 0.0,
            iterations: 0,
            objective_history: Vec::new(),
            regularization: REGULARIZATION,
        }
    }
}

fn regularized(h: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(h) + DMatrix::identity(h.nrows(), h.ncols()) * REGULARIZATION
}

/// Minimizer of `1/2 z'Hz + f'z` via Cholesky of `H + eps I`.
pub fn solve_unconstrained(h: &DMatrix<f64>, f: &DVector<f64>) -> Result<QpSolution> {
    let d = f.len();
    if h.nrows() != d || h.ncols() != d {
        return Err(Error::Dimension(format!(
            "Hessian is {}x{}, expected {d}x{d}",
            h.nrows(),
            h.ncols()
        )));
    }
    let chol = regularized(h).cholesky().ok_or(Error::SingularHessian)?;
    let z = -chol.solve(f);
    let value = 0.5 * z.dot(&(h * &z)) + f.dot(&z);
    Ok(QpSolution {
        z,
        value,
        status: QpStatus::Optimal,
        active_set: Vec::new(),
        multipliers: DVector::zeros(0),
        quadratic_multiplier: 0.0,
        iterations: 0,
        objective_history: vec![value],
        regularization: REGULARIZATION,
    })
}

/// Solves `qp`, starting from `z0` when it is feasible.
pub fn solve_active_set(qp: &DenseQP, z0: Option<&DVector<f64>>) -> Result<QpSolution> {
    qp.validate()?;
    match qp.quadratic.len() {
        0 => solve_linear(qp, z0.map(|z| (z, &[][..]))),
        1 => {
            let base = solve_linear(&relaxation(qp), z0.map(|z| (z, &[][..])))?;
            solve_with_quadratic(qp, base, f64::INFINITY)
        }
        k => Err(Error::InvalidParameter(format!(
            "at most one quadratic constraint is supported, got {k}"
        ))),
    }
}

/// `qp` without its quadratic constraints.
pub fn relaxation(qp: &DenseQP) -> DenseQP {
    DenseQP {
        hessian: qp.hessian.clone(),
        linear: qp.linear.clone(),
        ineq: qp.ineq.clone(),
        bound: qp.bound.clone(),
        quadratic: Vec::new(),
    }
}

/// Like [`solve_active_set`], but stops with [`QpStatus::Cutoff`] once the
/// optimal value is provably above `cutoff`. `relaxed` is the solution of
/// [`relaxation`]`(qp)`, which is computed here when absent.
pub fn solve_active_set_with_cutoff(qp: &DenseQP, relaxed: Option<QpSolution>, cutoff: f64) -> Result<QpSolution> {
    qp.validate()?;
    let base = match relaxed {
        Some(b) => b,
        None => solve_linear(&relaxation(qp), None)?,
    };
    match qp.quadratic.len() {
        0 => Ok(cut(base, cutoff)),
        1 => solve_with_quadratic(qp, base, cutoff),
        k => Err(Error::InvalidParameter(format!(
            "at most one quadratic constraint is supported, got {k}"
        ))),
    }
}

fn cut(mut sol: QpSolution, cutoff: f64) -> QpSolution {
    if sol.status == QpStatus::Optimal && sol.value > cutoff {
        sol.status = QpStatus::Cutoff;
    }
    sol
}

/// Warm start: a point and a working set that was valid there.
type Warm<'a> = Option<(&'a DVector<f64>, &'a [usize])>;

fn solve_linear(qp: &DenseQP, warm: Warm) -> Result<QpSolution> {
    let (d, p) = (qp.dim(), qp.n_ineq());
    let row_norms: Vec<f64> = (0..p).map(|i| qp.ineq.row(i).norm()).collect();
    // Rows with vanishing coefficients are constant constraints.
    for i in 0..p {
        if row_norms[i] == 0.0 && qp.bound[i] < -FEASIBILITY_TOL * qp.bound[i].abs().max(1.0) {
            return Ok(QpSolution::infeasible(d, p));
        }
    }
    if p == 0 {
        return solve_unconstrained(&qp.hessian, &qp.linear);
    }
    if d == 0 {
        let mut sol = solve_unconstrained(&qp.hessian, &qp.linear)?;
        sol.multipliers = DVector::zeros(p);
        return Ok(sol);
    }

    let tol = FEASIBILITY_TOL * qp.bound.amax().max(1.0);
    let (start, working) = match warm {
        Some((z, w)) if z.len() == d && qp.is_feasible(z, tol) => {
            // Keep only the previous working rows that are still tight.
            let gz = &qp.ineq * z;
            let w: Vec<usize> = w
                .iter()
                .copied()
                .filter(|&i| i < p && (gz[i] - qp.bound[i]).abs() <= tol)
                .collect();
            (z.clone(), w)
        }
        _ => match phase_one(qp, &row_norms)? {
            Some(z) => (z, Vec::new()),
            None => return Ok(QpSolution::infeasible(d, p)),
        },
    };
    let h = regularized(&qp.hessian);
    Ok(primal_active_set(
        &h,
        &qp.linear,
        &qp.ineq,
        &qp.bound,
        &row_norms,
        start,
        working,
        &qp.hessian,
    ))
}

/// Elastic phase 1 on row-normalized constraints:
/// `min t + delta/2 |z|^2 + delta/2 t^2  s.t.  G_i z / |G_i| - t <= h_i / |G_i|, t >= 0`.
fn phase_one(qp: &DenseQP, row_norms: &[f64]) -> Result<Option<DVector<f64>>> {
    let (d, p) = (qp.dim(), qp.n_ineq());
    let rows: Vec<usize> = (0..p).filter(|&i| row_norms[i] > 0.0).collect();
    let mut g = DMatrix::zeros(rows.len() + 1, d + 1);
    let mut h = DVector::zeros(rows.len() + 1);
    let mut t0: f64 = 0.0;
    for (r, &i) in rows.iter().enumerate() {
        let s = row_norms[i];
        for j in 0..d {
            g[(r, j)] = qp.ineq[(i, j)] / s;
        }
        g[(r, d)] = -1.0;
        h[r] = qp.bound[i] / s;
        t0 = t0.max(-h[r]);
    }
    g[(rows.len(), d)] = -1.0;
    let hess = DMatrix::identity(d + 1, d + 1) * PHASE1_WEIGHT;
    let mut f = DVector::zeros(d + 1);
    f[d] = 1.0;
    let mut y0 = DVector::zeros(d + 1);
    y0[d] = t0;
    let norms = vec![1.0; rows.len() + 1];
    let sol = primal_active_set(&hess, &f, &g, &h, &norms, y0, Vec::new(), &hess);
    if sol.status != QpStatus::Optimal || sol.z[d] > PHASE1_TOL {
        return Ok(None);
    }
    Ok(Some(sol.z.rows(0, d).into_owned()))
}

/// Primal active-set iterations from a feasible `z` and a working set of
/// rows tight at `z` (sorted, linearly independent). `h_reg` is the
/// (regularized) Hessian used for steps, `h_obj` the one used for reporting.
fn primal_active_set(
    h_reg: &DMatrix<f64>,
    f: &DVector<f64>,
    g: &DMatrix<f64>,
    bound: &DVector<f64>,
    row_norms: &[f64],
    mut z: DVector<f64>,
    mut working: Vec<usize>,
    h_obj: &DMatrix<f64>,
) -> QpSolution {
    let (d, p) = (f.len(), bound.len());
    let budget = 50 * (d + p);
    let objective = |z: &DVector<f64>| 0.5 * z.dot(&(h_obj * z)) + f.dot(z);
    let scale = max_abs(h_reg).max(f.amax()).max(1.0);

    let mut history = vec![objective(&z)];
    let mut multipliers = DVector::zeros(p);
    let mut iterations = 0;
    let mut status = QpStatus::IterLimit;
    // Set after an unblocked full step: the iterate then minimizes on the working set.
    let mut settled = false;

    while iterations < budget {
        iterations += 1;
        let (step, lambda) = match kkt_step(h_reg, f, g, &working, &z) {
            Some(s) => s,
            None => {
                // Dependent working rows: drop the newest one and retry.
                working.pop();
                continue;
            }
        };

        if settled || step.amax() <= 1e-13 * (1.0 + z.amax()) {
            settled = false;
            // Stationary on the working set: check the multipliers.
            let mut worst: Option<(usize, f64)> = None;
            for (pos, &lam) in lambda.iter().enumerate() {
                if lam < -MULTIPLIER_TOL * scale {
                    let better = match worst {
                        None => true,
                        Some((wp, wl)) => lam < wl || (lam == wl && working[pos] < working[wp]),
                    };
                    if better {
                        worst = Some((pos, lam));
                    }
                }
            }
            match worst {
                None => {
                    multipliers = DVector::zeros(p);
                    for (pos, &i) in working.iter().enumerate() {
                        multipliers[i] = lambda[pos].max(0.0);
                    }
                    status = QpStatus::Optimal;
                    break;
                }
                Some((pos, _)) => {
                    working.remove(pos);
                }
            }
            continue;
        }

        // Ratio test; ties go to the lowest constraint index.
        let mut alpha = 1.0;
        let mut blocking: Option<usize> = None;
        let gp = g * &step;
        let gz = g * &z;
        for i in 0..p {
            if working.contains(&i) || row_norms[i] == 0.0 {
                continue;
            }
            if gp[i] > 1e-14 * row_norms[i] * step.amax() {
                let slack = (bound[i] - gz[i]).max(0.0);
                let t = slack / gp[i];
                if t < alpha {
                    alpha = t;
                    blocking = Some(i);
                }
            }
        }
        z += &step * alpha;
        settled = blocking.is_none();
        if let Some(i) = blocking {
            let pos = working.partition_point(|&w| w < i);
            working.insert(pos, i);
        }
        history.push(objective(&z));
    }

    working.sort_unstable();
    QpSolution {
        value: objective(&z),
        z,
        status,
        active_set: working,
        multipliers,
        quadratic_multiplier: 0.0,
        iterations,
        objective_history: history,
        regularization: REGULARIZATION,
    }
}

/// Solves the equality-constrained subproblem on the working set.
fn kkt_step(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    g: &DMatrix<f64>,
    working: &[usize],
    z: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let d = f.len();
    let w = working.len();
    let grad = h * z + f;
    if w == 0 {
        let step = -h.clone().cholesky()?.solve(&grad);
        return Some((step, DVector::zeros(0)));
    }
    let mut kkt = DMatrix::zeros(d + w, d + w);
    kkt.view_mut((0, 0), (d, d)).copy_from(h);
    for (pos, &i) in working.iter().enumerate() {
        for j in 0..d {
            kkt[(d + pos, j)] = g[(i, j)];
            kkt[(j, d + pos)] = g[(i, j)];
        }
    }
    let mut rhs = DVector::zeros(d + w);
    rhs.rows_mut(0, d).copy_from(&(-grad));
    let sol = kkt.clone().full_piv_lu().solve(&rhs)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    // A consistent solution must actually satisfy the system.
    let check = &kkt * &sol - &rhs;
    if check.amax() > 1e-8 * (1.0 + rhs.amax()) {
        return None;
    }
    Some((sol.rows(0, d).into_owned(), sol.rows(d, w).into_owned()))
}

/// Root search on the multiplier `mu` of the quadratic constraint: the linear
/// QP with objective `+ mu (z'Wz + 2w'z)` is solved until the constraint is
/// tight or inactive.
fn solve_with_quadratic(qp: &DenseQP, base: QpSolution, cutoff: f64) -> Result<QpSolution> {
    let quad = &qp.quadratic[0];
    let tol = FEASIBILITY_TOL * quad.radius.abs().max(1.0);
    let penalized = |mu: f64| DenseQP {
        hessian: &qp.hessian + &quad.w * (2.0 * mu),
        linear: &qp.linear + &quad.lin * (2.0 * mu),
        ineq: qp.ineq.clone(),
        bound: qp.bound.clone(),
        quadratic: Vec::new(),
    };
    let finish = |mut sol: QpSolution, mu: f64| {
        sol.value = qp.objective(&sol.z);
        sol.quadratic_multiplier = mu;
        sol
    };

    // Weak duality: for any mu >= 0 the penalized minimum minus mu * radius
    // bounds the optimum from below.
    let bounded = |sol: &QpSolution, mu: f64, phi: f64| {
        let lower = qp.objective(&sol.z) + mu * phi;
        (lower > cutoff).then(|| {
            let mut out = QpSolution::infeasible(qp.dim(), qp.n_ineq());
            out.status = QpStatus::Cutoff;
            out.value = lower;
            out
        })
    };

    if base.status != QpStatus::Optimal {
        return Ok(base);
    }
    if quad.violation(&base.z) <= tol {
        return Ok(cut(finish(base, 0.0), cutoff));
    }
    if let Some(out) = bounded(&base, 0.0, 0.0) {
        return Ok(out);
    }

    // The constraint cannot be met if its minimum over the polytope exceeds the radius.
    let reach = DenseQP {
        hessian: &quad.w * 2.0,
        linear: &quad.lin * 2.0,
        ineq: qp.ineq.clone(),
        bound: qp.bound.clone(),
        quadratic: Vec::new(),
    };
    let closest = solve_linear(&reach, Some((&base.z, &base.active_set)))?;
    if closest.status == QpStatus::Optimal && quad.violation(&closest.z) > tol {
        let mut out = QpSolution::infeasible(qp.dim(), qp.n_ineq());
        out.iterations = base.iterations + closest.iterations;
        return Ok(out);
    }

    // Bracket the multiplier, then refine with the Illinois variant of
    // regula falsi on the nonincreasing map mu -> q(z(mu)) - radius.
    let w_scale = max_abs(&quad.w).max(quad.lin.amax()).max(1e-300);
    let mu_cap = 1e12 * (1.0 + max_abs(&qp.hessian)) / w_scale;
    let (mut lo, mut phi_lo) = (0.0, quad.violation(&base.z));
    let mut hi = 1e-6 * max_abs(&qp.hessian).max(qp.linear.amax()).max(1.0) / w_scale;
    let mut warm = (base.z.clone(), base.active_set.clone());
    let (mut hi_sol, mut phi_hi);
    loop {
        let sol = solve_linear(&penalized(hi), Some((&warm.0, &warm.1)))?;
        if sol.status != QpStatus::Optimal {
            return Ok(sol);
        }
        let phi = quad.violation(&sol.z);
        warm = (sol.z.clone(), sol.active_set.clone());
        if phi <= tol {
            hi_sol = sol;
            phi_hi = phi;
            break;
        }
        if let Some(out) = bounded(&sol, hi, phi) {
            return Ok(out);
        }
        lo = hi;
        phi_lo = phi;
        hi *= 100.0;
        if hi > mu_cap {
            let mut out = QpSolution::infeasible(qp.dim(), qp.n_ineq());
            out.iterations = sol.iterations;
            return Ok(out);
        }
    }
    // The map is close to linear in log(mu), so interpolate there.
    let mut side = 0i8;
    for _ in 0..200 {
        if phi_hi >= -tol || hi - lo <= 1e-14 * hi {
            break;
        }
        let mut mid = if lo > 0.0 {
            let (a, b) = (lo.ln(), hi.ln());
            (b - phi_hi * (b - a) / (phi_hi - phi_lo)).exp()
        } else {
            hi - phi_hi * (hi - lo) / (phi_hi - phi_lo)
        };
        if !(mid > lo && mid < hi) {
            mid = 0.5 * (lo + hi);
        }
        let sol = solve_linear(&penalized(mid), Some((&hi_sol.z, &hi_sol.active_set)))?;
        if sol.status != QpStatus::Optimal {
            return Ok(sol);
        }
        let phi = quad.violation(&sol.z);
        if phi <= tol {
            hi = mid;
            phi_hi = phi;
            hi_sol = sol;
            if side == 1 {
                phi_lo *= 0.5;
            }
            side = 1;
        } else {
            if let Some(out) = bounded(&sol, mid, phi) {
                return Ok(out);
            }
            lo = mid;
            phi_lo = phi;
            if side == -1 {
                phi_hi *= 0.5;
            }
            side = -1;
        }
    }
    Ok(cut(finish(hi_sol, hi), cutoff))
}
