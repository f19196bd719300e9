//! Terminal ingredients for the rollout OCP.
//!
//! The terminal control policy transmits `K [x; u]` at phase 0 of every cycle
//! of length `M` (the base period) and holds the input during the other
//! `M - 1` steps. Its gain comes from the LQR problem of the lifted system
//! `x+ = A^M x + B_M w` whose per-cycle cost is `[x; w]' T_M [x; w]`.
//!
//! * Cyclic-horizon variant: one terminal weight `P_0 = diag(P_x, 0)` and
//!   terminal bucket floor `c - g`.
//! * Periodic-terminal variant: `M` weights `P_j`, obtained by running the
//!   hold dynamics backwards from `P_0`, and phase-dependent bucket floors.
//!
//! For box-constrained plants the terminal sets are
//! `Z_j = {z : z' P_j z <= alpha_j} ∩ (R^n x U)`. The radii are the largest
//! values for which every `Z_j` lies in `X x U` and the policy maps `Z_j`
//! into `Z_{j+1}`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    block_diag, max_abs, max_sym_eigenvalue, numerical_rank, spd_inverse, spectral_radius, symmetrize,
};
use crate::model::{base_period, OverallState, PlantModel, TokenBucketSpec};

pub const ARE_TOLERANCE: f64 = 1e-12;
pub const ARE_MAX_ITERATIONS: usize = 100_000;
pub const CONTROLLABILITY_RANK_TOL: f64 = 1e-9;

/// Which horizon / terminal-ingredient design the OCP uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Time-invariant terminal ingredients, horizon `N_bar - (k mod M)`.
    CyclicHorizon,
    /// Fixed horizon `N_bar`, `M` periodically alternating terminal ingredients.
    PeriodicTerminal,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::CyclicHorizon => "v1",
            Variant::PeriodicTerminal => "v2",
        }
    }
}

/// M-step composition of the plant under a held input.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedSystem {
    pub period: usize,
    /// `A^M`.
    pub a_m: DMatrix<f64>,
    /// `sum_{i<M} A^i B`.
    pub b_m: DMatrix<f64>,
    /// Per-cycle cost weight on `[x; w]`.
    pub t_m: DMatrix<f64>,
    /// Hold dynamics on `[x; u]`: `[[A, B], [0, I]]`.
    pub hold: DMatrix<f64>,
}

impl LiftedSystem {
    pub fn n(&self) -> usize {
        self.a_m.nrows()
    }

    pub fn m(&self) -> usize {
        self.b_m.ncols()
    }

    /// Transmit dynamics `[[A, 0], [0, 0]] + [B; I] K` for a gain `K` of size `m x (n+m)`.
    pub fn transmit(&self, plant: &PlantModel, k: &DMatrix<f64>) -> DMatrix<f64> {
        transmit_dynamics(plant, k)
    }
}

pub fn hold_dynamics(plant: &PlantModel) -> DMatrix<f64> {
    let (n, m) = (plant.n(), plant.m());
    let mut a0 = DMatrix::zeros(n + m, n + m);
    a0.view_mut((0, 0), (n, n)).copy_from(plant.a());
    a0.view_mut((0, n), (n, m)).copy_from(plant.b());
    a0.view_mut((n, n), (m, m)).fill_with_identity();
    a0
}

pub fn transmit_dynamics(plant: &PlantModel, k: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (plant.n(), plant.m());
    let mut base = DMatrix::zeros(n + m, n + m);
    base.view_mut((0, 0), (n, n)).copy_from(plant.a());
    let mut bi = DMatrix::zeros(n + m, m);
    bi.view_mut((0, 0), (n, m)).copy_from(plant.b());
    bi.view_mut((n, 0), (m, m)).fill_with_identity();
    base + bi * k
}

/// `diag(Q, R)`.
pub fn stage_weight(plant: &PlantModel) -> DMatrix<f64> {
    block_diag(plant.q(), plant.r())
}

pub fn build_lifted(plant: &PlantModel, period: usize) -> Result<LiftedSystem> {
    if period == 0 {
        return Err(Error::InvalidParameter("lifting period must be at least 1".into()));
    }
    let (n, m) = (plant.n(), plant.m());
    let hold = hold_dynamics(plant);
    let weight = stage_weight(plant);

    let mut a_m = DMatrix::identity(n, n);
    let mut b_m = DMatrix::zeros(n, m);
    let mut t_m = DMatrix::zeros(n + m, n + m);
    let mut hold_pow = DMatrix::identity(n + m, n + m);
    for _ in 0..period {
        b_m += &a_m * plant.b();
        t_m += hold_pow.transpose() * &weight * &hold_pow;
        a_m = plant.a() * a_m;
        hold_pow = &hold * hold_pow;
    }
    Ok(LiftedSystem {
        period,
        a_m,
        b_m,
        t_m: symmetrize(&t_m),
        hold,
    })
}

/// Blocks `(Q_bar, S_bar, R_bar)` of the lifted cost weight.
fn cost_blocks(lifted: &LiftedSystem) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (lifted.n(), lifted.m());
    let t = &lifted.t_m;
    (
        t.view((0, 0), (n, n)).into_owned(),
        t.view((0, n), (n, m)).into_owned(),
        t.view((n, n), (m, m)).into_owned(),
    )
}

/// One application of the Riccati recursion with cross term, written without
/// eliminating the cross term.
pub fn riccati_step(lifted: &LiftedSystem, p: &DMatrix<f64>) -> DMatrix<f64> {
    let (q, s, r) = cost_blocks(lifted);
    let (a, b) = (&lifted.a_m, &lifted.b_m);
    let gram = r + b.transpose() * p * b;
    let coupling = b.transpose() * p * a + s.transpose();
    let correction = coupling.transpose() * gram.lu().solve(&coupling).expect("Riccati gram matrix is invertible");
    symmetrize(&(q + a.transpose() * p * a - correction))
}

/// Stabilizing solution of the lifted Riccati equation.
#[derive(Debug, Clone, PartialEq)]
pub struct AreSolution {
    /// Optimal cost matrix `P_x` (n x n).
    pub p_x: DMatrix<f64>,
    /// Optimal gain `K_x` (m x n), applied as `w = K_x x`.
    pub k_x: DMatrix<f64>,
    pub iterations: usize,
    /// Spectral radius of `A^M + B_M K_x`.
    pub closed_loop_radius: f64,
}

/// Solves the lifted ARE by fixed-point iteration of the Riccati recursion
/// after eliminating the cross term by completing the square.
pub fn solve_are_cross(lifted: &LiftedSystem) -> Result<AreSolution> {
    let n = lifted.n();
    let (q, s, r) = cost_blocks(lifted);
    let (a, b) = (&lifted.a_m, &lifted.b_m);

    let mut ctrb = DMatrix::zeros(n, n * lifted.m());
    let mut blk = b.clone();
    for i in 0..n {
        ctrb.view_mut((0, i * lifted.m()), (n, lifted.m())).copy_from(&blk);
        blk = a * blk;
    }
    let rank = numerical_rank(&ctrb, CONTROLLABILITY_RANK_TOL);
    if rank < n {
        return Err(Error::NotControllable { rank, n });
    }

    // x'Qx + 2x'Sw + w'Rw = x'(Q - S R^-1 S')x + (w + R^-1 S'x)' R (w + R^-1 S'x)
    let r_chol = symmetrize(&r)
        .cholesky()
        .ok_or_else(|| Error::Numerical("lifted input weight is not positive definite".into()))?;
    let r_inv_st = r_chol.solve(&s.transpose());
    let a_t = a - b * &r_inv_st;
    let q_t = symmetrize(&(&q - &s * &r_inv_st));

    let mut p = q.clone();
    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    while iterations < ARE_MAX_ITERATIONS {
        iterations += 1;
        let gram = &r + b.transpose() * &p * b;
        let bpa = b.transpose() * &p * &a_t;
        let chol = symmetrize(&gram)
            .cholesky()
            .ok_or_else(|| Error::Numerical("Riccati gram matrix lost definiteness".into()))?;
        let next = symmetrize(&(&q_t + a_t.transpose() * &p * &a_t - bpa.transpose() * chol.solve(&bpa)));
        last_change = max_abs(&(&next - &p));
        p = next;
        if last_change <= ARE_TOLERANCE * max_abs(&p).max(1.0) {
            break;
        }
    }
    if last_change > ARE_TOLERANCE * max_abs(&p).max(1.0) {
        return Err(Error::NoConvergence {
            iterations,
            last_change,
        });
    }

    let gram = &r + b.transpose() * &p * b;
    let k_x = -(gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("Riccati gram matrix lost definiteness".into()))?
        .solve(&(b.transpose() * &p * &a_t))
        + r_inv_st);
    let closed_loop_radius = spectral_radius(&(a + b * &k_x));
    if closed_loop_radius >= 1.0 {
        return Err(Error::Numerical(format!(
            "lifted closed loop is not stable (spectral radius {closed_loop_radius})"
        )));
    }
    Ok(AreSolution {
        p_x: p,
        k_x,
        iterations,
        closed_loop_radius,
    })
}

/// Terminal cost weights, terminal sets and policy gain for one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients {
    pub variant: Variant,
    pub period: usize,
    /// Terminal policy gain `[K_x 0]`, size `m x (n+m)`.
    pub k: DMatrix<f64>,
    /// Terminal weights `P_0, ..., P_{M-1}` (a single entry for the cyclic variant).
    pub p: Vec<DMatrix<f64>>,
    /// Lower bounds on the terminal bucket level, per phase.
    pub bucket_floor: Vec<i64>,
    /// Ellipsoid radii per phase; `None` when `X x U` is unconstrained.
    pub alpha: Option<Vec<f64>>,
    pub p_x: DMatrix<f64>,
    pub k_x: DMatrix<f64>,
}

impl TerminalIngredients {
    /// Number of distinct terminal phases (1 or M).
    pub fn phases(&self) -> usize {
        self.p.len()
    }

    fn index(&self, phase: usize) -> usize {
        match self.variant {
            Variant::CyclicHorizon => 0,
            Variant::PeriodicTerminal => phase % self.p.len(),
        }
    }

    pub fn weight(&self, phase: usize) -> &DMatrix<f64> {
        &self.p[self.index(phase)]
    }

    pub fn floor(&self, phase: usize) -> i64 {
        self.bucket_floor[self.index(phase)]
    }

    pub fn radius(&self, phase: usize) -> Option<f64> {
        self.alpha.as_ref().map(|a| a[self.index(phase)])
    }

    /// Terminal cost `[x; u]' P_phase [x; u]`.
    pub fn terminal_cost(&self, z: &DVector<f64>, phase: usize) -> f64 {
        z.dot(&(self.weight(phase) * z))
    }
}

struct Common {
    period: usize,
    lifted: LiftedSystem,
    are: AreSolution,
    p0: DMatrix<f64>,
    k: DMatrix<f64>,
}

fn common(plant: &PlantModel, spec: &TokenBucketSpec) -> Result<Common> {
    let period = base_period(spec);
    let lifted = build_lifted(plant, period)?;
    let are = solve_are_cross(&lifted)?;
    let (n, m) = (plant.n(), plant.m());
    let p0 = block_diag(&are.p_x, &DMatrix::zeros(m, m));
    let mut k = DMatrix::zeros(m, n + m);
    k.view_mut((0, 0), (m, n)).copy_from(&are.k_x);
    Ok(Common {
        period,
        lifted,
        are,
        p0,
        k,
    })
}

/// Backward recursion `P_j = A0' P_{j+1 mod M} A0 + diag(Q, R)` for `j = M-1, ..., 1`.
fn periodic_weights(plant: &PlantModel, c: &Common) -> Vec<DMatrix<f64>> {
    let weight = stage_weight(plant);
    let a0 = &c.lifted.hold;
    let mut p = vec![c.p0.clone(); c.period];
    for j in (1..c.period).rev() {
        let next = &p[(j + 1) % c.period];
        p[j] = symmetrize(&(a0.transpose() * next * a0 + &weight));
    }
    p
}

/// Floors `[c-g, 0, g, 2g, ..., (M-2)g]`.
fn periodic_floors(spec: &TokenBucketSpec, period: usize) -> Vec<i64> {
    (0..period)
        .map(|j| {
            if j == 0 {
                spec.transmit_threshold()
            } else {
                (j as i64 - 1) * spec.g()
            }
        })
        .collect()
}

pub fn variant1_ingredients(plant: &PlantModel, spec: &TokenBucketSpec) -> Result<TerminalIngredients> {
    let c = common(plant, spec)?;
    let alpha = if plant.is_constrained() {
        let chain = periodic_weights(plant, &c);
        let radii = ellipsoid_radii(plant, &c.are.k_x, &c.k, &chain)?;
        Some(vec![radii[0]])
    } else {
        None
    };
    Ok(TerminalIngredients {
        variant: Variant::CyclicHorizon,
        period: c.period,
        k: c.k,
        p: vec![c.p0],
        bucket_floor: vec![spec.transmit_threshold()],
        alpha,
        p_x: c.are.p_x,
        k_x: c.are.k_x,
    })
}

pub fn variant2_ingredients(plant: &PlantModel, spec: &TokenBucketSpec) -> Result<TerminalIngredients> {
    let c = common(plant, spec)?;
    let p = periodic_weights(plant, &c);
    let alpha = if plant.is_constrained() {
        Some(ellipsoid_radii(plant, &c.are.k_x, &c.k, &p)?)
    } else {
        None
    };
    Ok(TerminalIngredients {
        variant: Variant::PeriodicTerminal,
        period: c.period,
        k: c.k,
        bucket_floor: periodic_floors(spec, c.period),
        p,
        alpha,
        p_x: c.are.p_x,
        k_x: c.are.k_x,
    })
}

pub fn synthesize(plant: &PlantModel, spec: &TokenBucketSpec, variant: Variant) -> Result<TerminalIngredients> {
    match variant {
        Variant::CyclicHorizon => variant1_ingredients(plant, spec),
        Variant::PeriodicTerminal => variant2_ingredients(plant, spec),
    }
}

/// Radii of the terminal ellipsoids. Phase 0 lives on `x` only (the policy
/// overwrites the held input), the other phases on `[x; u]`.
fn ellipsoid_radii(
    plant: &PlantModel,
    k_x: &DMatrix<f64>,
    k: &DMatrix<f64>,
    weights: &[DMatrix<f64>],
) -> Result<Vec<f64>> {
    let period = weights.len();
    let n = plant.n();
    let a0 = hold_dynamics(plant);
    let a1 = transmit_dynamics(plant, k);
    let px = weights[0].view((0, 0), (n, n)).into_owned();

    let shape = |j: usize| -> DMatrix<f64> {
        if j == 0 {
            px.clone()
        } else {
            weights[j].clone()
        }
    };
    let successor_map = |j: usize| -> DMatrix<f64> {
        let full = if j == 0 {
            a1.columns(0, n).into_owned()
        } else {
            a0.clone()
        };
        if (j + 1) % period == 0 {
            full.rows(0, n).into_owned()
        } else {
            full
        }
    };

    let mut caps = vec![f64::INFINITY; period];
    for (j, cap) in caps.iter_mut().enumerate() {
        let inv = spd_inverse(&shape(j))?;
        if let Some(xb) = plant.state_box() {
            for i in 0..n {
                *cap = cap.min(xb.half_width(i).powi(2) / inv[(i, i)]);
            }
        }
        if j == 0 {
            if let Some(ub) = plant.input_box() {
                let spread = k_x * &inv * k_x.transpose();
                for i in 0..plant.m() {
                    if spread[(i, i)] > 0.0 {
                        *cap = cap.min(ub.half_width(i).powi(2) / spread[(i, i)]);
                    }
                }
            }
        }
    }

    // Contraction factor of each transition in the metric of the shapes.
    let mut rho = vec![0.0; period];
    for j in 0..period {
        let chol = symmetrize(&shape(j))
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("terminal shape {j} is not positive definite")))?;
        let l_inv = chol
            .l()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        let map = successor_map(j);
        let pulled = map.transpose() * shape((j + 1) % period) * &map;
        rho[j] = max_sym_eigenvalue(&(&l_inv * pulled * l_inv.transpose())).max(0.0);
    }

    // Greatest fixed point of alpha_j <= cap_j, rho_j alpha_j <= alpha_{j+1}.
    let mut alpha = caps;
    for _ in 0..2 * period + 1 {
        for j in (0..period).rev() {
            if rho[j] > 0.0 {
                alpha[j] = alpha[j].min(alpha[(j + 1) % period] / rho[j]);
            }
        }
    }
    for j in 0..period {
        if !alpha[j].is_finite() || alpha[j] <= 0.0 {
            return Err(Error::Numerical(format!(
                "terminal radius {j} is degenerate ({})",
                alpha[j]
            )));
        }
        if rho[j] * alpha[j] > alpha[(j + 1) % period] * (1.0 + 1e-9) {
            return Err(Error::Numerical(format!(
                "terminal sets are not invariant at phase {j}"
            )));
        }
    }
    Ok(alpha)
}

/// Maximal eigenvalues of the cost-decrease matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CostDecreaseReport {
    pub variant: Variant,
    /// One entry for the cyclic variant, `M` for the periodic one.
    pub max_eigenvalues: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Left-hand side of the M-step cost-decrease inequality for weight `p0`.
pub fn cycle_decrease_matrix(plant: &PlantModel, k: &DMatrix<f64>, p0: &DMatrix<f64>, period: usize) -> DMatrix<f64> {
    let a0 = hold_dynamics(plant);
    let a1 = transmit_dynamics(plant, k);
    let weight = stage_weight(plant);
    let mut out = first_step_terms(plant, k) - p0;
    let mut hold_pow = DMatrix::identity(a0.nrows(), a0.ncols());
    for _ in 1..period {
        let mapped = &hold_pow * &a1;
        out += mapped.transpose() * &weight * &mapped;
        hold_pow = &a0 * hold_pow;
    }
    let end = &hold_pow * &a1;
    out += end.transpose() * p0 * &end;
    symmetrize(&out)
}

/// `diag(Q, 0) + K' R K`: cost of the transmit step.
fn first_step_terms(plant: &PlantModel, k: &DMatrix<f64>) -> DMatrix<f64> {
    let m = plant.m();
    block_diag(plant.q(), &DMatrix::zeros(m, m)) + k.transpose() * plant.r() * k
}

/// The M one-step decrease matrices of the periodic design, indexed by phase.
pub fn periodic_decrease_matrices(plant: &PlantModel, k: &DMatrix<f64>, p: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let period = p.len();
    let a0 = hold_dynamics(plant);
    let a1 = transmit_dynamics(plant, k);
    let weight = stage_weight(plant);
    (0..period)
        .map(|j| {
            let next = &p[(j + 1) % period];
            let m = if j == 0 {
                a1.transpose() * next * &a1 - &p[0] + first_step_terms(plant, k)
            } else {
                a0.transpose() * next * &a0 - &p[j] + &weight
            };
            symmetrize(&m)
        })
        .collect()
}

pub fn verify_cost_decrease(ing: &TerminalIngredients, plant: &PlantModel, tol: f64) -> CostDecreaseReport {
    let max_eigenvalues: Vec<f64> = match ing.variant {
        Variant::CyclicHorizon => {
            vec![max_sym_eigenvalue(&cycle_decrease_matrix(
                plant, &ing.k, &ing.p[0], ing.period,
            ))]
        }
        Variant::PeriodicTerminal => periodic_decrease_matrices(plant, &ing.k, &ing.p)
            .iter()
            .map(max_sym_eigenvalue)
            .collect(),
    };
    let pass = max_eigenvalues.iter().all(|&e| e <= tol);
    CostDecreaseReport {
        variant: ing.variant,
        max_eigenvalues,
        tolerance: tol,
        pass,
    }
}

/// Membership of `xi` in the terminal set of the given phase.
pub fn terminal_membership(
    xi: &OverallState,
    phase: usize,
    ing: &TerminalIngredients,
    plant: &PlantModel,
    spec: &TokenBucketSpec,
) -> bool {
    if xi.beta < ing.floor(phase) || xi.beta > spec.b() {
        return false;
    }
    match ing.radius(phase) {
        None => true,
        Some(alpha) => {
            let u_ok = plant.input_box().map_or(true, |ub| ub.contains(&xi.u));
            u_ok && ing.terminal_cost(&xi.plant_part(), phase) <= alpha
        }
    }
}
