//! The rollout OCP: bucket-feasible transmission schedules are enumerated
//! exactly and the continuous inputs of each schedule come from a condensed QP.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{bucket_step, overall_step, OverallInput, OverallState, PlantModel, TokenBucketSpec};
use crate::qp::{
    relaxation, solve_active_set, solve_active_set_with_cutoff, solve_unconstrained, DenseQP, QpSolution, QpStatus,
    QuadraticConstraint, FEASIBILITY_TOL,
};
use crate::terminal::{TerminalIngredients, Variant};

/// Relative tolerance under which two schedule values count as equal.
pub const TIE_TOLERANCE: f64 = 1e-9;
/// Schedule counts below this are solved sequentially.
const PARALLEL_THRESHOLD: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct OcpParams {
    pub n_bar: usize,
    pub ingredients: TerminalIngredients,
    /// Weight of the bucket reward `sigma (b^2 - beta_N^2)`; 0 disables it.
    pub sigma_bucket: f64,
    /// Solve schedules on the rayon pool when there are many of them.
    pub parallel: bool,
}

impl OcpParams {
    pub fn new(ingredients: TerminalIngredients, n_bar: usize, sigma_bucket: f64) -> Result<Self> {
        if n_bar == 0 {
            return Err(Error::InvalidParameter("prediction horizon must be positive".into()));
        }
        if ingredients.variant == Variant::CyclicHorizon && n_bar < ingredients.period {
            return Err(Error::InvalidParameter(format!(
                "prediction horizon {n_bar} must be at least the base period {}",
                ingredients.period
            )));
        }
        if !(sigma_bucket >= 0.0 && sigma_bucket.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bucket weight must be nonnegative, got {sigma_bucket}"
            )));
        }
        Ok(OcpParams {
            n_bar,
            ingredients,
            sigma_bucket,
            parallel: true,
        })
    }

    pub fn variant(&self) -> Variant {
        self.ingredients.variant
    }

    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }
}

pub fn horizon_at(params: &OcpParams, k: usize) -> usize {
    match params.variant() {
        Variant::CyclicHorizon => params.n_bar - k % params.ingredients.period,
        Variant::PeriodicTerminal => params.n_bar,
    }
}

/// Phase of the terminal ingredients used by the OCP solved at time `k`.
pub fn terminal_phase(params: &OcpParams, k: usize) -> usize {
    match params.variant() {
        Variant::CyclicHorizon => 0,
        Variant::PeriodicTerminal => (k + params.n_bar) % params.ingredients.period,
    }
}

/// All transmission sequences of length `n` whose bucket trajectory from
/// `beta0` stays admissible and ends at or above `terminal_floor`, in
/// lexicographic order (hold before transmit).
pub fn enumerate_schedules(beta0: i64, n: usize, spec: &TokenBucketSpec, terminal_floor: i64) -> Vec<Vec<bool>> {
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(n);
    dfs(beta0, n, spec, terminal_floor, &mut prefix, &mut out);
    out
}

fn dfs(beta: i64, n: usize, spec: &TokenBucketSpec, floor: i64, prefix: &mut Vec<bool>, out: &mut Vec<Vec<bool>>) {
    let remaining = (n - prefix.len()) as i64;
    if beta.saturating_add(remaining * spec.g()).min(spec.b()) < floor {
        return;
    }
    if remaining == 0 {
        out.push(prefix.clone());
        return;
    }
    for gamma in [false, true] {
        if let Ok(next) = bucket_step(beta, gamma, spec) {
            prefix.push(gamma);
            dfs(next, n, spec, floor, prefix, out);
            prefix.pop();
        }
    }
}

/// Bucket levels `beta(0..=N)` induced by a schedule.
pub fn bucket_trajectory(beta0: i64, schedule: &[bool], spec: &TokenBucketSpec) -> Result<Vec<i64>> {
    let mut out = Vec::with_capacity(schedule.len() + 1);
    out.push(beta0);
    let mut beta = beta0;
    for &gamma in schedule {
        beta = bucket_step(beta, gamma, spec)?;
        out.push(beta);
    }
    Ok(out)
}

/// QP in the stacked transmitted inputs; the OCP cost is `qp objective + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedQp {
    pub qp: DenseQP,
    pub constant: f64,
}

impl CondensedQp {
    pub fn has_constraints(&self) -> bool {
        self.qp.n_ineq() > 0 || !self.qp.quadratic.is_empty()
    }
}

/// Affine expression `offset + gain * v`.
#[derive(Clone)]
struct Affine {
    offset: DVector<f64>,
    gain: DMatrix<f64>,
}

impl Affine {
    fn constant(offset: DVector<f64>, d: usize) -> Self {
        let rows = offset.len();
        Affine {
            offset,
            gain: DMatrix::zeros(rows, d),
        }
    }

    fn stack(&self, other: &Affine) -> Affine {
        let d = self.gain.ncols();
        let (r1, r2) = (self.offset.len(), other.offset.len());
        let mut offset = DVector::zeros(r1 + r2);
        offset.rows_mut(0, r1).copy_from(&self.offset);
        offset.rows_mut(r1, r2).copy_from(&other.offset);
        let mut gain = DMatrix::zeros(r1 + r2, d);
        gain.view_mut((0, 0), (r1, d)).copy_from(&self.gain);
        gain.view_mut((r1, 0), (r2, d)).copy_from(&other.gain);
        Affine { offset, gain }
    }
}

/// Adds `e' W e` for `e = offset + gain v` to `(H, f, constant)` in the
/// `1/2 v'Hv + f'v + constant` convention.
fn accumulate(h: &mut DMatrix<f64>, f: &mut DVector<f64>, constant: &mut f64, e: &Affine, w: &DMatrix<f64>) {
    let wg = w * &e.gain;
    *h += e.gain.transpose() * &wg * 2.0;
    *f += wg.transpose() * &e.offset * 2.0;
    *constant += e.offset.dot(&(w * &e.offset));
}

fn box_rows(e: &Affine, lower: &DVector<f64>, upper: &DVector<f64>, rows: &mut Vec<(DVector<f64>, f64)>) {
    for r in 0..e.offset.len() {
        let g = e.gain.row(r).transpose();
        rows.push((g.clone(), upper[r] - e.offset[r]));
        rows.push((-g, e.offset[r] - lower[r]));
    }
}

/// Builds the condensed QP of one schedule for the terminal phase `phase`.
pub fn condense(
    xi0: &OverallState,
    schedule: &[bool],
    phase: usize,
    params: &OcpParams,
    plant: &PlantModel,
    spec: &TokenBucketSpec,
) -> Result<CondensedQp> {
    let (n, m) = (plant.n(), plant.m());
    if xi0.x.len() != n || xi0.u.len() != m {
        return Err(Error::Dimension("initial state does not match the plant".into()));
    }
    let n_tx = schedule.iter().filter(|&&g| g).count();
    let d = n_tx * m;
    let betas = bucket_trajectory(xi0.beta, schedule, spec)?;

    let mut h = DMatrix::zeros(d, d);
    let mut f = DVector::zeros(d);
    let mut constant = 0.0;
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();

    let mut x = Affine::constant(xi0.x.clone(), d);
    let mut held = Affine::constant(xi0.u.clone(), d);
    let mut slot = 0;
    for (i, &gamma) in schedule.iter().enumerate() {
        if i > 0 {
            if let Some(xb) = plant.state_box() {
                box_rows(&x, &xb.lower, &xb.upper, &mut rows);
            }
        }
        let applied = if gamma {
            let mut gain = DMatrix::zeros(m, d);
            gain.view_mut((0, slot * m), (m, m)).fill_with_identity();
            slot += 1;
            let a = Affine {
                offset: DVector::zeros(m),
                gain,
            };
            if let Some(ub) = plant.input_box() {
                box_rows(&a, &ub.lower, &ub.upper, &mut rows);
            }
            a
        } else {
            held.clone()
        };
        accumulate(&mut h, &mut f, &mut constant, &x, plant.q());
        accumulate(&mut h, &mut f, &mut constant, &applied, plant.r());
        x = Affine {
            offset: plant.a() * &x.offset + plant.b() * &applied.offset,
            gain: plant.a() * &x.gain + plant.b() * &applied.gain,
        };
        held = applied;
    }
    if let Some(xb) = plant.state_box() {
        if !schedule.is_empty() {
            box_rows(&x, &xb.lower, &xb.upper, &mut rows);
        }
    }

    let ing = &params.ingredients;
    let z = x.stack(&held);
    accumulate(&mut h, &mut f, &mut constant, &z, ing.weight(phase));
    let beta_n = betas[schedule.len()] as f64;
    let b = spec.b() as f64;
    constant += params.sigma_bucket * (b * b - beta_n * beta_n);

    let mut quadratic = Vec::new();
    if let Some(alpha) = ing.radius(phase) {
        let (e, shape) = if ing.variant == Variant::CyclicHorizon || phase % ing.period == 0 {
            (x, ing.p_x.clone())
        } else {
            (z, ing.weight(phase).clone())
        };
        let sg = &shape * &e.gain;
        quadratic.push(QuadraticConstraint {
            w: crate::linalg::symmetrize(&(e.gain.transpose() * &sg)),
            lin: sg.transpose() * &e.offset,
            constant: e.offset.dot(&(&shape * &e.offset)),
            radius: alpha,
        });
    }

    let mut ineq = DMatrix::zeros(rows.len(), d);
    let mut bound = DVector::zeros(rows.len());
    for (r, (g, hb)) in rows.into_iter().enumerate() {
        ineq.row_mut(r).copy_from(&g.transpose());
        bound[r] = hb;
    }
    Ok(CondensedQp {
        qp: DenseQP {
            hessian: crate::linalg::symmetrize(&h),
            linear: f,
            ineq,
            bound,
            quadratic,
        },
        constant,
    })
}

/// Optimal inputs and cost of one fixed schedule; `None` if the schedule admits no
/// constraint-satisfying trajectory.
pub fn solve_schedule(
    xi0: &OverallState,
    schedule: &[bool],
    phase: usize,
    params: &OcpParams,
    plant: &PlantModel,
    spec: &TokenBucketSpec,
) -> Result<Option<(f64, DVector<f64>)>> {
    let cond = condense(xi0, schedule, phase, params, plant, spec)?;
    match relaxed_value(&cond)? {
        Relaxed::Infeasible => Ok(None),
        Relaxed::Exact(value, z) => Ok(Some((value, z))),
        Relaxed::Bound(_, sol) => match refine(&cond, sol, f64::INFINITY)? {
            Refined::Solved(value, z) => Ok(Some((value, z))),
            _ => Ok(None),
        },
    }
}

/// Outcome of a schedule's QP without the terminal ellipsoid.
enum Relaxed {
    Infeasible,
    /// The relaxed optimum already satisfies the ellipsoid (or there is none).
    Exact(f64, DVector<f64>),
    /// Lower bound on the OCP value; the relaxed solution is kept as a warm start.
    Bound(f64, QpSolution),
}

fn relaxed_value(cond: &CondensedQp) -> Result<Relaxed> {
    let qp = &cond.qp;
    if qp.dim() == 0 {
        let z = DVector::zeros(0);
        return Ok(if qp.is_feasible(&z, 1e-9) {
            Relaxed::Exact(cond.constant, z)
        } else {
            Relaxed::Infeasible
        });
    }
    let sol = if qp.n_ineq() == 0 {
        solve_unconstrained(&qp.hessian, &qp.linear)?
    } else {
        solve_active_set(&relaxation(qp), None)?
    };
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => return Ok(Relaxed::Infeasible),
        _ => return Err(Error::Numerical("QP iteration budget exhausted".into())),
    }
    let value = sol.value + cond.constant;
    let inside = qp
        .quadratic
        .iter()
        .all(|q| q.violation(&sol.z) <= FEASIBILITY_TOL * q.radius.abs().max(1.0));
    Ok(if inside {
        Relaxed::Exact(value, sol.z)
    } else {
        Relaxed::Bound(value, sol)
    })
}

enum Refined {
    Solved(f64, DVector<f64>),
    Infeasible,
    Dominated,
}

/// Full solve of a schedule whose relaxation left the ellipsoid; gives up once
/// the value is provably above `cutoff`.
fn refine(cond: &CondensedQp, relaxed: QpSolution, cutoff: f64) -> Result<Refined> {
    let sol = solve_active_set_with_cutoff(&cond.qp, Some(relaxed), cutoff - cond.constant)?;
    Ok(match sol.status {
        QpStatus::Optimal => Refined::Solved(sol.value + cond.constant, sol.z),
        QpStatus::Infeasible => Refined::Infeasible,
        QpStatus::Cutoff => Refined::Dominated,
        QpStatus::IterLimit => return Err(Error::Numerical("QP iteration budget exhausted".into())),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    /// Optimal overall inputs `pi*(0..N-1 | k)`.
    pub inputs: Vec<OverallInput>,
    /// Predicted overall states `xi(0..=N | k)`.
    pub states: Vec<OverallState>,
    pub value: f64,
    pub schedule: Vec<bool>,
    pub n_schedules_examined: usize,
    pub horizon: usize,
    pub terminal_phase: usize,
    pub feasible: bool,
}

impl OcpSolution {
    pub fn transmissions(&self) -> usize {
        self.schedule.iter().filter(|&&g| g).count()
    }
}

struct Candidate {
    value: f64,
    transmissions: usize,
    index: usize,
    v: DVector<f64>,
}

/// Values within this distance of `best` count as ties.
fn tie_band(best: f64) -> f64 {
    best + TIE_TOLERANCE * best.abs()
}

/// Smallest value wins; among values within the tie band of the minimum, fewer
/// transmissions, then the earlier (lexicographically smaller) schedule.
fn select(candidates: Vec<Candidate>) -> Option<Candidate> {
    let min = candidates.iter().map(|c| c.value).fold(f64::INFINITY, f64::min);
    candidates
        .into_iter()
        .filter(|c| c.value <= tie_band(min))
        .min_by_key(|c| (c.transmissions, c.index))
}

/// Minimizes the OCP at `(xi0, k)` over all bucket-feasible schedules.
///
/// Every schedule's QP is first solved without the terminal ellipsoid. Those
/// whose relaxed optimum leaves the ellipsoid are then solved in full in order
/// of their relaxed value, skipping any whose lower bound already lies beyond
/// the tie band of the best value found so far.
pub fn solve_ocp(
    xi0: &OverallState,
    k: usize,
    params: &OcpParams,
    plant: &PlantModel,
    spec: &TokenBucketSpec,
) -> Result<OcpSolution> {
    let horizon = horizon_at(params, k);
    let phase = terminal_phase(params, k);
    let floor = params.ingredients.floor(phase);
    let schedules = enumerate_schedules(xi0.beta, horizon, spec, floor);
    let parallel = params.parallel && schedules.len() >= PARALLEL_THRESHOLD;
    let transmissions = |i: usize| schedules[i].iter().filter(|&&g| g).count();

    let relax = |(index, s): (usize, &Vec<bool>)| -> Result<(usize, CondensedQp, Relaxed)> {
        let cond = condense(xi0, s, phase, params, plant, spec)?;
        let r = relaxed_value(&cond)?;
        Ok((index, cond, r))
    };
    let relaxed: Vec<Result<(usize, CondensedQp, Relaxed)>> = if parallel {
        schedules.par_iter().enumerate().map(relax).collect()
    } else {
        schedules.iter().enumerate().map(relax).collect()
    };

    let mut candidates = Vec::new();
    let mut pending = Vec::new();
    for r in relaxed {
        let (index, cond, outcome) = r?;
        match outcome {
            Relaxed::Infeasible => {}
            Relaxed::Exact(value, v) => candidates.push(Candidate {
                value,
                transmissions: transmissions(index),
                index,
                v,
            }),
            Relaxed::Bound(bound, sol) => pending.push((bound, index, cond, sol)),
        }
    }
    pending.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let incumbent = |c: &[Candidate]| tie_band(c.iter().map(|c| c.value).fold(f64::INFINITY, f64::min));
    if parallel {
        let cutoff = incumbent(&candidates);
        let refined: Vec<Result<Option<Candidate>>> = pending
            .into_par_iter()
            .map(|(bound, index, cond, sol)| {
                if bound > cutoff {
                    return Ok(None);
                }
                Ok(match refine(&cond, sol, cutoff)? {
                    Refined::Solved(value, v) => Some(Candidate {
                        value,
                        transmissions: transmissions(index),
                        index,
                        v,
                    }),
                    _ => None,
                })
            })
            .collect();
        for c in refined {
            candidates.extend(c?);
        }
    } else {
        for (bound, index, cond, sol) in pending {
            let cutoff = incumbent(&candidates);
            if bound > cutoff {
                break;
            }
            if let Refined::Solved(value, v) = refine(&cond, sol, cutoff)? {
                candidates.push(Candidate {
                    value,
                    transmissions: transmissions(index),
                    index,
                    v,
                });
            }
        }
    }
    let best = select(candidates);

    let Some(best) = best else {
        return Ok(OcpSolution {
            inputs: Vec::new(),
            states: Vec::new(),
            value: f64::INFINITY,
            schedule: Vec::new(),
            n_schedules_examined: schedules.len(),
            horizon,
            terminal_phase: phase,
            feasible: false,
        });
    };

    let schedule = schedules[best.index].clone();
    let m = plant.m();
    let mut inputs = Vec::with_capacity(horizon);
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(xi0.clone());
    let mut slot = 0;
    for &gamma in &schedule {
        let pi = if gamma {
            let v = best.v.rows(slot * m, m).into_owned();
            slot += 1;
            OverallInput::transmit(v)
        } else {
            OverallInput::hold(m)
        };
        let next = overall_step(states.last().expect("nonempty"), &pi, plant, spec)?;
        states.push(next);
        inputs.push(pi);
    }
    Ok(OcpSolution {
        inputs,
        states,
        value: best.value,
        schedule,
        n_schedules_examined: schedules.len(),
        horizon,
        terminal_phase: phase,
        feasible: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::stage_cost;
    use crate::presets;
    use crate::terminal::{variant1_ingredients, variant2_ingredients};
    use proptest::prelude::*;

    fn brute_force(beta0: i64, n: usize, spec: &TokenBucketSpec, floor: i64) -> Vec<Vec<bool>> {
        (0..1u32 << n)
            .map(|code| (0..n).map(|i| code >> (n - 1 - i) & 1 == 1).collect::<Vec<bool>>())
            .filter(|s| bucket_trajectory(beta0, s, spec).map_or(false, |t| *t.last().unwrap() >= floor))
            .collect()
    }

    fn params(p: &presets::Preset, variant: Variant, n_bar: usize) -> OcpParams {
        let ing = match variant {
            Variant::CyclicHorizon => variant1_ingredients(&p.plant, &p.spec).unwrap(),
            Variant::PeriodicTerminal => variant2_ingredients(&p.plant, &p.spec).unwrap(),
        };
        OcpParams::new(ing, n_bar, 0.0).unwrap()
    }

    /// Cost of a schedule and input sequence by direct simulation.
    fn simulate_cost(
        xi0: &OverallState,
        schedule: &[bool],
        v: &DVector<f64>,
        phase: usize,
        params: &OcpParams,
        p: &presets::Preset,
    ) -> f64 {
        let m = p.plant.m();
        let mut xi = xi0.clone();
        let mut cost = 0.0;
        let mut slot = 0;
        for &g in schedule {
            let pi = if g {
                slot += 1;
                OverallInput::transmit(v.rows((slot - 1) * m, m).into_owned())
            } else {
                OverallInput::hold(m)
            };
            cost += stage_cost(&xi, &pi, &p.plant);
            xi = overall_step(&xi, &pi, &p.plant, &p.spec).unwrap();
        }
        let b = p.spec.b() as f64;
        cost + params.ingredients.terminal_cost(&xi.plant_part(), phase)
            + params.sigma_bucket * (b * b - (xi.beta as f64).powi(2))
    }

    #[test]
    fn horizon_examples() {
        let p = presets::two_mass_spring();
        let v1 = params(&p, Variant::CyclicHorizon, 8);
        assert_eq!(horizon_at(&v1, 0), 8);
        assert_eq!(horizon_at(&v1, 5), 3);
        assert_eq!(horizon_at(&v1, 6), 8);
        let v2 = params(&p, Variant::PeriodicTerminal, 4);
        assert!((0..20).all(|k| horizon_at(&v2, k) == 4));
        assert_eq!(terminal_phase(&v2, 3), 1);
        let ing = variant1_ingredients(&p.plant, &p.spec).unwrap();
        assert!(OcpParams::new(ing, 5, 0.0).is_err());
    }

    #[test]
    fn enumeration_examples() {
        let spec = TokenBucketSpec::new(3, 8, 22).unwrap();
        let got = enumerate_schedules(6, 3, &spec, 5);
        let expect: Vec<Vec<bool>> = vec![
            vec![false, false, false],
            vec![false, false, true],
            vec![false, true, false],
            vec![true, false, false],
        ];
        assert_eq!(got, expect);
        assert_eq!(got, brute_force(6, 3, &spec, 5));
        let spec = TokenBucketSpec::new(1, 6, 22).unwrap();
        assert_eq!(enumerate_schedules(0, 1, &spec, 0), vec![vec![false]]);
        let spec = TokenBucketSpec::new(4, 4, 9).unwrap();
        assert_eq!(enumerate_schedules(9, 2, &spec, 0).len(), 4);
    }

    proptest! {
        #[test]
        fn pruning_matches_brute_force(
            g in 1i64..5, extra in 0i64..6, cap in 0i64..10, beta_frac in 0.0f64..=1.0,
            n in 0usize..9, floor_frac in 0.0f64..=1.0,
        ) {
            let c = g + extra;
            let spec = TokenBucketSpec::new(g, c, c + cap).unwrap();
            let beta0 = (beta_frac * spec.b() as f64).round() as i64;
            let floor = (floor_frac * spec.b() as f64).round() as i64;
            prop_assert_eq!(enumerate_schedules(beta0, n, &spec, floor), brute_force(beta0, n, &spec, floor));
        }
    }

    #[test]
    fn condensed_objective_matches_simulation() {
        let p = presets::batch_reactor();
        let mut prm = params(&p, Variant::PeriodicTerminal, 4);
        prm.sigma_bucket = 1e-3;
        let xi0 = OverallState::new(p.x0.clone(), DVector::from_column_slice(&[0.3, -0.2]), 14);
        for s in enumerate_schedules(14, 4, &p.spec, prm.ingredients.floor(1)) {
            let cond = condense(&xi0, &s, 1, &prm, &p.plant, &p.spec).unwrap();
            let d = cond.qp.dim();
            for t in 0..3 {
                let v = DVector::from_fn(d, |i, _| ((i + 3 * t) as f64 * 0.7).sin());
                let direct = simulate_cost(&xi0, &s, &v, 1, &prm, &p);
                let via_qp = cond.qp.objective(&v) + cond.constant;
                assert!(
                    (direct - via_qp).abs() <= 1e-9 * direct.abs().max(1.0),
                    "{direct} {via_qp}"
                );
            }
        }
    }

    #[test]
    fn single_transmission_hessian() {
        // N = 1 with gamma = 1: H = 2 (R + [B; I]' P [B; I]).
        let p = presets::two_mass_spring();
        let prm = params(&p, Variant::PeriodicTerminal, 1);
        let xi0 = OverallState::new(p.x0.clone(), DVector::zeros(1), 22);
        let phase = 1;
        let cond = condense(&xi0, &[true], phase, &prm, &p.plant, &p.spec).unwrap();
        let bi = crate::linalg::stack(&p.plant.b().column(0).into_owned(), &DVector::from_element(1, 1.0));
        let expect = 2.0 * (p.plant.r()[(0, 0)] + bi.dot(&(prm.ingredients.weight(phase) * &bi)));
        assert!((cond.qp.hessian[(0, 0)] - expect).abs() <= 1e-9 * expect);
    }

    #[test]
    fn all_hold_schedule_is_constant() {
        let p = presets::two_mass_spring();
        let prm = params(&p, Variant::CyclicHorizon, 6);
        let xi0 = OverallState::new(p.x0.clone(), DVector::zeros(1), 5);
        let s = vec![false; 6];
        let cond = condense(&xi0, &s, 0, &prm, &p.plant, &p.spec).unwrap();
        assert_eq!(cond.qp.dim(), 0);
        let direct = simulate_cost(&xi0, &s, &DVector::zeros(0), 0, &prm, &p);
        assert!((cond.constant - direct).abs() <= 1e-9 * direct);
    }

    #[test]
    fn origin_is_optimal_at_origin() {
        let p = presets::two_mass_spring();
        let prm = params(&p, Variant::CyclicHorizon, 6);
        let xi0 = OverallState::new(DVector::zeros(4), DVector::zeros(1), 10);
        let sol = solve_ocp(&xi0, 0, &prm, &p.plant, &p.spec).unwrap();
        assert!(sol.feasible);
        assert_eq!(sol.value, 0.0);
        assert!(sol.schedule.iter().all(|&g| !g));
    }

    #[test]
    fn batch_reactor_transmits_immediately() {
        let p = presets::batch_reactor();
        let prm = params(&p, Variant::CyclicHorizon, 3);
        let xi0 = OverallState::new(p.x0.clone(), p.u0.clone(), 6);
        let sol = solve_ocp(&xi0, 0, &prm, &p.plant, &p.spec).unwrap();
        assert!(sol.schedule[0]);
        assert_eq!(sol.states.len(), 4);
        assert!(sol.states.last().unwrap().beta >= 5);
    }

    #[test]
    fn periodic_schedule_bounds_value() {
        // With N = rM and beta0 >= c - g the periodic schedule with the terminal
        // gain is feasible and costs x0' P_x x0.
        for p in [presets::two_mass_spring(), presets::batch_reactor()] {
            let period = crate::model::base_period(&p.spec);
            let prm = params(&p, Variant::CyclicHorizon, 2 * period);
            let xi0 = OverallState::new(p.x0.clone(), p.u0.clone(), p.spec.transmit_threshold());
            let sol = solve_ocp(&xi0, 0, &prm, &p.plant, &p.spec).unwrap();
            let bound = p.x0.dot(&(&prm.ingredients.p_x * &p.x0));
            let periodic: Vec<bool> = (0..2 * period).map(|i| i % period == 0).collect();
            let (witness, _) = solve_schedule(&xi0, &periodic, 0, &prm, &p.plant, &p.spec)
                .unwrap()
                .unwrap();
            assert!(witness <= bound * (1.0 + 1e-9));
            assert!(sol.value <= witness * (1.0 + 1e-12));
        }
    }

    #[test]
    fn more_tokens_never_hurt() {
        let p = presets::batch_reactor();
        let prm = params(&p, Variant::PeriodicTerminal, 4);
        let mut last = f64::INFINITY;
        for beta0 in 0..=22 {
            let xi0 = OverallState::new(p.x0.clone(), p.u0.clone(), beta0);
            let sol = solve_ocp(&xi0, 0, &prm, &p.plant, &p.spec).unwrap();
            if sol.feasible {
                assert!(sol.value <= last * (1.0 + 1e-9));
                last = sol.value;
            } else {
                assert!(last.is_infinite());
            }
        }
        // Larger capacity at the same level.
        let mut last = f64::INFINITY;
        let ing = variant2_ingredients(&p.plant, &p.spec).unwrap();
        for b in 8..30 {
            let spec = TokenBucketSpec::new(3, 8, b).unwrap();
            let prm = OcpParams::new(ing.clone(), 4, 0.0).unwrap();
            let xi0 = OverallState::new(p.x0.clone(), p.u0.clone(), 8);
            let v = solve_ocp(&xi0, 0, &prm, &p.plant, &spec).unwrap().value;
            assert!(v <= last * (1.0 + 1e-9));
            last = v;
        }
    }

    #[test]
    fn repeated_solves_agree() {
        let p = presets::two_mass_spring();
        let prm = params(&p, Variant::CyclicHorizon, 8);
        let xi0 = OverallState::new(p.x0.clone(), p.u0.clone(), 22);
        let a = solve_ocp(&xi0, 0, &prm, &p.plant, &p.spec).unwrap();
        let b = solve_ocp(&xi0, 0, &prm.clone().sequential(), &p.plant, &p.spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constrained_solution_respects_boxes() {
        let p = presets::two_mass_spring_constrained();
        let prm = params(&p, Variant::CyclicHorizon, 8);
        let xi0 = OverallState::new(p.x0.clone(), p.u0.clone(), p.beta0);
        let sol = solve_ocp(&xi0, 0, &prm, &p.plant, &p.spec).unwrap();
        assert!(sol.feasible);
        let xb = p.plant.state_box().unwrap();
        let ub = p.plant.input_box().unwrap();
        for xi in &sol.states {
            assert!(xb.contains(&xi.x.map(|v| v * (1.0 - 1e-7))));
            assert!(ub.contains(&xi.u.map(|v| v * (1.0 - 1e-7))));
        }
        let last = sol.states.last().unwrap();
        let alpha = prm.ingredients.radius(0).unwrap();
        assert!(last.x.dot(&(&prm.ingredients.p_x * &last.x)) <= alpha * (1.0 + 1e-7));
    }

    #[test]
    fn bounded_search_matches_exhaustive_solves() {
        let p = presets::two_mass_spring_constrained();
        let mut feasible = 0;
        for (variant, n_bar) in [
            (Variant::CyclicHorizon, 8),
            (Variant::CyclicHorizon, 10),
            (Variant::PeriodicTerminal, 9),
        ] {
            let prm = params(&p, variant, n_bar);
            for (beta0, scale) in [(22, 1.0), (14, 0.7), (9, 0.4)] {
                let xi0 = OverallState::new(&p.x0 * scale, p.u0.clone(), beta0);
                let sol = solve_ocp(&xi0, 0, &prm, &p.plant, &p.spec).unwrap();
                let phase = terminal_phase(&prm, 0);
                let schedules = enumerate_schedules(beta0, horizon_at(&prm, 0), &p.spec, prm.ingredients.floor(phase));
                let exhaustive = schedules
                    .iter()
                    .filter_map(|s| solve_schedule(&xi0, s, phase, &prm, &p.plant, &p.spec).unwrap())
                    .map(|(v, _)| v)
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(
                    sol.feasible,
                    exhaustive.is_finite(),
                    "{variant:?} N={n_bar} beta0={beta0}"
                );
                if sol.feasible {
                    feasible += 1;
                    assert!(
                        (sol.value - exhaustive).abs() <= 1e-9 * exhaustive.abs().max(1.0),
                        "{variant:?} N={n_bar} beta0={beta0}: {} vs {exhaustive}",
                        sol.value
                    );
                }
            }
        }
        assert!(feasible >= 6, "only {feasible} feasible instances");
    }
}
