//! Plant, token bucket and the composite networked-control dynamics.
//!
//! The overall state is `xi = (x, u, beta)`: plant state, input currently held
//! by the zero-order-hold actuator, and the integer token-bucket level. The
//! overall input is `pi = (v, gamma)`: a control update and the binary decision
//! whether to transmit it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{min_sym_eigenvalue, symmetrize};

/// Per-coordinate interval constraint `lower <= z <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxBounds {
    /// Validates that the box strictly contains the origin.
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension(format!(
                "box lower has {} entries, upper has {}",
                lower.len(),
                upper.len()
            )));
        }
        for i in 0..lower.len() {
            if !(lower[i] < 0.0 && upper[i] > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "box coordinate {i} is [{}, {}], which does not contain the origin strictly",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric box `[-radius_i, radius_i]`.
    pub fn symmetric(radius: &[f64]) -> Result<Self> {
        let upper = DVector::from_column_slice(radius);
        Self::new(-upper.clone(), upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, z: &DVector<f64>) -> bool {
        z.len() == self.dim()
            && z.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    /// Largest symmetric half-width `min(-lower_i, upper_i)` of coordinate `i`.
    pub fn half_width(&self, i: usize) -> f64 {
        (-self.lower[i]).min(self.upper[i])
    }
}

/// Discrete-time LTI plant `x+ = A x + B u` with quadratic weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    state_box: Option<BoxBounds>,
    input_box: Option<BoxBounds>,
}

impl PlantModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        if n == 0 || m == 0 {
            return Err(Error::Dimension("plant needs n >= 1 and m >= 1".into()));
        }
        if a.ncols() != n {
            return Err(Error::Dimension(format!("A is {}x{}, expected square", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!("B has {} rows, expected {n}", b.nrows())));
        }
        if q.shape() != (n, n) {
            return Err(Error::Dimension(format!("Q is {:?}, expected ({n}, {n})", q.shape())));
        }
        if r.shape() != (m, m) {
            return Err(Error::Dimension(format!("R is {:?}, expected ({m}, {m})", r.shape())));
        }
        check_spd(&q, "Q")?;
        check_spd(&r, "R")?;
        Ok(Self {
            a,
            b,
            q: symmetrize(&q),
            r: symmetrize(&r),
            state_box: None,
            input_box: None,
        })
    }

    pub fn with_state_box(mut self, bounds: BoxBounds) -> Result<Self> {
        if bounds.dim() != self.n() {
            return Err(Error::Dimension(format!(
                "state box has {} coordinates, plant has {}",
                bounds.dim(),
                self.n()
            )));
        }
        self.state_box = Some(bounds);
        Ok(self)
    }

    pub fn with_input_box(mut self, bounds: BoxBounds) -> Result<Self> {
        if bounds.dim() != self.m() {
            return Err(Error::Dimension(format!(
                "input box has {} coordinates, plant has {}",
                bounds.dim(),
                self.m()
            )));
        }
        self.input_box = Some(bounds);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn state_box(&self) -> Option<&BoxBounds> {
        self.state_box.as_ref()
    }

    pub fn input_box(&self) -> Option<&BoxBounds> {
        self.input_box.as_ref()
    }

    /// True when either the state or the input is box constrained.
    pub fn is_constrained(&self) -> bool {
        self.state_box.is_some() || self.input_box.is_some()
    }
}

fn check_spd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if (m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
        return Err(Error::InvalidModel(format!("{name} is not symmetric")));
    }
    let lo = min_sym_eigenvalue(m);
    if !(lo > 0.0) {
        return Err(Error::InvalidModel(format!(
            "{name} is not positive definite (smallest eigenvalue {lo:e})"
        )));
    }
    Ok(())
}

/// Token-bucket traffic specification: `g` tokens arrive per step, a
/// transmission costs `c` tokens, the bucket holds at most `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenBucketSpec {
    g: i64,
    c: i64,
    b: i64,
}

impl TokenBucketSpec {
    pub fn new(g: i64, c: i64, b: i64) -> Result<Self> {
        if !(1 <= g && g <= c && c <= b) {
            return Err(Error::InvalidParameter(format!(
                "token bucket needs 1 <= g <= c <= b, got g={g}, c={c}, b={b}"
            )));
        }
        Ok(Self { g, c, b })
    }

    pub fn g(&self) -> i64 {
        self.g
    }

    pub fn c(&self) -> i64 {
        self.c
    }

    pub fn b(&self) -> i64 {
        self.b
    }

    /// Long-run admissible transmission frequency `g / c`.
    pub fn sustainable_rate(&self) -> f64 {
        self.g as f64 / self.c as f64
    }

    /// Bucket level needed before a transmission, `c - g`.
    pub fn transmit_threshold(&self) -> i64 {
        self.c - self.g
    }
}

/// Guaranteed spacing between admissible transmissions, `ceil(c / g)`.
pub fn base_period(spec: &TokenBucketSpec) -> usize {
    ((spec.c + spec.g - 1) / spec.g) as usize
}

/// Saturating bucket update `min(beta + g - gamma c, b)`.
pub fn bucket_step(beta: i64, gamma: bool, spec: &TokenBucketSpec) -> Result<i64> {
    let next = bucket_step_unchecked(beta, gamma, spec);
    if next < 0 {
        return Err(Error::InfeasibleTransmission {
            beta,
            refill: spec.g,
            cost: spec.c,
        });
    }
    Ok(next)
}

/// Bucket update without the feasibility check. Used for bookkeeping of
/// baselines that are allowed to overdraw the bucket.
pub fn bucket_step_unchecked(beta: i64, gamma: bool, spec: &TokenBucketSpec) -> i64 {
    let spend = if gamma { spec.c } else { 0 };
    (beta + spec.g - spend).min(spec.b)
}

/// Composite state `(x, u, beta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverallState {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub beta: i64,
}

impl OverallState {
    pub fn new(x: DVector<f64>, u: DVector<f64>, beta: i64) -> Self {
        Self { x, u, beta }
    }

    /// `[x; u]`.
    pub fn plant_part(&self) -> DVector<f64> {
        crate::linalg::stack(&self.x, &self.u)
    }

    /// `max(|x|_inf, |u|_inf)`.
    pub fn plant_norm_inf(&self) -> f64 {
        crate::linalg::max_abs_vec(&self.x).max(crate::linalg::max_abs_vec(&self.u))
    }
}

/// Composite input `(v, gamma)`. `v` is stored as zero whenever `gamma` is
/// false so that traces compare exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct OverallInput {
    v: DVector<f64>,
    gamma: bool,
}

impl OverallInput {
    pub fn hold(m: usize) -> Self {
        Self {
            v: DVector::zeros(m),
            gamma: false,
        }
    }

    pub fn transmit(v: DVector<f64>) -> Self {
        Self { v, gamma: true }
    }

    pub fn v(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn gamma(&self) -> bool {
        self.gamma
    }

    /// Input the actuator applies given the currently held input.
    pub fn applied<'a>(&'a self, held: &'a DVector<f64>) -> &'a DVector<f64> {
        if self.gamma {
            &self.v
        } else {
            held
        }
    }
}

/// One step of the overall dynamics.
pub fn overall_step(
    xi: &OverallState,
    pi: &OverallInput,
    plant: &PlantModel,
    spec: &TokenBucketSpec,
) -> Result<OverallState> {
    let beta = bucket_step(xi.beta, pi.gamma, spec)?;
    Ok(plant_step(xi, pi, plant, beta))
}

/// Overall step with unchecked bucket bookkeeping (level may go negative).
pub fn overall_step_unchecked(
    xi: &OverallState,
    pi: &OverallInput,
    plant: &PlantModel,
    spec: &TokenBucketSpec,
) -> OverallState {
    let beta = bucket_step_unchecked(xi.beta, pi.gamma, spec);
    plant_step(xi, pi, plant, beta)
}

fn plant_step(xi: &OverallState, pi: &OverallInput, plant: &PlantModel, beta: i64) -> OverallState {
    let u = pi.applied(&xi.u).clone();
    let x = plant.a() * &xi.x + plant.b() * &u;
    OverallState { x, u, beta }
}

/// Stage cost `x'Qx + (1-gamma) u'Ru + gamma v'Rv`.
pub fn stage_cost(xi: &OverallState, pi: &OverallInput, plant: &PlantModel) -> f64 {
    let u = pi.applied(&xi.u);
    xi.x.dot(&(plant.q() * &xi.x)) + u.dot(&(plant.r() * u))
}

/// Membership in `X x U x {0..b}`.
pub fn in_constraint_set(xi: &OverallState, plant: &PlantModel, spec: &TokenBucketSpec) -> bool {
    let x_ok = plant.state_box().map_or(true, |bx| bx.contains(&xi.x));
    let u_ok = plant.input_box().map_or(true, |bx| bx.contains(&xi.u));
    x_ok && u_ok && (0..=spec.b()).contains(&xi.beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn base_period_examples() {
        assert_eq!(base_period(&TokenBucketSpec::new(1, 6, 22).unwrap()), 6);
        assert_eq!(base_period(&TokenBucketSpec::new(3, 8, 22).unwrap()), 3);
        assert_eq!(base_period(&TokenBucketSpec::new(4, 4, 10).unwrap()), 1);
    }

    #[test]
    fn bucket_step_examples() {
        let s1 = TokenBucketSpec::new(1, 6, 22).unwrap();
        let s2 = TokenBucketSpec::new(3, 8, 22).unwrap();
        assert_eq!(bucket_step(5, true, &s1).unwrap(), 0);
        assert_eq!(bucket_step(22, false, &s2).unwrap(), 22);
        assert_eq!(bucket_step(6, true, &s2).unwrap(), 1);
        assert_eq!(
            bucket_step(4, true, &s1),
            Err(Error::InfeasibleTransmission {
                beta: 4,
                refill: 1,
                cost: 6
            })
        );
    }

    #[test]
    fn invalid_bucket_specs_rejected() {
        assert!(TokenBucketSpec::new(0, 1, 1).is_err());
        assert!(TokenBucketSpec::new(3, 2, 5).is_err());
        assert!(TokenBucketSpec::new(1, 6, 5).is_err());
    }

    #[test]
    fn hold_branch_keeps_input() {
        let p = presets::two_mass_spring();
        let xi = OverallState::new(dv(&[0.3, -0.1, 0.2, 0.0]), dv(&[0.7]), 3);
        let next = overall_step(&xi, &OverallInput::hold(1), &p.plant, &p.spec).unwrap();
        assert_eq!(next.u, xi.u);
        let expected = p.plant.a() * &xi.x + p.plant.b() * &xi.u;
        assert_eq!(next.x, expected);
        assert_eq!(next.beta, 4);
    }

    #[test]
    fn origin_is_fixed_under_zero_transmission() {
        let p = presets::batch_reactor();
        let xi = OverallState::new(DVector::zeros(4), DVector::zeros(2), 10);
        let next = overall_step(&xi, &OverallInput::transmit(DVector::zeros(2)), &p.plant, &p.spec).unwrap();
        assert_eq!(next.x, DVector::zeros(4));
        assert_eq!(next.u, DVector::zeros(2));
        assert_eq!(next.beta, 10 + 3 - 8);
    }

    #[test]
    fn hold_step_on_two_mass_spring_matches_column_sums() {
        let p = presets::two_mass_spring();
        let xi = OverallState::new(dv(&[1.0, 0.0, 1.0, 0.0]), dv(&[0.0]), 5);
        let next = overall_step(&xi, &OverallInput::hold(1), &p.plant, &p.spec).unwrap();
        let a = p.plant.a();
        for i in 0..4 {
            let oracle = a[(i, 0)] + a[(i, 2)];
            assert!((next.x[i] - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn stage_cost_examples() {
        let p = presets::two_mass_spring();
        let zero = OverallState::new(DVector::zeros(4), DVector::zeros(1), 0);
        assert_eq!(stage_cost(&zero, &OverallInput::hold(1), &p.plant), 0.0);
        assert_eq!(stage_cost(&zero, &OverallInput::transmit(dv(&[0.0])), &p.plant), 0.0);

        let xi = OverallState::new(dv(&[1.0, 0.0, 1.0, 0.0]), dv(&[0.0]), 0);
        assert!((stage_cost(&xi, &OverallInput::hold(1), &p.plant) - 20.0).abs() < 1e-12);

        let xi = OverallState::new(dv(&[0.1, 0.2, 0.0, 0.0]), dv(&[1.5]), 0);
        let hold = stage_cost(&xi, &OverallInput::hold(1), &p.plant);
        let same = stage_cost(&xi, &OverallInput::transmit(dv(&[1.5])), &p.plant);
        assert_eq!(hold, same);
    }

    #[test]
    fn constraint_set_membership() {
        let free = presets::two_mass_spring();
        let xi = OverallState::new(dv(&[100.0, 0.0, 0.0, 0.0]), dv(&[1e3]), 0);
        assert!(in_constraint_set(&xi, &free.plant, &free.spec));

        let boxed = presets::two_mass_spring_constrained();
        let xi = OverallState::new(dv(&[3.0, 0.0, 0.0, 0.0]), dv(&[0.0]), 0);
        assert!(!in_constraint_set(&xi, &boxed.plant, &boxed.spec));
        let xi = OverallState::new(dv(&[1.9, -2.0, 4.9, -5.0]), dv(&[12.0]), 22);
        assert!(in_constraint_set(&xi, &boxed.plant, &boxed.spec));

        let xi = OverallState::new(DVector::zeros(4), DVector::zeros(1), -1);
        assert!(!in_constraint_set(&xi, &free.plant, &free.spec));
    }

    #[test]
    fn invalid_plants_rejected() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::from_element(2, 1, 1.0);
        let r = DMatrix::identity(1, 1);
        assert!(PlantModel::new(i2.clone(), b.clone(), i2.clone() * 0.0, r.clone()).is_err());
        assert!(PlantModel::new(i2.clone(), b.clone(), i2.clone(), -r.clone()).is_err());
        assert!(PlantModel::new(i2.clone(), DMatrix::zeros(3, 1), i2.clone(), r.clone()).is_err());
        let p = PlantModel::new(i2.clone(), b, i2, r).unwrap();
        assert!(p.clone().with_state_box(BoxBounds::symmetric(&[1.0]).unwrap()).is_err());
        assert!(BoxBounds::new(dv(&[0.0]), dv(&[1.0])).is_err());
    }

    proptest! {
        #[test]
        fn bucket_level_stays_in_range(g in 1i64..5, extra_c in 0i64..10, extra_b in 0i64..20,
                                       beta_frac in 0.0f64..1.0, gamma: bool) {
            let c = g + extra_c;
            let b = c + extra_b;
            let spec = TokenBucketSpec::new(g, c, b).unwrap();
            let beta = ((b as f64) * beta_frac).floor() as i64;
            match bucket_step(beta, gamma, &spec) {
                Ok(next) => prop_assert!((0..=b).contains(&next)),
                Err(_) => prop_assert!(gamma && beta + g - c < 0),
            }
        }

        #[test]
        fn periodic_schedule_never_drains(g in 1i64..5, extra_c in 0i64..12, extra_b in 0i64..20,
                                          start in 0i64..40) {
            let c = g + extra_c;
            let b = c + extra_b;
            let spec = TokenBucketSpec::new(g, c, b).unwrap();
            let period = base_period(&spec);
            let mut beta = (c - g + start).min(b);
            for k in 0..10 * period {
                beta = bucket_step(beta, k % period == 0, &spec).unwrap();
            }
        }

        #[test]
        fn transmit_sets_input_exactly(v in -10.0f64..10.0, u in -10.0f64..10.0) {
            let p = presets::two_mass_spring();
            let xi = OverallState::new(DVector::from_element(4, 0.5), dv(&[u]), 22);
            let next = overall_step(&xi, &OverallInput::transmit(dv(&[v])), &p.plant, &p.spec).unwrap();
            prop_assert_eq!(next.u[0], v);
            let held = overall_step(&xi, &OverallInput::hold(1), &p.plant, &p.spec).unwrap();
            prop_assert_eq!(held.u[0], u);
        }

        #[test]
        fn stage_cost_nonnegative_and_zero_only_at_origin(
            x in proptest::collection::vec(-5.0f64..5.0, 4),
            u in -5.0f64..5.0, gamma: bool, v in -5.0f64..5.0,
        ) {
            let p = presets::two_mass_spring();
            let xi = OverallState::new(dv(&x), dv(&[u]), 0);
            let pi = if gamma { OverallInput::transmit(dv(&[v])) } else { OverallInput::hold(1) };
            let cost = stage_cost(&xi, &pi, &p.plant);
            prop_assert!(cost >= 0.0);
            let applied = if gamma { v } else { u };
            let at_origin = x.iter().all(|&c| c == 0.0) && applied == 0.0;
            prop_assert_eq!(cost == 0.0, at_origin);
        }
    }
}
