//! Closed-loop decision laws: rollout ETC and the two baselines.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{OverallInput, OverallState, PlantModel, TokenBucketSpec};
use crate::ocp::{solve_ocp, OcpParams, OcpSolution};

#[derive(Debug, Clone, PartialEq)]
pub enum ControllerKind {
    /// Apply the first element of the OCP solution at every step.
    Rollout(OcpParams),
    /// Transmit `K_x x` every `period` steps, starting at k = 0.
    Ttc { gain: DMatrix<f64>, period: usize },
    /// Transmit `K_x x` when `|x(k') - x(k)|^2 > sigma |x(k)|^2`.
    Etc { gain: DMatrix<f64>, sigma_trigger: f64 },
}

impl ControllerKind {
    pub fn label(&self) -> &'static str {
        match self {
            ControllerKind::Rollout(_) => "rollout",
            ControllerKind::Ttc { .. } => "ttc",
            ControllerKind::Etc { .. } => "etc",
        }
    }

    /// Whether the controller guarantees bucket feasibility itself.
    pub fn respects_bucket(&self) -> bool {
        !matches!(self, ControllerKind::Etc { .. })
    }
}

/// Rollout law: first input of the optimal OCP solution.
pub fn rollout_step(
    xi: &OverallState,
    k: usize,
    params: &OcpParams,
    plant: &PlantModel,
    spec: &TokenBucketSpec,
) -> Result<(OverallInput, OcpSolution)> {
    let sol = solve_ocp(xi, k, params, plant, spec)?;
    if !sol.feasible {
        return Err(Error::OcpInfeasible { step: k });
    }
    Ok((sol.inputs[0].clone(), sol))
}

pub fn ttc_step(
    xi: &OverallState,
    k: usize,
    gain: &DMatrix<f64>,
    period: usize,
    spec: &TokenBucketSpec,
) -> Result<OverallInput> {
    if k % period != 0 {
        return Ok(OverallInput::hold(gain.nrows()));
    }
    if xi.beta + spec.g() - spec.c() < 0 {
        return Err(Error::InfeasibleTransmission {
            beta: xi.beta,
            refill: spec.g(),
            cost: spec.c(),
        });
    }
    Ok(OverallInput::transmit(gain * &xi.x))
}

/// Classical trigger; `memory` holds the last transmitted state.
pub fn etc_step(
    xi: &OverallState,
    gain: &DMatrix<f64>,
    sigma_trigger: f64,
    memory: &mut Option<DVector<f64>>,
) -> OverallInput {
    let fire = match memory {
        None => true,
        Some(last) => (&*last - &xi.x).norm_squared() > sigma_trigger * xi.x.norm_squared(),
    };
    if fire {
        *memory = Some(xi.x.clone());
        OverallInput::transmit(gain * &xi.x)
    } else {
        OverallInput::hold(gain.nrows())
    }
}

/// A controller together with its memory.
#[derive(Debug, Clone)]
pub struct Controller {
    kind: ControllerKind,
    last_sent: Option<DVector<f64>>,
}

/// Decision of one step.
#[derive(Debug, Clone)]
pub struct Decision {
    pub input: OverallInput,
    pub ocp: Option<OcpSolution>,
}

impl Controller {
    pub fn new(kind: ControllerKind) -> Result<Self> {
        match &kind {
            ControllerKind::Ttc { period, .. } if *period == 0 => {
                return Err(Error::InvalidParameter("TTC period must be positive".into()))
            }
            ControllerKind::Etc { sigma_trigger, .. } if !(0.0..=1.0).contains(sigma_trigger) => {
                return Err(Error::InvalidParameter(format!(
                    "trigger parameter must lie in [0, 1], got {sigma_trigger}"
                )))
            }
            _ => {}
        }
        Ok(Controller { kind, last_sent: None })
    }

    pub fn kind(&self) -> &ControllerKind {
        &self.kind
    }

    pub fn step(
        &mut self,
        xi: &OverallState,
        k: usize,
        plant: &PlantModel,
        spec: &TokenBucketSpec,
    ) -> Result<Decision> {
        match &self.kind {
            ControllerKind::Rollout(params) => {
                let (input, sol) = rollout_step(xi, k, params, plant, spec)?;
                Ok(Decision { input, ocp: Some(sol) })
            }
            ControllerKind::Ttc { gain, period } => Ok(Decision {
                input: ttc_step(xi, k, gain, *period, spec)?,
                ocp: None,
            }),
            ControllerKind::Etc { gain, sigma_trigger } => Ok(Decision {
                input: etc_step(xi, gain, *sigma_trigger, &mut self.last_sent),
                ocp: None,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::terminal::variant1_ingredients;

    #[test]
    fn rollout_at_origin_holds() {
        let p = presets::two_mass_spring();
        let ing = variant1_ingredients(&p.plant, &p.spec).unwrap();
        let prm = OcpParams::new(ing, 6, 0.0).unwrap();
        let xi = OverallState::new(DVector::zeros(4), DVector::zeros(1), 5);
        let (pi, _) = rollout_step(&xi, 0, &prm, &p.plant, &p.spec).unwrap();
        assert!(!pi.gamma());
        assert_eq!(pi.v(), &DVector::zeros(1));
    }

    #[test]
    fn rollout_waits_with_few_tokens() {
        let p = presets::two_mass_spring();
        let ing = variant1_ingredients(&p.plant, &p.spec).unwrap();
        let prm = OcpParams::new(ing, 8, 0.0).unwrap();
        let xi = OverallState::new(p.x0.clone(), p.u0.clone(), 5);
        let (pi, _) = rollout_step(&xi, 0, &prm, &p.plant, &p.spec).unwrap();
        assert!(!pi.gamma());
    }

    #[test]
    fn rollout_spends_two_tokens_batches_early() {
        let p = presets::batch_reactor();
        let ing = variant1_ingredients(&p.plant, &p.spec).unwrap();
        let prm = OcpParams::new(ing, 3, 0.0).unwrap();
        let mut xi = OverallState::new(p.x0.clone(), p.u0.clone(), 14);
        for k in 0..2 {
            let (pi, _) = rollout_step(&xi, k, &prm, &p.plant, &p.spec).unwrap();
            assert!(pi.gamma(), "step {k}");
            xi = crate::model::overall_step(&xi, &pi, &p.plant, &p.spec).unwrap();
        }
        assert_eq!(xi.beta, 4);
    }

    #[test]
    fn ttc_phases() {
        let spec = TokenBucketSpec::new(1, 6, 22).unwrap();
        let gain = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let xi = OverallState::new(DVector::from_column_slice(&[1.0, 1.0]), DVector::zeros(1), 5);
        let pi = ttc_step(&xi, 0, &gain, 6, &spec).unwrap();
        assert!(pi.gamma());
        assert_eq!(pi.v()[0], 3.0);
        for k in 1..6 {
            assert!(!ttc_step(&xi, k, &gain, 6, &spec).unwrap().gamma());
        }
        let zero = OverallState::new(DVector::zeros(2), DVector::zeros(1), 5);
        assert_eq!(ttc_step(&zero, 6, &gain, 6, &spec).unwrap().v()[0], 0.0);
        let poor = OverallState::new(DVector::zeros(2), DVector::zeros(1), 4);
        assert!(matches!(
            ttc_step(&poor, 0, &gain, 6, &spec),
            Err(Error::InfeasibleTransmission { .. })
        ));
    }

    #[test]
    fn etc_trigger_rules() {
        let gain = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let x = DVector::from_column_slice(&[1.0, 2.0]);
        let xi = OverallState::new(x.clone(), DVector::zeros(1), 0);
        let mut mem = None;
        assert!(etc_step(&xi, &gain, 0.5, &mut mem).gamma());
        assert_eq!(mem.as_ref(), Some(&x));
        assert!(!etc_step(&xi, &gain, 0.5, &mut mem).gamma());
        assert!(!etc_step(&xi, &gain, 0.0, &mut mem).gamma());
        let moved = OverallState::new(DVector::from_column_slice(&[1.0, 2.001]), DVector::zeros(1), 0);
        assert!(etc_step(&moved, &gain, 0.0, &mut mem).gamma());
        assert!(Controller::new(ControllerKind::Etc {
            gain,
            sigma_trigger: 1.5
        })
        .is_err());
    }
}
