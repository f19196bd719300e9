//! Built-in plants used by the experiment presets.
//!
//! Both plants are zero-order-hold discretizations with a 0.1 s sampling time.
//! The matrices are kept at full double precision: the four-digit roundings
//! usually quoted for these systems shift the baseline costs by several tenths
//! of a percent.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::linalg::from_rows;
use crate::model::{BoxBounds, PlantModel, TokenBucketSpec};

/// Plant, traffic contract and initial condition of a reference experiment.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub plant: PlantModel,
    pub spec: TokenBucketSpec,
    pub x0: DVector<f64>,
    pub u0: DVector<f64>,
    pub beta0: i64,
}

pub const SAMPLING_TIME: f64 = 0.1;

/// Two unit masses coupled by a spring with natural frequency 2*pi rad/s,
/// force input on the first mass. State is (p1, p2, v1, v2).
pub fn two_mass_spring_matrices() -> (DMatrix<f64>, DMatrix<f64>) {
    let w = 2.0 * PI;
    let h = SAMPLING_TIME;
    let (s, c) = (w * h).sin_cos();
    let sum = 0.5 * (1.0 + c);
    let diff = 0.5 * (1.0 - c);
    let vp = 0.5 * (h + s / w);
    let vm = 0.5 * (h - s / w);
    let k = 0.5 * w * s;
    let a = from_rows(&[
        &[sum, diff, vp, vm],
        &[diff, sum, vm, vp],
        &[-k, k, sum, diff],
        &[k, -k, diff, sum],
    ]);
    let q0 = 0.5 * h * h / 2.0;
    let q1 = 0.5 * (1.0 - c) / (w * w);
    let b = from_rows(&[&[q0 + q1], &[q0 - q1], &[vp], &[vm]]);
    (a, b)
}

pub fn two_mass_spring() -> Preset {
    let (a, b) = two_mass_spring_matrices();
    let plant = PlantModel::new(a, b, DMatrix::identity(4, 4) * 10.0, DMatrix::identity(1, 1))
        .expect("two-mass-spring preset is valid");
    Preset {
        name: "two_mass_spring",
        plant,
        spec: TokenBucketSpec::new(1, 6, 22).expect("valid bucket"),
        x0: DVector::from_column_slice(&[1.0, 0.0, 1.0, 0.0]),
        u0: DVector::zeros(1),
        beta0: 5,
    }
}

/// Two-mass-spring with `X = [-2,2]^2 x [-5,5]^2`, `U = [-12,12]` and a full bucket.
pub fn two_mass_spring_constrained() -> Preset {
    let mut p = two_mass_spring();
    p.name = "two_mass_spring_constrained";
    p.plant = p
        .plant
        .with_state_box(BoxBounds::symmetric(&[2.0, 2.0, 5.0, 5.0]).expect("valid box"))
        .and_then(|pl| pl.with_input_box(BoxBounds::symmetric(&[12.0]).expect("valid box")))
        .expect("constrained preset is valid");
    p.beta0 = 22;
    p
}

/// Continuous-time linearized batch reactor.
pub fn batch_reactor_continuous() -> (DMatrix<f64>, DMatrix<f64>) {
    let a = from_rows(&[
        &[1.38, -0.2077, 6.715, -5.676],
        &[-0.5814, -4.29, 0.0, 0.675],
        &[1.067, 4.273, -6.654, 5.893],
        &[0.048, 4.273, 1.343, -2.104],
    ]);
    let b = from_rows(&[&[0.0, 0.0], &[5.679, 0.0], &[1.136, -3.146], &[1.136, 0.0]]);
    (a, b)
}

/// Zero-order-hold discretization of [`batch_reactor_continuous`].
pub fn batch_reactor_matrices() -> (DMatrix<f64>, DMatrix<f64>) {
    let a = from_rows(&[
        &[
            1.1781956669019868,
            0.0014504816993991473,
            0.5115685303852373,
            -0.403314369997985,
        ],
        &[
            -0.051457067585263416,
            0.661912764278061,
            -0.011027349629759311,
            0.06129026342542979,
        ],
        &[
            0.07616243391583097,
            0.3350829739815688,
            0.5606152646467325,
            0.3823533033694085,
        ],
        &[
            -0.0006206563458157618,
            0.3352657387353923,
            0.08929364894227619,
            0.8494382240957568,
        ],
    ]);
    let b = from_rows(&[
        &[0.004486136235018804, -0.08757797168480458],
        &[0.46715971769872316, 0.0012453826508993196],
        &[0.21317319867509293, -0.2352633063115203],
        &[0.21307361028378144, -0.016123109970317778],
    ]);
    (a, b)
}

pub fn batch_reactor() -> Preset {
    let (a, b) = batch_reactor_matrices();
    let plant = PlantModel::new(a, b, DMatrix::identity(4, 4) * 10.0, DMatrix::identity(2, 2))
        .expect("batch reactor preset is valid");
    Preset {
        name: "batch_reactor",
        plant,
        spec: TokenBucketSpec::new(3, 8, 22).expect("valid bucket"),
        x0: DVector::from_column_slice(&[1.0, 0.0, 1.0, 0.0]),
        u0: DVector::zeros(2),
        beta0: 6,
    }
}

/// Looks a preset up by name.
pub fn by_name(name: &str) -> Option<Preset> {
    match name {
        "two_mass_spring" => Some(two_mass_spring()),
        "two_mass_spring_constrained" => Some(two_mass_spring_constrained()),
        "batch_reactor" => Some(batch_reactor()),
        _ => None,
    }
}

pub const PRESET_NAMES: [&str; 3] = ["two_mass_spring", "two_mass_spring_constrained", "batch_reactor"];
