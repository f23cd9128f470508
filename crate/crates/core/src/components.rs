//! Hydraulic component laws: ramp characteristics, the quadratic pipe law,
//! valve resistance from a weighted basis of characteristics, and the model
//! presets A/B/C.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::Network;
use crate::scalar::{lit, Scalar};

/// Exponent on `|q|` in the pipe law `dp = s q |q|^GAMMA`.
pub const PIPE_FLOW_EXPONENT: f64 = 1.0;

/// Exponent on the characteristic in the valve law `dp = q^2 / (Kv k(v))^2`.
pub const VALVE_CHARACTERISTIC_EXPONENT: i32 = 2;

/// Deadband used by model preset C.
pub const MODEL_C_DELTA: f64 = 0.015;

pub const GRID_A: [f64; 4] = [0.10, 0.15, 0.20, 0.25];
pub const GRID_B: [f64; 5] = [0.80, 0.85, 0.90, 0.95, 1.0];
pub const GRID_C: [f64; 3] = [1.0, 1.25, 1.5];

#[derive(Debug, Error, PartialEq)]
pub enum ComponentError {
    #[error("ramp knees must satisfy 0 <= a < b <= 1 (got a={a}, b={b})")]
    Knees { a: f64, b: f64 },
    #[error("ramp exponent must be positive (got {0})")]
    Exponent(f64),
    #[error("set-point {0} outside [0, 1]")]
    Setpoint(f64),
    #[error("valve basis is empty")]
    EmptyBasis,
    #[error("valve basis entry {0} duplicates an earlier entry")]
    DuplicateBasis(usize),
    #[error("negative weight {value} at basis index {index}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("weight vector has length {found}, basis has {expected} entries")]
    WeightLength { expected: usize, found: usize },
    #[error("negative flow {0} through a consumer valve")]
    NegativeFlow(f64),
    #[error("closed valve (infinite resistance) carries flow {0}")]
    ClosedValveFlow(f64),
    #[error("unknown model preset {0:?}; expected A, B or C")]
    UnknownPreset(String),
    #[error("negative pipe resistance {value} on edge {edge}")]
    NegativeResistance { edge: String, value: f64 },
    #[error("model has {found} {what}, network needs {expected}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("deadband must be non-negative (got {0})")]
    Deadband(f64),
}

/// Quadratic resistance that may be infinite (a closed valve). Infinity is
/// carried as its own variant so closed valves never look like overflow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Resistance<T> {
    Finite(T),
    Infinite,
}

impl<T: Scalar> Resistance<T> {
    pub fn zero() -> Self {
        Resistance::Finite(T::zero())
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Resistance::Infinite)
    }

    pub fn finite(&self) -> Option<T> {
        match *self {
            Resistance::Finite(x) => Some(x),
            Resistance::Infinite => None,
        }
    }

    /// Float view, mapping the closed state to `T::infinity()`.
    pub fn to_float(&self) -> T {
        self.finite().unwrap_or_else(T::infinity)
    }

    /// Series connection.
    pub fn series(self, other: Self) -> Self {
        match (self, other) {
            (Resistance::Finite(a), Resistance::Finite(b)) => Resistance::Finite(a + b),
            _ => Resistance::Infinite,
        }
    }
}

impl<T: Scalar> fmt::Display for Resistance<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resistance::Finite(x) => write!(f, "{x}"),
            Resistance::Infinite => write!(f, "inf"),
        }
    }
}

/// One characteristic `k(v) = ramp_a^b(v)^c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampSpec<T> {
    a: T,
    b: T,
    c: T,
}

impl<T: Scalar> RampSpec<T> {
    pub fn new(a: T, b: T, c: T) -> Result<Self, ComponentError> {
        let (af, bf, cf) = (a.to_f64().unwrap(), b.to_f64().unwrap(), c.to_f64().unwrap());
        if !(af >= 0.0 && af < bf && bf <= 1.0) {
            return Err(ComponentError::Knees { a: af, b: bf });
        }
        if !(cf > 0.0 && cf.is_finite()) {
            return Err(ComponentError::Exponent(cf));
        }
        Ok(RampSpec { a, b, c })
    }

    /// The linear characteristic `k(v) = v`.
    pub fn linear() -> Self {
        RampSpec {
            a: T::zero(),
            b: T::one(),
            c: T::one(),
        }
    }

    pub fn a(&self) -> T {
        self.a
    }

    pub fn b(&self) -> T {
        self.b
    }

    pub fn c(&self) -> T {
        self.c
    }

    /// Characteristic value `k(v)` in `[0, 1]`.
    pub fn eval(&self, v: T) -> Result<T, ComponentError> {
        if !(v >= T::zero() && v <= T::one()) {
            return Err(ComponentError::Setpoint(v.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(self.eval_unchecked(v))
    }

    pub(crate) fn eval_unchecked(&self, v: T) -> T {
        if v <= self.a {
            T::zero()
        } else if v <= self.b {
            ((v - self.a) / (self.b - self.a)).powf(self.c)
        } else {
            T::one()
        }
    }

    pub fn cast<U: Scalar>(&self) -> RampSpec<U> {
        RampSpec {
            a: U::from(self.a).unwrap(),
            b: U::from(self.b).unwrap(),
            c: U::from(self.c).unwrap(),
        }
    }
}

/// `k(v)` for one ramp characteristic.
pub fn ramp<T: Scalar>(spec: &RampSpec<T>, v: T) -> Result<T, ComponentError> {
    spec.eval(v)
}

/// Grid description kept alongside a basis so model files can store the
/// compact form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDef {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl GridDef {
    pub fn standard() -> Self {
        GridDef {
            a: GRID_A.to_vec(),
            b: GRID_B.to_vec(),
            c: GRID_C.to_vec(),
        }
    }
}

/// Ordered characteristics shared by every valve of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ValveBasis<T> {
    specs: Vec<RampSpec<T>>,
    grid: Option<GridDef>,
}

impl<T: Scalar> ValveBasis<T> {
    pub fn new(specs: Vec<RampSpec<T>>) -> Result<Self, ComponentError> {
        if specs.is_empty() {
            return Err(ComponentError::EmptyBasis);
        }
        for i in 1..specs.len() {
            if specs[..i].contains(&specs[i]) {
                return Err(ComponentError::DuplicateBasis(i));
            }
        }
        Ok(ValveBasis { specs, grid: None })
    }

    pub fn linear() -> Self {
        ValveBasis {
            specs: vec![RampSpec::linear()],
            grid: None,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[RampSpec<T>] {
        &self.specs
    }

    pub fn grid(&self) -> Option<&GridDef> {
        self.grid.as_ref()
    }

    /// Index of a characteristic, if present.
    pub fn position(&self, spec: &RampSpec<T>) -> Option<usize> {
        self.specs.iter().position(|s| s == spec)
    }

    /// All `k_k(v)`.
    pub fn eval(&self, v: T) -> Result<Vec<T>, ComponentError> {
        self.specs.iter().map(|s| s.eval(v)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ValveBasis<U> {
        ValveBasis {
            specs: self.specs.iter().map(|s| s.cast()).collect(),
            grid: self.grid.clone(),
        }
    }
}

/// Cartesian product of knee and exponent lists, `a`-major, then `b`, then
/// `c`.
pub fn basis_grid<T: Scalar>(
    a_values: &[f64],
    b_values: &[f64],
    c_values: &[f64],
) -> Result<ValveBasis<T>, ComponentError> {
    let mut specs = Vec::with_capacity(a_values.len() * b_values.len() * c_values.len());
    for &a in a_values {
        for &b in b_values {
            for &c in c_values {
                specs.push(RampSpec::new(lit(a), lit(b), lit(c))?);
            }
        }
    }
    let mut basis = ValveBasis::new(specs)?;
    basis.grid = Some(GridDef {
        a: a_values.to_vec(),
        b: b_values.to_vec(),
        c: c_values.to_vec(),
    });
    Ok(basis)
}

/// Pipe pressure drop `s q |q|` (mH2O for l/min).
pub fn pipe_dp<T: Scalar>(s: T, q: T) -> T {
    s * q * q.abs().powf(lit(PIPE_FLOW_EXPONENT))
}

/// Valve resistance `r = sum_k theta_k / k_k(v)^2`. A positive weight on a
/// closed characteristic closes the valve; zero weights never contribute.
pub fn valve_resistance<T: Scalar>(
    theta: &[T],
    basis: &ValveBasis<T>,
    v: T,
) -> Result<Resistance<T>, ComponentError> {
    check_weights(theta, basis)?;
    let mut r = T::zero();
    for (spec, &w) in basis.specs.iter().zip(theta) {
        if w == T::zero() {
            continue;
        }
        let k = spec.eval(v)?;
        if k == T::zero() {
            return Ok(Resistance::Infinite);
        }
        r = r + w / k.powi(VALVE_CHARACTERISTIC_EXPONENT);
    }
    Ok(Resistance::Finite(r))
}

fn check_weights<T: Scalar>(theta: &[T], basis: &ValveBasis<T>) -> Result<(), ComponentError> {
    if theta.len() != basis.len() {
        return Err(ComponentError::WeightLength {
            expected: basis.len(),
            found: theta.len(),
        });
    }
    for (index, &w) in theta.iter().enumerate() {
        if !(w >= T::zero()) {
            return Err(ComponentError::NegativeWeight {
                index,
                value: w.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(())
}

/// Valve pressure drop `r(v) q^2`.
pub fn valve_dp<T: Scalar>(
    theta: &[T],
    basis: &ValveBasis<T>,
    v: T,
    q: T,
) -> Result<T, ComponentError> {
    if q < T::zero() {
        return Err(ComponentError::NegativeFlow(q.to_f64().unwrap()));
    }
    match valve_resistance(theta, basis, v)? {
        _ if q == T::zero() => Ok(T::zero()),
        Resistance::Finite(r) => Ok(r * q * q),
        Resistance::Infinite => Err(ComponentError::ClosedValveFlow(q.to_f64().unwrap())),
    }
}

/// Effective admittance of a pipe pair of total resistance `s` in series with
/// a valve `Kv k(v)`: `Kv k / sqrt(s Kv^2 k^2 + 1)`.
pub fn composite_consumer_curve<T: Scalar>(s: T, kv: T, k: T) -> T {
    let g = kv * k;
    g / (s * g * g + T::one()).sqrt()
}

/// The three model structures compared in the calibration study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelPreset {
    /// Linear valve characteristic, no set-point filtering.
    A,
    /// The 60-entry ramp grid, no set-point filtering.
    B,
    /// The 60-entry ramp grid with the deadband filter.
    C,
}

impl FromStr for ModelPreset {
    type Err = ComponentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(ModelPreset::A),
            "B" | "b" => Ok(ModelPreset::B),
            "C" | "c" => Ok(ModelPreset::C),
            other => Err(ComponentError::UnknownPreset(other.to_string())),
        }
    }
}

impl fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelPreset::A => "A",
            ModelPreset::B => "B",
            ModelPreset::C => "C",
        };
        f.write_str(s)
    }
}

impl ModelPreset {
    pub fn basis<T: Scalar>(self) -> ValveBasis<T> {
        match self {
            ModelPreset::A => {
                let mut basis = ValveBasis::linear();
                basis.grid = Some(GridDef {
                    a: vec![0.0],
                    b: vec![1.0],
                    c: vec![1.0],
                });
                basis
            }
            ModelPreset::B | ModelPreset::C => {
                basis_grid(&GRID_A, &GRID_B, &GRID_C).expect("standard grid is valid")
            }
        }
    }

    pub fn delta(self) -> f64 {
        match self {
            ModelPreset::C => MODEL_C_DELTA,
            _ => 0.0,
        }
    }
}

/// Basis and deadband of a named preset.
pub fn model_preset<T: Scalar>(name: &str) -> Result<(ValveBasis<T>, T), ComponentError> {
    let preset: ModelPreset = name.parse()?;
    Ok((preset.basis(), lit(preset.delta())))
}

/// Pipe resistances, valve weights and deadband on a validated network.
#[derive(Clone, Debug)]
pub struct HydraulicModel<T> {
    network: Network,
    pipe_s: Vec<T>,
    basis: ValveBasis<T>,
    theta: Vec<Vec<T>>,
    delta: T,
}

impl<T: Scalar> HydraulicModel<T> {
    pub fn new(
        network: Network,
        pipe_s: Vec<T>,
        basis: ValveBasis<T>,
        theta: Vec<Vec<T>>,
        delta: T,
    ) -> Result<Self, ComponentError> {
        if pipe_s.len() != network.edge_count() {
            return Err(ComponentError::Shape {
                what: "pipe resistances",
                expected: network.edge_count(),
                found: pipe_s.len(),
            });
        }
        for (j, &s) in pipe_s.iter().enumerate() {
            if !(s >= T::zero()) || !s.is_finite() {
                return Err(ComponentError::NegativeResistance {
                    edge: network.edge_id(j).to_string(),
                    value: s.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        if theta.len() != network.consumer_count() {
            return Err(ComponentError::Shape {
                what: "valve weight vectors",
                expected: network.consumer_count(),
                found: theta.len(),
            });
        }
        for th in &theta {
            check_weights(th, &basis)?;
        }
        if !(delta >= T::zero()) {
            return Err(ComponentError::Deadband(delta.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(HydraulicModel {
            network,
            pipe_s,
            basis,
            theta,
            delta,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn pipe_s(&self) -> &[T] {
        &self.pipe_s
    }

    pub fn basis(&self) -> &ValveBasis<T> {
        &self.basis
    }

    pub fn theta(&self) -> &[Vec<T>] {
        &self.theta
    }

    pub fn delta(&self) -> T {
        self.delta
    }

    pub fn with_delta(mut self, delta: T) -> Result<Self, ComponentError> {
        if !(delta >= T::zero()) {
            return Err(ComponentError::Deadband(delta.to_f64().unwrap_or(f64::NAN)));
        }
        self.delta = delta;
        Ok(self)
    }

    pub fn consumer_count(&self) -> usize {
        self.theta.len()
    }

    pub fn valve_resistance(&self, consumer: usize, v: T) -> Result<Resistance<T>, ComponentError> {
        valve_resistance(&self.theta[consumer], &self.basis, v)
    }

    pub fn valve_dp(&self, consumer: usize, v: T, q: T) -> Result<T, ComponentError> {
        valve_dp(&self.theta[consumer], &self.basis, v, q)
    }

    pub fn cast<U: Scalar>(&self) -> HydraulicModel<U> {
        HydraulicModel {
            network: self.network.clone(),
            pipe_s: self.pipe_s.iter().map(|&s| U::from(s).unwrap()).collect(),
            basis: self.basis.cast(),
            theta: self
                .theta
                .iter()
                .map(|th| th.iter().map(|&w| U::from(w).unwrap()).collect())
                .collect(),
            delta: U::from(self.delta).unwrap(),
        }
    }
}
