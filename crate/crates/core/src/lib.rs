//! Calibration of tree-structured district heating hydraulic models.
//!
//! The crate fits pipe resistances and valve characteristic weights from
//! steady-state operating data by L1 regression, and predicts consumer flows
//! from a fitted model by series-parallel reduction of the network tree.

pub mod calibrate;
pub mod evaluate;
pub mod components;
pub mod forward;
pub mod hysteresis;
pub mod ingest;
pub mod lp;
pub mod model_file;
pub mod network;
pub mod scalar;
pub mod synth;

pub use components::{
    basis_grid, composite_consumer_curve, model_preset, pipe_dp, ramp, valve_dp,
    valve_resistance, ComponentError, HydraulicModel, ModelPreset, RampSpec, Resistance,
    ValveBasis,
};
pub use network::{Network, NetworkError, NetworkTopology};
pub use scalar::Scalar;

pub type HydraulicModelF64 = HydraulicModel<f64>;
pub type HydraulicModelF32 = HydraulicModel<f32>;
pub type RampSpecF64 = RampSpec<f64>;
pub type ValveBasisF64 = ValveBasis<f64>;
pub type ResistanceF64 = Resistance<f64>;
