//! Regression assembly and the nonnegative L1 fit of pipe and valve
//! parameters.
//!
//! For every sample and consumer `i` the path pressure balance reads
//! `dp0 = sum_k theta_ik q_i^2 / k_k(v_i)^2 + sum_{j in path_i} 2 s_j q_j |q_j|`,
//! which is linear in `(theta, s)`. Stacking these rows gives `Phi x = y`.

use std::fmt;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::components::{ComponentError, HydraulicModel, ValveBasis, VALVE_CHARACTERISTIC_EXPONENT};
use crate::ingest::{Dataset, Sample};
use crate::lp::{solve_l1, LpError, LpStatus, SolverOptions};
use crate::network::{Network, NetworkError};

/// Rows whose consumer flow is below this (l/min) are left out of the fit.
pub const DEFAULT_MIN_FLOW: f64 = 0.05;
/// Fitted parameters below this are set to exactly zero.
pub const CLIP_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error(transparent)]
    Component(#[from] ComponentError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("dataset has {found} consumers, network has {expected}")]
    Consumers { expected: usize, found: usize },
    #[error("regression system is empty after excluding {excluded} rows")]
    EmptySystem { excluded: usize },
}

/// Meaning of one column of `Phi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Column {
    Theta { consumer: usize, basis: usize },
    Pipe { edge: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "flow")]
pub enum ExclusionReason {
    /// Flow below the minimum; carries the flow.
    LowFlow(f64),
    /// Flow through a valve whose characteristic is closed at this set-point.
    ClosedValve(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExcludedRow {
    pub sample: usize,
    pub consumer: usize,
    pub reason: ExclusionReason,
}

impl fmt::Display for ExcludedRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, q) = match self.reason {
            ExclusionReason::LowFlow(q) => ("low-flow", q),
            ExclusionReason::ClosedValve(q) => ("closed-valve", q),
        };
        write!(f, "sample={} consumer={} reason={kind} q={q}", self.sample, self.consumer)
    }
}

/// `q^2 / k_k(v)^2` for every basis entry; `None` when a closed
/// characteristic would have to pass positive flow.
pub fn valve_row(q: f64, v: f64, basis: &ValveBasis<f64>) -> Result<Option<Vec<f64>>, ComponentError> {
    if q < 0.0 {
        return Err(ComponentError::NegativeFlow(q));
    }
    let mut row = Vec::with_capacity(basis.len());
    for k in basis.eval(v)? {
        if k == 0.0 {
            if q > 0.0 {
                return Ok(None);
            }
            row.push(0.0);
        } else {
            row.push(q * q / k.powi(VALVE_CHARACTERISTIC_EXPONENT));
        }
    }
    Ok(Some(row))
}

/// `|V| x |E|` block with `2 q_j |q_j|` where edge `j` lies on consumer
/// `i`'s path.
pub fn pipe_block(sample: &Sample, net: &Network) -> Result<Vec<Vec<f64>>, NetworkError> {
    let edge_q = net.propagate_flows(&sample.q)?;
    Ok((0..net.consumer_count())
        .map(|i| {
            let mut row = vec![0.0; net.edge_count()];
            for &j in net.path(i) {
                row[j] = 2.0 * edge_q[j] * edge_q[j].abs();
            }
            row
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct RegressionSystem {
    pub phi: DMatrix<f64>,
    pub y: Vec<f64>,
    pub columns: Vec<Column>,
    /// `(sample, consumer)` behind each row.
    pub rows: Vec<(usize, usize)>,
    pub excluded: Vec<ExcludedRow>,
    network: Network,
    basis: ValveBasis<f64>,
}

impl RegressionSystem {
    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn basis(&self) -> &ValveBasis<f64> {
        &self.basis
    }

    /// Parameter vector `[theta_1; ..; theta_n; s]` of a model.
    pub fn parameters(model: &HydraulicModel<f64>) -> Vec<f64> {
        let mut x: Vec<f64> = model.theta().iter().flatten().copied().collect();
        x.extend_from_slice(model.pipe_s());
        x
    }

    /// `Phi x - y`.
    pub fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let fitted = &self.phi * nalgebra::DVector::from_column_slice(x);
        fitted.iter().zip(&self.y).map(|(f, y)| f - y).collect()
    }
}

#[derive(Clone, Debug)]
pub struct AssembleOptions {
    pub min_flow: f64,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        AssembleOptions {
            min_flow: DEFAULT_MIN_FLOW,
        }
    }
}

/// Stacks one row per (sample, consumer) with target `dp0`.
pub fn assemble_system(
    dataset: &Dataset,
    network: &Network,
    basis: &ValveBasis<f64>,
    opts: &AssembleOptions,
) -> Result<RegressionSystem, CalibrateError> {
    let n = network.consumer_count();
    if dataset.consumer_count() != n {
        return Err(CalibrateError::Consumers {
            expected: n,
            found: dataset.consumer_count(),
        });
    }
    let kk = basis.len();
    let ne = network.edge_count();
    let ncols = n * kk + ne;
    let mut data: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (t, sample) in dataset.samples().iter().enumerate() {
        let g = pipe_block(sample, network)?;
        for i in 0..n {
            let q = sample.q[i];
            if q < opts.min_flow {
                excluded.push(ExcludedRow {
                    sample: t,
                    consumer: i,
                    reason: ExclusionReason::LowFlow(q),
                });
                continue;
            }
            let Some(f) = valve_row(q, sample.v[i], basis)? else {
                excluded.push(ExcludedRow {
                    sample: t,
                    consumer: i,
                    reason: ExclusionReason::ClosedValve(q),
                });
                continue;
            };
            let mut row = vec![0.0; ncols];
            row[i * kk..(i + 1) * kk].copy_from_slice(&f);
            row[n * kk..].copy_from_slice(&g[i]);
            data.push(row);
            y.push(sample.dp0);
            rows.push((t, i));
        }
    }
    for e in &excluded {
        log::debug!("excluded row {e}");
    }
    if data.is_empty() {
        return Err(CalibrateError::EmptySystem {
            excluded: excluded.len(),
        });
    }
    let phi = DMatrix::from_fn(data.len(), ncols, |r, c| data[r][c]);
    let mut columns: Vec<Column> = (0..n)
        .flat_map(|consumer| (0..kk).map(move |basis| Column::Theta { consumer, basis }))
        .collect();
    columns.extend((0..ne).map(|edge| Column::Pipe { edge }));
    Ok(RegressionSystem {
        phi,
        y,
        columns,
        rows,
        excluded,
        network: network.clone(),
        basis: basis.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub solver: SolverOptions,
    /// Normalize every column to unit maximum before solving.
    pub scale_columns: bool,
    pub clip: f64,
    /// Deadband stored on the fitted model.
    pub delta: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            solver: SolverOptions::default(),
            scale_columns: true,
            clip: CLIP_THRESHOLD,
            delta: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FitInfo {
    pub objective: f64,
    pub status: &'static str,
    pub iterations: usize,
    /// Smallest parameter before clipping.
    pub min_raw_parameter: f64,
    pub included_rows: usize,
    pub excluded_rows: usize,
    /// `Phi x - y` at the clipped parameters.
    pub residuals: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FittedModel {
    pub model: HydraulicModel<f64>,
    pub info: FitInfo,
    pub optimal: bool,
}

/// Minimizes `||Phi x - y||_1` over `x >= 0`.
pub fn fit(system: &RegressionSystem, opts: &FitOptions) -> Result<FittedModel, CalibrateError> {
    let (m, ncols) = system.phi.shape();
    let scale: Vec<f64> = (0..ncols)
        .map(|j| {
            let mx = system.phi.column(j).amax();
            if opts.scale_columns && mx > 0.0 {
                mx
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(m, ncols, |i, j| system.phi[(i, j)] / scale[j]);
    let sol = solve_l1(&scaled, &system.y, &vec![true; ncols], &opts.solver)?;
    let raw: Vec<f64> = sol.x.iter().zip(&scale).map(|(x, s)| x / s).collect();
    let min_raw_parameter = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let x: Vec<f64> = raw.iter().map(|&v| if v < opts.clip { 0.0 } else { v }).collect();
    let residuals = system.residuals(&x);
    let objective = residuals.iter().map(|r| r.abs()).sum();

    let net = &system.network;
    let kk = system.basis.len();
    let n = net.consumer_count();
    let theta: Vec<Vec<f64>> = (0..n).map(|i| x[i * kk..(i + 1) * kk].to_vec()).collect();
    let pipe_s = x[n * kk..].to_vec();
    let model = HydraulicModel::new(net.clone(), pipe_s, system.basis.clone(), theta, opts.delta)?;
    let optimal = sol.status == LpStatus::Optimal;
    let status = match sol.status {
        LpStatus::Optimal => "optimal",
        LpStatus::IterationCapped => "iteration-capped",
        LpStatus::Stalled => "stalled",
    };
    if !optimal {
        log::warn!("fit stopped without an optimality certificate ({status}) after {} pivots", sol.iterations);
    }
    Ok(FittedModel {
        model,
        optimal,
        info: FitInfo {
            objective,
            status,
            iterations: sol.iterations,
            min_raw_parameter,
            included_rows: system.rows.len(),
            excluded_rows: system.excluded.len(),
            residuals,
        },
    })
}

/// Deadband (when the dataset is not filtered yet), assembly and fit.
pub fn calibrate(
    dataset: &Dataset,
    network: &Network,
    basis: &ValveBasis<f64>,
    assemble: &AssembleOptions,
    opts: &FitOptions,
) -> Result<(RegressionSystem, FittedModel), CalibrateError> {
    let filtered;
    let data = if opts.delta > 0.0 && dataset.filtered_delta().is_none() {
        filtered = dataset.filtered(opts.delta);
        &filtered
    } else {
        dataset
    };
    let system = assemble_system(data, network, basis, assemble)?;
    let fitted = fit(&system, opts)?;
    Ok((system, fitted))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsityReport {
    /// `(consumer id, nonzero theta count)`.
    pub valves: Vec<(String, usize)>,
    pub total: usize,
    /// `(edge id, s)`.
    pub pipes: Vec<(String, f64)>,
}

pub fn sparsity_report(model: &HydraulicModel<f64>) -> SparsityReport {
    let net = model.network();
    let valves: Vec<(String, usize)> = model
        .theta()
        .iter()
        .enumerate()
        .map(|(i, th)| (net.consumer_id(i).to_string(), th.iter().filter(|&&w| w > 0.0).count()))
        .collect();
    SparsityReport {
        total: valves.iter().map(|(_, c)| c).sum(),
        valves,
        pipes: (0..net.edge_count())
            .map(|j| (net.edge_id(j).to_string(), model.pipe_s()[j]))
            .collect(),
    }
}

impl fmt::Display for SparsityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pipe")?;
        for (id, _) in &self.pipes {
            write!(f, "\t{id}")?;
        }
        write!(f, "\ns")?;
        for (_, s) in &self.pipes {
            write!(f, "\t{s:.2e}")?;
        }
        write!(f, "\nvalve")?;
        for (id, _) in &self.valves {
            write!(f, "\t{id}")?;
        }
        write!(f, "\nnonzero")?;
        for (_, c) in &self.valves {
            write!(f, "\t{c}")?;
        }
        write!(f, "\ntotal\t{}", self.total)
    }
}

/// JSON fit report written next to the model file.
#[derive(Clone, Debug, Serialize)]
pub struct FitReport<'a> {
    pub info: &'a FitInfo,
    pub excluded: Vec<String>,
    pub sparsity: SparsityReport,
}

impl<'a> FitReport<'a> {
    pub fn new(system: &RegressionSystem, fitted: &'a FittedModel) -> Self {
        FitReport {
            info: &fitted.info,
            excluded: system.excluded.iter().map(ToString::to_string).collect(),
            sparsity: sparsity_report(&fitted.model),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::{basis_grid, ModelPreset, RampSpec};
    use crate::model_file::FittedPreset;
    use crate::network::NetworkTopology;

    fn fig1() -> Network {
        Network::new(NetworkTopology::four_consumer_line()).unwrap()
    }

    fn sample(q: [f64; 4], v: [f64; 4], dp0: f64) -> Sample {
        Sample {
            t: 0.0,
            dp0,
            v: v.to_vec(),
            q: q.to_vec(),
        }
    }

    #[test]
    fn valve_row_examples() {
        let lin = ValveBasis::linear();
        assert_eq!(valve_row(2.0, 0.5, &lin).unwrap(), Some(vec![16.0]));
        let grid = ModelPreset::B.basis::<f64>();
        assert_eq!(valve_row(0.0, 0.5, &grid).unwrap(), Some(vec![0.0; 60]));
        assert_eq!(valve_row(1.0, 0.05, &grid).unwrap(), None);
        assert_eq!(valve_row(0.0, 0.05, &grid).unwrap(), Some(vec![0.0; 60]));
    }

    #[test]
    fn pipe_block_examples() {
        let net = fig1();
        let g = pipe_block(&sample([1.0; 4], [1.0; 4], 1.0), &net).unwrap();
        // edges in id order 1..7
        assert_eq!(g[1], vec![0.0, 2.0, 0.0, 0.0, 32.0, 18.0, 0.0]);
        let g = pipe_block(&sample([0.0; 4], [1.0; 4], 1.0), &net).unwrap();
        assert!(g.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn dimensions() {
        let net = fig1();
        let ds = Dataset::new(vec![sample([1.0; 4], [0.9; 4], 5.0); 3], 4).unwrap();
        let sys = assemble_system(&ds, &net, &ModelPreset::B.basis(), &AssembleOptions::default()).unwrap();
        assert_eq!(sys.phi.shape(), (12, 247));
        assert_eq!(sys.columns[60], Column::Theta { consumer: 1, basis: 0 });
        assert_eq!(sys.columns[240], Column::Pipe { edge: 0 });

        let topo = NetworkTopology {
            nodes: vec!["r".into(), "c".into()],
            root: "r".into(),
            edges: vec![crate::network::EdgeSpec {
                id: "e".into(),
                from: "r".into(),
                to: "c".into(),
            }],
            consumers: vec!["c".into()],
        };
        let one = Network::new(topo).unwrap();
        let ds = Dataset::new(
            vec![Sample {
                t: 0.0,
                dp0: 2.0,
                v: vec![0.5],
                q: vec![1.0],
            }],
            1,
        )
        .unwrap();
        let sys = assemble_system(&ds, &one, &ValveBasis::linear(), &AssembleOptions::default()).unwrap();
        assert_eq!(sys.phi.shape(), (1, 2));
        assert_eq!(sys.phi.row(0).iter().copied().collect::<Vec<_>>(), vec![4.0, 2.0]);
    }

    #[test]
    fn exclusions_are_counted() {
        let net = fig1();
        let ds = Dataset::new(
            vec![
                sample([1.0, 0.01, 1.0, 1.0], [0.9; 4], 5.0),
                sample([1.0, 1.0, 1.0, 1.0], [0.9, 0.9, 0.12, 0.9], 5.0),
            ],
            4,
        )
        .unwrap();
        let basis = basis_grid(&[0.15, 0.2], &[0.9], &[1.0]).unwrap();
        let sys = assemble_system(&ds, &net, &basis, &AssembleOptions::default()).unwrap();
        assert_eq!(sys.excluded.len(), 2);
        assert_eq!(sys.rows.len() + sys.excluded.len(), 8);
        assert!(matches!(sys.excluded[0].reason, ExclusionReason::LowFlow(_)));
        assert!(matches!(sys.excluded[1].reason, ExclusionReason::ClosedValve(_)));
        let empty = Dataset::new(vec![sample([0.0; 4], [0.9; 4], 5.0)], 4).unwrap();
        assert!(matches!(
            assemble_system(&empty, &net, &basis, &AssembleOptions::default()),
            Err(CalibrateError::EmptySystem { excluded: 4 })
        ));
    }

    #[test]
    fn exact_model_has_zero_residual() {
        let model = FittedPreset::ModelCExciting.load();
        let net = model.network().clone();
        let mut samples = Vec::new();
        for (k, v) in [[0.5, 0.6, 0.7, 0.8], [1.0, 0.4, 0.9, 0.35], [0.33, 0.95, 0.5, 0.6]]
            .iter()
            .enumerate()
        {
            let q = crate::forward::predict(&model, v, 6.0).unwrap();
            samples.push(Sample {
                t: k as f64,
                dp0: 6.0,
                v: v.to_vec(),
                q,
            });
        }
        let ds = Dataset::new(samples, 4).unwrap();
        let sys = assemble_system(&ds, &net, model.basis(), &AssembleOptions::default()).unwrap();
        let r = sys.residuals(&RegressionSystem::parameters(&model));
        assert!(r.iter().all(|x| x.abs() < 1e-10), "{r:?}");
    }

    #[test]
    fn trivial_fits() {
        let topo = NetworkTopology {
            nodes: vec!["r".into(), "c".into()],
            root: "r".into(),
            edges: vec![crate::network::EdgeSpec {
                id: "e".into(),
                from: "r".into(),
                to: "c".into(),
            }],
            consumers: vec!["c".into()],
        };
        let net = Network::new(topo).unwrap();
        let ds = Dataset::new(
            vec![Sample {
                t: 0.0,
                dp0: 6.0,
                v: vec![1.0],
                q: vec![1.0],
            }],
            1,
        )
        .unwrap();
        let sys = assemble_system(&ds, &net, &ValveBasis::linear(), &AssembleOptions::default()).unwrap();
        let f = fit(&sys, &FitOptions::default()).unwrap();
        assert!(f.optimal);
        assert!(f.info.objective < 1e-12);
        let p = RegressionSystem::parameters(&f.model);
        assert!((p[0] + 2.0 * p[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn sparsity_of_presets() {
        assert_eq!(sparsity_report(&FittedPreset::ModelBExciting.load()).total, 18);
        assert_eq!(sparsity_report(&FittedPreset::ModelCExciting.load()).total, 16);
        let zero = HydraulicModel::new(
            fig1(),
            vec![0.0; 7],
            ValveBasis::new(vec![RampSpec::linear()]).unwrap(),
            vec![vec![0.0]; 4],
            0.0,
        )
        .unwrap();
        let rep = sparsity_report(&zero);
        assert_eq!(rep.total, 0);
        assert!(rep.to_string().contains("total\t0"));
    }
}
