//! Forward flow prediction by series-parallel reduction of the network tree.
//!
//! Every consumer branch is a quadratic resistance `2 s + r` (supply and
//! return pipe plus valve). Sibling subtrees combine in parallel, trunk pipes
//! add in series, and the root equivalent gives the total flow. Expansion
//! walks back down, subtracting trunk drops from the available head.

use thiserror::Error;

use crate::components::{ComponentError, HydraulicModel, Resistance};
use crate::hysteresis::filter_values;
use crate::ingest::Dataset;
use crate::network::NetworkError;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error(transparent)]
    Component(#[from] ComponentError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("negative root pressure difference {0} (pump off?)")]
    NegativeHead(f64),
    #[error("expected {expected} set-points, got {found}")]
    SetpointCount { expected: usize, found: usize },
    #[error("zero equivalent resistance under positive head; flow is unbounded")]
    ZeroResistance,
    #[error("bisection did not converge on edge {0}")]
    NoConvergence(String),
}

/// Consumer branch resistance `2 s + r`.
pub fn branch_resistance<T: Scalar>(s: T, r: Resistance<T>) -> Resistance<T> {
    Resistance::Finite(lit::<T>(2.0) * s).series(r)
}

/// Two quadratic resistances in parallel: `ab / (sqrt a + sqrt b)^2`.
pub fn parallel_combine<T: Scalar>(a: Resistance<T>, b: Resistance<T>) -> Resistance<T> {
    match (a, b) {
        (Resistance::Infinite, other) | (other, Resistance::Infinite) => other,
        (Resistance::Finite(x), Resistance::Finite(y)) => {
            if x == T::zero() || y == T::zero() {
                return Resistance::zero();
            }
            let d = x.sqrt() + y.sqrt();
            Resistance::Finite(x * y / (d * d))
        }
    }
}

/// Root flow `sqrt(dp0 / s_hat)`.
pub fn total_flow<T: Scalar>(s_hat: Resistance<T>, dp0: T) -> Result<T, ForwardError> {
    if dp0 < T::zero() {
        return Err(ForwardError::NegativeHead(dp0.to_f64().unwrap()));
    }
    match s_hat {
        Resistance::Infinite => Ok(T::zero()),
        _ if dp0 == T::zero() => Ok(T::zero()),
        Resistance::Finite(s) if s == T::zero() => Err(ForwardError::ZeroResistance),
        Resistance::Finite(s) => Ok((dp0 / s).sqrt()),
    }
}

/// One node of the reduced tree. For the root, `s_hat` is the full
/// equivalent resistance; for other nodes it covers the supply/return pipe
/// pair into the node plus everything below it.
#[derive(Clone, Debug, PartialEq)]
pub struct ReductionNode<T> {
    pub node: usize,
    pub edge: Option<usize>,
    pub pipe_s: T,
    pub consumer: Option<usize>,
    pub s_hat: Resistance<T>,
    /// Flow through `edge`, filled by [`expand`].
    pub q_hat: T,
    /// Supply-return head at `node`, filled by [`expand`].
    pub head: T,
    pub children: Vec<ReductionNode<T>>,
}

fn reduce_node<T: Scalar>(
    model: &HydraulicModel<T>,
    setpoints: &[T],
    node: usize,
) -> Result<ReductionNode<T>, ForwardError> {
    let net = model.network();
    let edge = net.parent_edge(node);
    let pipe_s = edge.map_or(T::zero(), |e| model.pipe_s()[e]);
    let consumer = net.consumer_at(node);
    let mut children = Vec::with_capacity(net.child_edges(node).len());
    let below = if let Some(i) = consumer {
        model.valve_resistance(i, setpoints[i])?
    } else {
        let mut acc = Resistance::Infinite;
        for &e in net.child_edges(node) {
            let child = reduce_node(model, setpoints, net.edge_head(e))?;
            acc = parallel_combine(acc, child.s_hat);
            children.push(child);
        }
        acc
    };
    let s_hat = match edge {
        Some(_) => branch_resistance(pipe_s, below),
        None => below,
    };
    Ok(ReductionNode {
        node,
        edge,
        pipe_s,
        consumer,
        s_hat,
        q_hat: T::zero(),
        head: T::zero(),
        children,
    })
}

/// Builds the reduction tree for one set-point vector; the returned root's
/// `s_hat` is the equivalent resistance seen by the pump.
pub fn reduce<T: Scalar>(
    model: &HydraulicModel<T>,
    setpoints: &[T],
) -> Result<ReductionNode<T>, ForwardError> {
    let n = model.consumer_count();
    if setpoints.len() != n {
        return Err(ForwardError::SetpointCount {
            expected: n,
            found: setpoints.len(),
        });
    }
    reduce_node(model, setpoints, model.network().root())
}

fn expand_node<T: Scalar>(node: &mut ReductionNode<T>, head: T, flows: &mut [T]) -> Result<(), ForwardError> {
    node.head = head;
    if let Some(i) = node.consumer {
        flows[i] = node.q_hat;
        return Ok(());
    }
    for child in &mut node.children {
        let q = total_flow(child.s_hat, head)?;
        child.q_hat = q;
        let mut h = head - lit::<T>(2.0) * child.pipe_s * q * q;
        if h < T::zero() {
            log::debug!("clamped negative head {h} at node {}", child.node);
            h = T::zero();
        }
        expand_node(child, h, flows)?;
    }
    Ok(())
}

/// Fills flows and heads top-down and returns per-consumer flows.
pub fn expand<T: Scalar>(tree: &mut ReductionNode<T>, dp0: T) -> Result<Vec<T>, ForwardError> {
    let total = total_flow(tree.s_hat, dp0)?;
    tree.q_hat = total;
    let mut flows = Vec::new();
    collect_consumers(tree, &mut flows);
    let n = flows.iter().map(|&i| i + 1).max().unwrap_or(0);
    let mut out = vec![T::zero(); n];
    expand_node(tree, dp0, &mut out)?;
    Ok(out)
}

fn collect_consumers<T>(node: &ReductionNode<T>, out: &mut Vec<usize>) {
    if let Some(i) = node.consumer {
        out.push(i);
    }
    for c in &node.children {
        collect_consumers(c, out);
    }
}

/// Consumer flows for one operating point.
pub fn predict<T: Scalar>(model: &HydraulicModel<T>, setpoints: &[T], dp0: T) -> Result<Vec<T>, ForwardError> {
    let mut tree = reduce(model, setpoints)?;
    let mut flows = expand(&mut tree, dp0)?;
    flows.resize(model.consumer_count(), T::zero());
    Ok(flows)
}

/// Per-consumer relative mismatch of the path pressure balance
/// `dp0 = r_i q_i^2 + sum_{j in path} 2 s_j q_j^2`.
pub fn pressure_residuals<T: Scalar>(
    model: &HydraulicModel<T>,
    setpoints: &[T],
    dp0: T,
    flows: &[T],
) -> Result<Vec<T>, ForwardError> {
    let net = model.network();
    let edge_q = net.propagate_flows(flows)?;
    let two = lit::<T>(2.0);
    let mut out = Vec::with_capacity(flows.len());
    for i in 0..model.consumer_count() {
        let pipes: T = net
            .path(i)
            .iter()
            .map(|&j| two * model.pipe_s()[j] * edge_q[j] * edge_q[j])
            .sum();
        let valve = match model.valve_resistance(i, setpoints[i])? {
            Resistance::Finite(r) => r * flows[i] * flows[i],
            // a closed valve holds whatever head is left
            Resistance::Infinite => dp0 - pipes,
        };
        let scale = dp0.abs().max(T::min_positive_value());
        out.push((dp0 - pipes - valve).abs() / scale);
    }
    Ok(out)
}

/// Flow through a pipe of resistance `s` feeding a load of unit-head
/// admittance `c` under unit head: the root of `q = c sqrt(1 - 2 s q^2)`.
fn unit_head_flow(s: f64, c: f64, edge: &str) -> Result<f64, ForwardError> {
    if c == 0.0 {
        return Ok(0.0);
    }
    if s == 0.0 {
        return Ok(c);
    }
    let mut lo = 0.0;
    let mut hi = (1.0 / (2.0 * s)).sqrt();
    if c.is_finite() {
        hi = hi.min(c);
    }
    let f = |q: f64| {
        let h = (1.0 - 2.0 * s * q * q).max(0.0);
        if c.is_finite() {
            q - c * h.sqrt()
        } else if h > 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(ForwardError::NoConvergence(edge.to_string()))
}

/// Independent check on [`predict`]. Each subtree's flow under a given head
/// is found by bisection on the pressure balance of its feeding pipe. Flows
/// scale with the square root of head, so each subtree is solved once at unit
/// head and rescaled, which keeps the nesting linear in tree size.
pub fn oracle_solve(
    model: &HydraulicModel<f64>,
    setpoints: &[f64],
    dp0: f64,
) -> Result<Vec<f64>, ForwardError> {
    let net = model.network();
    if setpoints.len() != model.consumer_count() {
        return Err(ForwardError::SetpointCount {
            expected: model.consumer_count(),
            found: setpoints.len(),
        });
    }
    if dp0 < 0.0 {
        return Err(ForwardError::NegativeHead(dp0));
    }
    // unit-head admittance of each edge subtree (pipe pair included)
    let mut edge_c = vec![0.0; net.edge_count()];
    for &node in net.bfs_order().iter().rev() {
        let Some(e) = net.parent_edge(node) else { continue };
        let below = match net.consumer_at(node) {
            Some(i) => match model.valve_resistance(i, setpoints[i])? {
                Resistance::Infinite => 0.0,
                Resistance::Finite(r) if r == 0.0 => f64::INFINITY,
                Resistance::Finite(r) => 1.0 / r.sqrt(),
            },
            None => net.child_edges(node).iter().map(|&c| edge_c[c]).sum(),
        };
        edge_c[e] = unit_head_flow(model.pipe_s()[e], below, net.edge_id(e))?;
    }
    let mut head = vec![0.0; net.node_count()];
    let mut flows = vec![0.0; model.consumer_count()];
    head[net.root()] = dp0;
    for &node in net.bfs_order() {
        for &e in net.child_edges(node) {
            if edge_c[e].is_infinite() {
                return Err(ForwardError::ZeroResistance);
            }
            let q = edge_c[e] * head[node].sqrt();
            let child = net.edge_head(e);
            head[child] = (head[node] - 2.0 * model.pipe_s()[e] * q * q).max(0.0);
            if let Some(i) = net.consumer_at(child) {
                flows[i] = q;
            }
        }
    }
    Ok(flows)
}

/// Set-point vectors actually seen by the valves: the model's deadband is run
/// over each valve's sample sequence unless the dataset already holds
/// spindle estimates.
pub fn effective_setpoints(model: &HydraulicModel<f64>, dataset: &Dataset) -> Vec<Vec<f64>> {
    let n = dataset.consumer_count();
    let delta = model.delta();
    let mut v: Vec<Vec<f64>> = dataset.samples().iter().map(|s| s.v.clone()).collect();
    if delta > 0.0 && dataset.filtered_delta().is_none() {
        for i in 0..n {
            let series: Vec<f64> = v.iter().map(|row| row[i]).collect();
            for (row, f) in v.iter_mut().zip(filter_values(&series, delta)) {
                row[i] = f;
            }
        }
    }
    v
}

/// Predicted flows for every sample; failures are kept per sample.
pub fn predict_dataset(
    model: &HydraulicModel<f64>,
    dataset: &Dataset,
) -> Vec<Result<Vec<f64>, ForwardError>> {
    effective_setpoints(model, dataset)
        .iter()
        .zip(dataset.samples())
        .map(|(v, s)| predict(model, v, s.dp0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::ValveBasis;
    use crate::model_file::FittedPreset;
    use crate::network::{EdgeSpec, Network, NetworkTopology};

    fn fin(x: f64) -> Resistance<f64> {
        Resistance::Finite(x)
    }

    fn two_consumer(theta: f64) -> HydraulicModel<f64> {
        let topo = NetworkTopology {
            nodes: vec!["root".into(), "a".into(), "b".into()],
            root: "root".into(),
            edges: vec![
                EdgeSpec { id: "ea".into(), from: "root".into(), to: "a".into() },
                EdgeSpec { id: "eb".into(), from: "root".into(), to: "b".into() },
            ],
            consumers: vec!["a".into(), "b".into()],
        };
        HydraulicModel::new(
            Network::new(topo).unwrap(),
            vec![0.0, 0.0],
            ValveBasis::linear(),
            vec![vec![theta], vec![theta]],
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn branch_examples() {
        assert!((branch_resistance(0.015, fin(0.64)).finite().unwrap() - 0.67).abs() < 1e-15);
        assert!(branch_resistance(0.1, Resistance::Infinite).is_infinite());
        assert_eq!(branch_resistance(0.0, fin(0.0)), fin(0.0));
    }

    #[test]
    fn parallel_examples() {
        assert!((parallel_combine(fin(2.0), fin(2.0)).finite().unwrap() - 0.5).abs() < 1e-15);
        assert!((parallel_combine(fin(1.0), fin(4.0)).finite().unwrap() - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(parallel_combine(fin(3.0), Resistance::Infinite), fin(3.0));
        assert!(parallel_combine::<f64>(Resistance::Infinite, Resistance::Infinite).is_infinite());
        assert_eq!(parallel_combine(fin(0.0), fin(3.0)), fin(0.0));
    }

    #[test]
    fn total_flow_examples() {
        assert_eq!(total_flow(fin(4.0), 16.0).unwrap(), 2.0);
        assert_eq!(total_flow(fin(4.0), 0.0).unwrap(), 0.0);
        assert_eq!(total_flow(Resistance::Infinite, 3.0).unwrap(), 0.0);
        assert!(total_flow(fin(4.0), -1.0).is_err());
    }

    #[test]
    fn symmetric_pair() {
        let m = two_consumer(1.0);
        let tree = reduce(&m, &[1.0, 1.0]).unwrap();
        assert!((tree.s_hat.finite().unwrap() - 0.25).abs() < 1e-15);
        let q = predict(&m, &[1.0, 1.0], 1.0).unwrap();
        assert!((q[0] - 1.0).abs() < 1e-15 && (q[1] - 1.0).abs() < 1e-15);
        let o = oracle_solve(&m, &[1.0, 1.0], 1.0).unwrap();
        assert!((o[0] - 1.0).abs() < 1e-12 && (o[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_open_consumer_is_series_chain() {
        let m = FittedPreset::ModelAExciting.load();
        let tree = reduce(&m, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = m.pipe_s();
        let expect = 2.0 * (s[0] + s[4]) + 0.047;
        assert!((tree.s_hat.finite().unwrap() - expect).abs() < 1e-15);
        let q = predict(&m, &[1.0, 0.0, 0.0, 0.0], 6.0).unwrap();
        assert!((q[0] - (6.0 / expect).sqrt()).abs() < 1e-12);
        assert_eq!(&q[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn all_closed_gives_zero() {
        let m = FittedPreset::ModelAExciting.load();
        let tree = reduce(&m, &[0.0; 4]).unwrap();
        assert!(tree.s_hat.is_infinite());
        assert_eq!(predict(&m, &[0.0; 4], 6.0).unwrap(), vec![0.0; 4]);
        assert_eq!(oracle_solve(&m, &[0.0; 4], 6.0).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn presets_match_oracle_and_balance() {
        for p in FittedPreset::ALL {
            let m = p.load();
            for v in [[1.0; 4], [0.5, 0.7, 0.9, 0.35]] {
                let q = predict(&m, &v, 6.0).unwrap();
                let o = oracle_solve(&m, &v, 6.0).unwrap();
                for i in 0..4 {
                    assert!((q[i] - o[i]).abs() <= 1e-10 * o[i].max(1e-12), "{p:?} {q:?} {o:?}");
                }
                let res = pressure_residuals(&m, &v, 6.0, &q).unwrap();
                assert!(res.iter().all(|&r| r < 1e-12), "{res:?}");
                let res = pressure_residuals(&m, &v, 6.0, &o).unwrap();
                assert!(res.iter().all(|&r| r < 1e-10), "{res:?}");
            }
        }
    }

    #[test]
    fn head_scaling() {
        let m = FittedPreset::ModelCExciting.load();
        let v = [0.6, 0.8, 0.5, 0.9];
        let a = predict(&m, &v, 3.0).unwrap();
        let b = predict(&m, &v, 12.0).unwrap();
        for i in 0..4 {
            assert!((b[i] - 2.0 * a[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn f32_prediction_close_to_f64() {
        let m = FittedPreset::ModelBExciting.load();
        let v = [0.6, 0.8, 0.5, 0.9];
        let a = predict(&m, &v, 6.0).unwrap();
        let m32 = m.cast::<f32>();
        let b = predict(&m32, &[0.6f32, 0.8, 0.5, 0.9], 6.0).unwrap();
        for i in 0..4 {
            assert!((a[i] - b[i] as f64).abs() < 1e-4 * a[i]);
        }
    }
}
