//! Prediction-error diagnostics: per-valve error series and statistics,
//! movement-direction splits, training coverage bands and plot-ready exports.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::components::{HydraulicModel, Resistance};
use crate::ingest::Dataset;

/// Half-width of the error band used for the "within" fraction, l/min.
pub const DEFAULT_ERROR_BAND: f64 = 0.2;
/// Histogram bin width, l/min.
pub const HIST_BIN: f64 = 0.05;
/// Set-point step of exported valve curves.
pub const CURVE_STEP: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("{what}: expected {expected} rows, found {found}")]
    Misaligned {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("training data has {found} consumers, evaluation data has {expected}")]
    TrainingShape { expected: usize, found: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Opening,
    Closing,
    Unchanged,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Opening => "opening",
            Direction::Closing => "closing",
            Direction::Unchanged => "unchanged",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub p05: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

/// Linear-interpolation quantile of unsorted data; `None` when empty.
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

fn quantile_sorted(sorted: &[f64], p: f64) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

fn quantiles(values: &[f64]) -> Option<Quantiles> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Quantiles {
        p05: quantile_sorted(&v, 0.05)?,
        p25: quantile_sorted(&v, 0.25)?,
        p50: quantile_sorted(&v, 0.50)?,
        p75: quantile_sorted(&v, 0.75)?,
        p95: quantile_sorted(&v, 0.95)?,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn mean_abs(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), e| (s + e.abs(), n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Fraction of errors with `|e| <= band`; 1 for an empty series.
pub fn within_fraction(errors: &[f64], band: f64) -> f64 {
    if errors.is_empty() {
        return 1.0;
    }
    errors.iter().filter(|e| e.abs() <= band).count() as f64 / errors.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValveReport {
    pub consumer: usize,
    pub setpoints: Vec<f64>,
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
    /// `observed - predicted`.
    pub errors: Vec<f64>,
    pub directions: Vec<Option<Direction>>,
    /// Training set-point 5th/95th quantiles.
    pub training_band: Option<(f64, f64)>,
    pub in_band: Option<Vec<bool>>,
    pub mean_flow: Option<f64>,
    pub mean_error: Option<f64>,
    pub mae: Option<f64>,
    pub quantiles: Option<Quantiles>,
    pub within: f64,
    pub mae_in_band: Option<f64>,
    pub mae_out_band: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub band: f64,
    pub t: Vec<f64>,
    pub valves: Vec<ValveReport>,
    /// Samples whose whole set-point vector lies inside the training bands.
    pub joint_in_band: Option<Vec<bool>>,
}

impl PredictionReport {
    pub fn sample_count(&self) -> usize {
        self.t.len()
    }

    /// Pooled MAE over all valves.
    pub fn mae(&self) -> Option<f64> {
        mean_abs(self.valves.iter().flat_map(|v| v.errors.iter().copied()))
    }

    /// Pooled within-band fraction over all valves.
    pub fn within(&self) -> f64 {
        let all: Vec<f64> = self.valves.iter().flat_map(|v| v.errors.iter().copied()).collect();
        within_fraction(&all, self.band)
    }

    /// Pooled MAE over samples selected per valve by `keep(valve, sample)`.
    pub fn mae_where(&self, keep: impl Fn(usize, usize) -> bool) -> Option<f64> {
        mean_abs(self.valves.iter().enumerate().flat_map(|(i, v)| {
            let keep = &keep;
            v.errors
                .iter()
                .enumerate()
                .filter(move |&(k, _)| keep(i, k))
                .map(|(_, &e)| e)
        }))
    }
}

/// Movement direction of one set-point series; the first sample has none.
pub fn direction_labels(v: &[f64]) -> Vec<Option<Direction>> {
    let mut out = Vec::with_capacity(v.len());
    for k in 0..v.len() {
        out.push(if k == 0 {
            None
        } else {
            let d = v[k] - v[k - 1];
            Some(if d > 0.0 {
                Direction::Opening
            } else if d < 0.0 {
                Direction::Closing
            } else {
                Direction::Unchanged
            })
        });
    }
    out
}

/// Direction labels per valve (outer) and sample (inner).
pub fn direction_split(dataset: &Dataset) -> Vec<Vec<Option<Direction>>> {
    (0..dataset.consumer_count())
        .map(|i| {
            let v: Vec<f64> = dataset.samples().iter().map(|s| s.v[i]).collect();
            direction_labels(&v)
        })
        .collect()
}

/// Per-valve `mean(e | opening) - mean(e | closing)`; `None` when either
/// class is empty.
pub fn hysteresis_gap(report: &PredictionReport) -> Vec<Option<f64>> {
    report
        .valves
        .iter()
        .map(|v| {
            let pick = |d: Direction| -> Vec<f64> {
                v.errors
                    .iter()
                    .zip(&v.directions)
                    .filter(|(_, l)| **l == Some(d))
                    .map(|(&e, _)| e)
                    .collect()
            };
            Some(mean(&pick(Direction::Opening))? - mean(&pick(Direction::Closing))?)
        })
        .collect()
}

/// Per-valve 5th/95th set-point quantiles of a training set.
pub fn training_bands(train: &Dataset) -> Vec<Option<(f64, f64)>> {
    (0..train.consumer_count())
        .map(|i| {
            let v: Vec<f64> = train.samples().iter().map(|s| s.v[i]).collect();
            Some((quantile(&v, 0.05)?, quantile(&v, 0.95)?))
        })
        .collect()
}

pub fn error_report(
    dataset: &Dataset,
    predictions: &[Vec<f64>],
    train: Option<&Dataset>,
) -> Result<PredictionReport, EvaluateError> {
    error_report_with_band(dataset, predictions, train, DEFAULT_ERROR_BAND)
}

pub fn error_report_with_band(
    dataset: &Dataset,
    predictions: &[Vec<f64>],
    train: Option<&Dataset>,
    band: f64,
) -> Result<PredictionReport, EvaluateError> {
    let n = dataset.consumer_count();
    if predictions.len() != dataset.len() {
        return Err(EvaluateError::Misaligned {
            what: "predictions",
            expected: dataset.len(),
            found: predictions.len(),
        });
    }
    if let Some(bad) = predictions.iter().find(|p| p.len() != n) {
        return Err(EvaluateError::Misaligned {
            what: "prediction columns",
            expected: n,
            found: bad.len(),
        });
    }
    let bands = match train {
        Some(tr) if tr.consumer_count() != n => {
            return Err(EvaluateError::TrainingShape {
                expected: n,
                found: tr.consumer_count(),
            })
        }
        Some(tr) => Some(training_bands(tr)),
        None => None,
    };
    let samples = dataset.samples();
    let directions = direction_split(dataset);
    let mut valves = Vec::with_capacity(n);
    for (i, dirs) in directions.into_iter().enumerate() {
        let setpoints: Vec<f64> = samples.iter().map(|s| s.v[i]).collect();
        let observed: Vec<f64> = samples.iter().map(|s| s.q[i]).collect();
        let predicted: Vec<f64> = predictions.iter().map(|p| p[i]).collect();
        let errors: Vec<f64> = observed.iter().zip(&predicted).map(|(q, p)| q - p).collect();
        let training_band = bands.as_ref().and_then(|b| b[i]);
        let in_band = training_band.map(|(lo, hi)| {
            setpoints.iter().map(|&v| lo <= v && v <= hi).collect::<Vec<bool>>()
        });
        let (mae_in_band, mae_out_band) = match &in_band {
            Some(mask) => (
                mean_abs(errors.iter().zip(mask).filter(|(_, &m)| m).map(|(&e, _)| e)),
                mean_abs(errors.iter().zip(mask).filter(|(_, &m)| !m).map(|(&e, _)| e)),
            ),
            None => (None, None),
        };
        valves.push(ValveReport {
            consumer: i,
            mean_flow: mean(&observed),
            mean_error: mean(&errors),
            mae: mean_abs(errors.iter().copied()),
            quantiles: quantiles(&errors),
            within: within_fraction(&errors, band),
            setpoints,
            observed,
            predicted,
            errors,
            directions: dirs,
            training_band,
            in_band,
            mae_in_band,
            mae_out_band,
        });
    }
    let joint_in_band = bands.as_ref().map(|_| {
        (0..samples.len())
            .map(|k| valves.iter().all(|v| v.in_band.as_ref().is_none_or(|m| m[k])))
            .collect()
    });
    Ok(PredictionReport {
        band,
        t: samples.iter().map(|s| s.t).collect(),
        valves,
        joint_in_band,
    })
}

/// True for set-points at least `margin` away from every knee of the bases
/// a valve actually uses.
pub fn away_from_knees(model: &HydraulicModel<f64>, consumer: usize, v: f64, margin: f64) -> bool {
    model.theta()[consumer]
        .iter()
        .zip(model.basis().specs())
        .filter(|(&w, _)| w > 0.0)
        .all(|(_, spec)| (v - spec.a()).abs() >= margin && (v - spec.b()).abs() >= margin)
}

/// `1/sqrt(r)` of one valve over the set-point grid; zero where closed.
pub fn valve_curve(model: &HydraulicModel<f64>, consumer: usize) -> Vec<(f64, f64)> {
    let steps = (1.0 / CURVE_STEP).round() as usize;
    (0..=steps)
        .map(|k| {
            let v = k as f64 * CURVE_STEP;
            let kv = match model.valve_resistance(consumer, v) {
                Ok(Resistance::Finite(r)) if r > 0.0 => 1.0 / r.sqrt(),
                Ok(Resistance::Finite(_)) => f64::INFINITY,
                _ => 0.0,
            };
            (v, kv)
        })
        .collect()
}

/// Fixed-width histogram anchored at zero: `(lower edge, count)`.
pub fn histogram(errors: &[f64]) -> Vec<(f64, usize)> {
    let idx = |e: f64| (e / HIST_BIN).floor() as i64;
    let (Some(lo), Some(hi)) = (
        errors.iter().map(|&e| idx(e)).min(),
        errors.iter().map(|&e| idx(e)).max(),
    ) else {
        return Vec::new();
    };
    let mut counts = vec![0usize; (hi - lo + 1) as usize];
    for &e in errors {
        counts[(idx(e) - lo) as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| ((lo + k as i64) as f64 * HIST_BIN, c))
        .collect()
}

#[derive(Serialize)]
struct ValveSummary<'a> {
    consumer: usize,
    samples: usize,
    mean_flow: Option<f64>,
    mean_error: Option<f64>,
    mae: Option<f64>,
    quantiles: Option<&'a Quantiles>,
    within: f64,
    hysteresis_gap: Option<f64>,
    training_p05: Option<f64>,
    training_p95: Option<f64>,
    in_band_samples: Option<usize>,
    joint_in_band_samples: Option<usize>,
    mae_in_band: Option<f64>,
    mae_out_band: Option<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    samples: usize,
    band: f64,
    hist_bin: f64,
    mae: Option<f64>,
    within: f64,
    valves: Vec<ValveSummary<'a>>,
}

const EXPORT_README: &str = "\
errors_<i>.csv  sample,t,setpoint,observed,predicted,error,direction,in_band,
                joint_in_band
                one row per sample; error = observed - predicted (l/min);
                direction is opening/closing/unchanged or empty for the first
                sample; in_band marks this valve's set-point inside its
                training 5th-95th quantile band, joint_in_band marks every
                valve inside its band; both empty without training data
hist_<i>.csv    bin_lo,bin_hi,count; fixed 0.05 l/min bins anchored at 0
curve_<i>.csv   setpoint,kv; kv = 1/sqrt(r) of the fitted valve on a 0.01 grid
                (written only when a model is supplied)
summary.json    per-valve statistics, error quantiles, within-band fraction,
                hysteresis gap and training set-point 5th/95th quantiles
Valve index <i> is 1-based.
";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvaluateError + '_ {
    move |source| EvaluateError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes plot-ready CSVs, `summary.json` and a README describing the
/// columns. Floats are written at full round-trip precision.
pub fn export_plots(
    report: &PredictionReport,
    model: Option<&HydraulicModel<f64>>,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, EvaluateError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let open = |name: String| -> Result<(PathBuf, csv::Writer<File>), EvaluateError> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(io_err(&path))?;
        Ok((path, csv::Writer::from_writer(file)))
    };
    let gaps = hysteresis_gap(report);
    for v in &report.valves {
        let tag = v.consumer + 1;
        let (path, mut w) = open(format!("errors_{tag}.csv"))?;
        w.write_record([
            "sample",
            "t",
            "setpoint",
            "observed",
            "predicted",
            "error",
            "direction",
            "in_band",
            "joint_in_band",
        ])?;
        for k in 0..v.errors.len() {
            w.write_record([
                k.to_string(),
                report.t[k].to_string(),
                v.setpoints[k].to_string(),
                v.observed[k].to_string(),
                v.predicted[k].to_string(),
                v.errors[k].to_string(),
                v.directions[k].map(|d| d.as_str().to_string()).unwrap_or_default(),
                v.in_band.as_ref().map(|m| m[k].to_string()).unwrap_or_default(),
                report.joint_in_band.as_ref().map(|m| m[k].to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);

        let (path, mut w) = open(format!("hist_{tag}.csv"))?;
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        for (lo, c) in histogram(&v.errors) {
            w.write_record([lo.to_string(), (lo + HIST_BIN).to_string(), c.to_string()])?;
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);

        if let Some(m) = model.filter(|m| v.consumer < m.consumer_count()) {
            let (path, mut w) = open(format!("curve_{tag}.csv"))?;
            w.write_record(["setpoint", "kv"])?;
            for (s, kv) in valve_curve(m, v.consumer) {
                w.write_record([s.to_string(), kv.to_string()])?;
            }
            w.flush().map_err(io_err(&path))?;
            written.push(path);
        }
    }
    let summary = Summary {
        samples: report.sample_count(),
        band: report.band,
        hist_bin: HIST_BIN,
        mae: report.mae(),
        within: report.within(),
        valves: report
            .valves
            .iter()
            .zip(&gaps)
            .map(|(v, &gap)| ValveSummary {
                consumer: v.consumer + 1,
                samples: v.errors.len(),
                mean_flow: v.mean_flow,
                mean_error: v.mean_error,
                mae: v.mae,
                quantiles: v.quantiles.as_ref(),
                within: v.within,
                hysteresis_gap: gap,
                training_p05: v.training_band.map(|b| b.0),
                training_p95: v.training_band.map(|b| b.1),
                in_band_samples: v.in_band.as_ref().map(|m| m.iter().filter(|&&b| b).count()),
                joint_in_band_samples: report.joint_in_band.as_ref().map(|m| m.iter().filter(|&&b| b).count()),
                mae_in_band: v.mae_in_band,
                mae_out_band: v.mae_out_band,
            })
            .collect(),
    };
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(io_err(&path))?;
    written.push(path);
    let path = dir.join("README.txt");
    File::create(&path)
        .and_then(|mut f| f.write_all(EXPORT_README.as_bytes()))
        .map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Sample;

    fn ds(vs: &[[f64; 2]], qs: &[[f64; 2]]) -> Dataset {
        let samples = vs
            .iter()
            .zip(qs)
            .enumerate()
            .map(|(k, (v, q))| Sample {
                t: 40.0 * k as f64,
                dp0: 6.0,
                v: v.to_vec(),
                q: q.to_vec(),
            })
            .collect();
        Dataset::new(samples, 2).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let d = ds(&[[0.5, 0.6], [0.7, 0.4]], &[[1.0, 2.0], [3.0, 4.0]]);
        let p: Vec<Vec<f64>> = d.samples().iter().map(|s| s.q.clone()).collect();
        let r = error_report(&d, &p, None).unwrap();
        for v in &r.valves {
            assert!(v.errors.iter().all(|&e| e == 0.0));
            assert_eq!(v.within, 1.0);
        }
        assert_eq!(r.valves[0].mean_flow, Some(2.0));
    }

    #[test]
    fn constant_offset() {
        let d = ds(&[[0.5, 0.6], [0.7, 0.4]], &[[1.0, 2.0], [3.0, 4.0]]);
        let p: Vec<Vec<f64>> = d.samples().iter().map(|s| s.q.iter().map(|q| q + 0.1).collect()).collect();
        let r = error_report(&d, &p, None).unwrap();
        for v in &r.valves {
            assert!(v.errors.iter().all(|&e| (e + 0.1).abs() < 1e-12));
            assert!((v.mean_error.unwrap() + 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn misaligned_predictions() {
        let d = ds(&[[0.5, 0.6]], &[[1.0, 2.0]]);
        assert!(error_report(&d, &[], None).is_err());
        assert!(error_report(&d, &[vec![1.0]], None).is_err());
    }

    #[test]
    fn direction_labels_cases() {
        use Direction::*;
        assert_eq!(direction_labels(&[0.1, 0.2, 0.3]), vec![None, Some(Opening), Some(Opening)]);
        assert_eq!(direction_labels(&[0.5, 0.5]), vec![None, Some(Unchanged)]);
        assert_eq!(
            direction_labels(&[0.5, 0.6, 0.5, 0.6]),
            vec![None, Some(Opening), Some(Closing), Some(Opening)]
        );
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.5), Some(2.5));
        assert_eq!(quantile(&[1.0, 2.0], 0.05), Some(1.05));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn gap_absent_without_both_directions() {
        let d = ds(&[[0.1, 0.5], [0.2, 0.4], [0.3, 0.5]], &[[1.0; 2]; 3]);
        let p = vec![vec![1.0; 2]; 3];
        let gaps = hysteresis_gap(&error_report(&d, &p, None).unwrap());
        assert_eq!(gaps[0], None);
        assert_eq!(gaps[1], Some(0.0));
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&[0.0, 0.01, 0.06, -0.01]);
        assert_eq!(h.len(), 3);
        assert_eq!(h.iter().map(|b| b.1).sum::<usize>(), 4);
        assert_eq!(h[1], (0.0, 2));
    }
}
