use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use dhcal::calibrate::{self, AssembleOptions, CalibrateError, FitOptions, FitReport};
use dhcal::components::{HydraulicModel, ModelPreset};
use dhcal::evaluate::{self, EvaluateError, DEFAULT_ERROR_BAND};
use dhcal::forward::predict_dataset;
use dhcal::ingest::{
    load_dataset, save_raw, write_reject_log, ColumnMap, Dataset, FilterOrder, IngestError, PipelineConfig,
    Windowed,
};
use dhcal::lp::SolverOptions;
use dhcal::model_file::{save_model, FittedPreset, ModelFile, TopologyRef};
use dhcal::network::{Network, NetworkTopology};
use dhcal::synth::{generate_exciting, generate_loadcurve, SynthConfig};
use log::{info, warn};
use serde::Serialize;

use crate::config::{pick, RunConfig};
use crate::{CalibrateArgs, CliError, EvaluateArgs, PredictArgs, SimulateArgs, WindowArgs};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn data_err(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

fn require(path: Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf, CliError> {
    path.ok_or_else(|| usage(format!("missing {flag} (or `{key}` in the config file)")))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Unreadable inputs are usage errors; malformed contents are data errors.
fn ingest_err(path: &Path, e: IngestError) -> CliError {
    match &e {
        IngestError::Io { source, .. } if source.kind() == ErrorKind::NotFound => {
            usage(format!("{} does not exist", path.display()))
        }
        _ => data_err(format!("{}: {e}", path.display())),
    }
}

fn pipeline(args: &WindowArgs, cfg: &RunConfig, delta: f64) -> Result<PipelineConfig, CliError> {
    let d = PipelineConfig::default();
    let filter_order = match pick(&args.filter_order, &cfg.filter_order).as_deref() {
        None | Some("before") => FilterOrder::BeforeWindowing,
        Some("after") => FilterOrder::AfterWindowing,
        Some(other) => return Err(usage(format!("filter order must be `before` or `after`, got {other:?}"))),
    };
    let out = PipelineConfig {
        window: pick(&args.window, &cfg.window).unwrap_or(d.window),
        discard: pick(&args.discard, &cfg.discard).unwrap_or(d.discard),
        clip: pick(&args.clip, &cfg.clip).unwrap_or(d.clip),
        delta,
        filter_order,
    };
    if !(out.window > 0.0 && out.discard >= 0.0 && out.discard < out.window) {
        return Err(usage(format!(
            "need 0 <= discard < window, got window={} discard={}",
            out.window, out.discard
        )));
    }
    if !(out.clip >= 0.0 && delta >= 0.0) {
        return Err(usage("clip and deadband must be nonnegative"));
    }
    Ok(out)
}

fn load_data(path: &Path, cfg: &RunConfig, pipe: &PipelineConfig) -> Result<Windowed, CliError> {
    require_file(path, "dataset")?;
    let map = ColumnMap(cfg.columns.clone());
    let w = load_dataset(path, &map, pipe).map_err(|e| ingest_err(path, e))?;
    info!(
        "event=ingest path={:?} samples={} rejected_windows={}",
        path.display().to_string(),
        w.dataset.len(),
        w.rejects.len()
    );
    Ok(w)
}

fn load_model_file(path: &Path) -> Result<ModelFile, CliError> {
    require_file(path, "model file")?;
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid model file {}: {e}", path.display())))
}

fn builtin(name: &str) -> Result<ModelFile, CliError> {
    let preset = FittedPreset::from_name(name).map_err(|e| {
        let names: Vec<&str> = FittedPreset::ALL.iter().map(|p| p.name()).collect();
        usage(format!("{e}; available: {}", names.join(", ")))
    })?;
    serde_json::from_str(preset.json()).map_err(|e| usage(e.to_string()))
}

/// Model from a file or a built-in name, optionally on a replacement topology.
fn resolve_model(
    path: Option<PathBuf>,
    name: Option<String>,
    topology: Option<PathBuf>,
    default_name: &str,
) -> Result<HydraulicModel<f64>, CliError> {
    let (mut file, base) = match path {
        Some(p) => (load_model_file(&p)?, p.parent().map(Path::to_path_buf)),
        None => (builtin(name.as_deref().unwrap_or(default_name))?, None),
    };
    if let Some(t) = topology {
        require_file(&t, "topology")?;
        file.topology = TopologyRef::Path(t);
    }
    file.into_model(base.as_deref()).map_err(|e| usage(format!("cannot build model: {e}")))
}

fn check_consumers(model: usize, data: usize) -> Result<(), CliError> {
    if model != data {
        return Err(usage(format!("model has {model} consumers, dataset has {data}")));
    }
    Ok(())
}

fn read_references(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    require_file(path, "reference file")?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| data_err(e.to_string()))?.clone();
    let cols: Vec<usize> = (1..)
        .map_while(|k| headers.iter().position(|h| h == format!("q{k}")))
        .collect();
    if cols.is_empty() {
        return Err(data_err(format!("{}: no q1.. columns", path.display())));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(e.to_string()))?;
        let vals = cols
            .iter()
            .map(|&c| {
                rec.get(c)
                    .and_then(|s| s.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| data_err(format!("{}: bad value in row {}", path.display(), row + 1)))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        out.push(vals);
    }
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

pub fn simulate(args: &SimulateArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let model = resolve_model(
        pick(&args.model, &cfg.model),
        pick(&args.truth, &cfg.truth),
        pick(&args.topology, &cfg.topology),
        FittedPreset::ModelCExciting.name(),
    )?;
    let d = SynthConfig::default();
    let sc = SynthConfig {
        seed: pick(&args.seed, &cfg.seed).unwrap_or(d.seed),
        floor: pick(&args.floor, &cfg.floor).unwrap_or(d.floor),
        ceiling: pick(&args.ceiling, &cfg.ceiling).unwrap_or(d.ceiling),
        dwell: pick(&args.dwell_seconds, &cfg.dwell_seconds).unwrap_or(d.dwell),
        delta_true: pick(&args.delta_true, &cfg.delta_true).unwrap_or(d.delta_true),
        flow_noise: pick(&args.noise, &cfg.noise).unwrap_or(d.flow_noise),
        pressure_noise: pick(&args.pressure_noise, &cfg.pressure_noise).unwrap_or(d.pressure_noise),
        dp0: pick(&args.dp0, &cfg.dp0).unwrap_or(d.dp0),
        base_pressure: d.base_pressure,
    };
    sc.validate().map_err(|e| usage(e.to_string()))?;
    let protocol = pick(&args.preset, &cfg.protocol).unwrap_or_else(|| "exciting".into());
    let out = match protocol.as_str() {
        "exciting" => {
            let dwells = pick(&args.dwells, &cfg.dwells).unwrap_or(500);
            generate_exciting(&model, &sc, dwells).map_err(|e| data_err(e.to_string()))?
        }
        "loadcurve" => {
            let path = require(pick(&args.references, &cfg.references), "--references", "references")?;
            let refs = read_references(&path)?;
            let lc = generate_loadcurve(&model, &sc, &refs).map_err(|e| data_err(e.to_string()))?;
            let saturated = lc.saturated.iter().flatten().filter(|&&s| s).count();
            let unconverged = lc.converged.iter().filter(|&&c| !c).count();
            if saturated + unconverged > 0 {
                warn!("event=loadcurve saturated={saturated} unconverged={unconverged}");
            }
            lc.stream
        }
        other => return Err(usage(format!("unknown protocol {other:?}; use exciting or loadcurve"))),
    };
    let dir = pick(&args.out_dir, &cfg.out_dir).unwrap_or_else(|| "simulation".into());
    create_dir(&dir)?;
    let raw = dir.join("raw.csv");
    let truth = dir.join("truth.csv");
    save_raw(&out.records, &raw).map_err(|e| usage(e.to_string()))?;
    out.save_truth(&truth).map_err(|e| usage(e.to_string()))?;
    info!(
        "event=simulate protocol={protocol} seed={} records={} raw={:?} truth={:?}",
        sc.seed,
        out.records.len(),
        raw.display().to_string(),
        truth.display().to_string()
    );
    Ok(())
}

#[derive(Serialize)]
struct CalibrationReport<'a> {
    preset: String,
    delta: f64,
    data: String,
    windows_rejected: usize,
    #[serde(flatten)]
    fit: FitReport<'a>,
}

pub fn calibrate(args: &CalibrateArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let preset_name = pick(&args.model, &cfg.preset).unwrap_or_else(|| "C".into());
    let preset: ModelPreset = preset_name
        .parse()
        .map_err(|e| usage(format!("{e}; use A, B or C")))?;
    let delta = pick(&args.delta, &cfg.delta).unwrap_or(preset.delta());
    let network = match pick(&args.topology, &cfg.topology) {
        Some(p) => {
            require_file(&p, "topology")?;
            let t = NetworkTopology::load(&p).map_err(|e| usage(e.to_string()))?;
            Network::new(t).map_err(|e| usage(e.to_string()))?
        }
        None => Network::new(NetworkTopology::four_consumer_line()).expect("built-in topology is valid"),
    };
    let data_path = require(pick(&args.data, &cfg.data), "--data", "data")?;
    let pipe = pipeline(&args.window, cfg, delta)?;
    let windowed = load_data(&data_path, cfg, &pipe)?;
    if let Some(path) = pick(&args.rejects, &cfg.rejects) {
        write_reject_log(&windowed.rejects, &path).map_err(|e| usage(e.to_string()))?;
    }
    check_consumers(network.consumer_count(), windowed.dataset.consumer_count())?;
    let assemble = AssembleOptions {
        min_flow: pick(&args.min_flow, &cfg.min_flow).unwrap_or(calibrate::DEFAULT_MIN_FLOW),
    };
    let opts = FitOptions {
        solver: SolverOptions {
            max_iter: pick(&args.max_iter, &cfg.max_iter),
            ..SolverOptions::default()
        },
        delta,
        ..FitOptions::default()
    };
    let (system, fitted) = calibrate::calibrate(&windowed.dataset, &network, &preset.basis(), &assemble, &opts)
        .map_err(|e| match e {
            CalibrateError::Consumers { .. } => usage(e.to_string()),
            _ => data_err(e.to_string()),
        })?;
    let out = pick(&args.out, &cfg.out).unwrap_or_else(|| "model.json".into());
    let report_path = pick(&args.report, &cfg.report).unwrap_or_else(|| out.with_extension("report.json"));
    save_model(&fitted.model, &format!("model-{preset}"), &out).map_err(|e| usage(e.to_string()))?;
    let report = CalibrationReport {
        preset: preset.to_string(),
        delta,
        data: data_path.display().to_string(),
        windows_rejected: windowed.rejects.len(),
        fit: FitReport::new(&system, &fitted),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| data_err(e.to_string()))?;
    fs::write(&report_path, json + "\n").map_err(|e| usage(format!("cannot write {}: {e}", report_path.display())))?;
    info!(
        "event=calibrate preset={preset} delta={delta} rows={} excluded={} objective={:e} iterations={} status={} nonzero_theta={} model={:?}",
        fitted.info.included_rows,
        fitted.info.excluded_rows,
        fitted.info.objective,
        fitted.info.iterations,
        fitted.info.status,
        report.fit.sparsity.total,
        out.display().to_string()
    );
    if !fitted.optimal {
        return Err(data_err(format!("fit stopped early ({})", fitted.info.status)));
    }
    Ok(())
}

pub fn predict(args: &PredictArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let model = resolve_model(
        pick(&args.model, &cfg.model),
        args.fitted.clone(),
        None,
        FittedPreset::ModelCExciting.name(),
    )?;
    let data_path = require(pick(&args.data, &cfg.data), "--data", "data")?;
    let pipe = pipeline(&args.window, cfg, model.delta())?;
    let data = load_data(&data_path, cfg, &pipe)?.dataset;
    check_consumers(model.consumer_count(), data.consumer_count())?;
    let mut preds = Vec::with_capacity(data.len());
    for (k, p) in predict_dataset(&model, &data).into_iter().enumerate() {
        preds.push(p.map_err(|e| data_err(format!("sample {k}: {e}")))?);
    }
    let out = pick(&args.out, &cfg.out).unwrap_or_else(|| "predictions.csv".into());
    write_predictions(&out, &data, &preds).map_err(|e| usage(format!("cannot write {}: {e}", out.display())))?;
    info!(
        "event=predict samples={} out={:?}",
        data.len(),
        out.display().to_string()
    );
    Ok(())
}

fn write_predictions(path: &Path, data: &Dataset, preds: &[Vec<f64>]) -> Result<(), csv::Error> {
    let n = data.consumer_count();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string(), "dp0".to_string()];
    for prefix in ["v", "q", "qhat"] {
        header.extend((1..=n).map(|k| format!("{prefix}{k}")));
    }
    w.write_record(&header)?;
    for (s, p) in data.samples().iter().zip(preds) {
        let mut row = vec![s.t.to_string(), s.dp0.to_string()];
        for vals in [&s.v, &s.q, p] {
            row.extend(vals.iter().map(f64::to_string));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `(t, qhat)` rows of a prediction file.
fn read_predictions(path: &Path) -> Result<Vec<(f64, Vec<f64>)>, CliError> {
    require_file(path, "prediction file")?;
    let bad = |m: String| data_err(format!("{}: {m}", path.display()));
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let t_col = headers.iter().position(|h| h == "t").ok_or_else(|| bad("no t column".into()))?;
    let cols: Vec<usize> = (1..)
        .map_while(|k| headers.iter().position(|h| h == format!("qhat{k}")))
        .collect();
    if cols.is_empty() {
        return Err(bad("no qhat1.. columns".into()));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |c: usize| {
            rec.get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| bad(format!("bad value in row {}", row + 1)))
        };
        let t = num(t_col)?;
        let q = cols.iter().map(|&c| num(c)).collect::<Result<Vec<f64>, _>>()?;
        out.push((t, q));
    }
    Ok(out)
}

pub fn evaluate(args: &EvaluateArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let pred_path = require(pick(&args.predictions, &cfg.predictions), "--predictions", "predictions")?;
    let preds = read_predictions(&pred_path)?;
    let pipe = pipeline(&args.window, cfg, 0.0)?;
    let data_path = pick(&args.data, &cfg.data).unwrap_or_else(|| pred_path.clone());
    let data = load_data(&data_path, cfg, &pipe)?.dataset;
    if preds.len() != data.len() {
        return Err(data_err(format!(
            "{} predictions for {} samples",
            preds.len(),
            data.len()
        )));
    }
    if let Some(k) = preds.iter().zip(data.samples()).position(|(p, s)| p.0 != s.t) {
        return Err(data_err(format!("prediction row {k} has t={}, sample has t={}", preds[k].0, data.samples()[k].t)));
    }
    let train = match pick(&args.train, &cfg.train) {
        Some(p) => Some(load_data(&p, cfg, &pipe)?.dataset),
        None => None,
    };
    let model = match pick(&args.model, &cfg.model) {
        Some(p) => Some(resolve_model(Some(p), None, None, "")?),
        None => None,
    };
    let q: Vec<Vec<f64>> = preds.into_iter().map(|p| p.1).collect();
    let band = args.band.unwrap_or(DEFAULT_ERROR_BAND);
    let report = evaluate::error_report_with_band(&data, &q, train.as_ref(), band).map_err(|e| match e {
        EvaluateError::TrainingShape { .. } => usage(e.to_string()),
        _ => data_err(e.to_string()),
    })?;
    let dir = pick(&args.out_dir, &cfg.out_dir).unwrap_or_else(|| "report".into());
    create_dir(&dir)?;
    let files = evaluate::export_plots(&report, model.as_ref(), &dir).map_err(|e| usage(e.to_string()))?;
    info!(
        "event=evaluate samples={} mae={} within={} files={} out_dir={:?}",
        report.sample_count(),
        report.mae().map_or("none".to_string(), |m| m.to_string()),
        report.within(),
        files.len(),
        dir.display().to_string()
    );
    Ok(())
}
