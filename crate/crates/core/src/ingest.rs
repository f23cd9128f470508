//! Raw sensor records to steady-state samples: flow differencing along the
//! trunk, root pressure difference, windowed averaging, and CSV I/O.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hysteresis::filter_values;

/// Default magnitude below which negative windowed flows count as noise.
pub const DEFAULT_CLIP: f64 = 0.05;
/// Largest accepted spacing between consecutive records inside a window, s.
pub const MAX_GAP: f64 = 2.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("unrecognized csv header; expected raw (t,ft1,..) or processed (t,dp0,..) columns")]
    UnknownSchema,
    #[error("row {row}: cannot parse {column}={value:?}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: non-finite value in column {column}")]
    NotFinite { row: usize, column: String },
    #[error("row {row}: timestamp {t} does not increase")]
    NonMonotone { row: usize, t: f64 },
    #[error("sample {index} has {found} consumers, expected {expected}")]
    Consumers {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("window length {window} must exceed discard {discard} >= 0")]
    Window { window: f64, discard: f64 },
}

/// One 1 Hz record of the laboratory stream.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub t: f64,
    /// Trunk flow meters, upstream first, l/min.
    pub ft: Vec<f64>,
    pub pt1: f64,
    pub pt2: f64,
    pub v: Vec<f64>,
}

/// One steady-state load condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub dp0: f64,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Exciting,
    Realistic,
    Synthetic,
    #[default]
    Unspecified,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    consumers: usize,
    pub provenance: Provenance,
    /// Lab seconds per real second, for time-compressed load curves.
    pub time_scale: Option<f64>,
    filtered_delta: Option<f64>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, consumers: usize) -> Result<Self, IngestError> {
        for (index, s) in samples.iter().enumerate() {
            for found in [s.v.len(), s.q.len()] {
                if found != consumers {
                    return Err(IngestError::Consumers {
                        index,
                        expected: consumers,
                        found,
                    });
                }
            }
        }
        Ok(Dataset {
            samples,
            consumers,
            provenance: Provenance::Unspecified,
            time_scale: None,
            filtered_delta: None,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn consumer_count(&self) -> usize {
        self.consumers
    }

    /// Deadband already applied to the set-points, if any.
    pub fn filtered_delta(&self) -> Option<f64> {
        self.filtered_delta
    }

    pub fn with_filtered_delta(mut self, delta: Option<f64>) -> Self {
        self.filtered_delta = delta;
        self
    }

    /// Copy with the deadband run over each valve's sample sequence.
    pub fn filtered(&self, delta: f64) -> Dataset {
        let mut out = self.clone();
        for i in 0..self.consumers {
            let series: Vec<f64> = self.samples.iter().map(|s| s.v[i]).collect();
            for (s, f) in out.samples.iter_mut().zip(filter_values(&series, delta)) {
                s.v[i] = f;
            }
        }
        out.filtered_delta = Some(delta);
        out
    }

    /// Samples `range` as a new dataset with the same metadata.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            samples: self.samples[range].to_vec(),
            ..self.clone()
        }
    }

    /// Per-consumer mean flow.
    pub fn mean_flows(&self) -> Vec<f64> {
        let n = self.samples.len().max(1) as f64;
        (0..self.consumers)
            .map(|i| self.samples.iter().map(|s| s.q[i]).sum::<f64>() / n)
            .collect()
    }
}

/// Consumer flows from trunk meters: `q_i = FT_i - FT_{i+1}`, last `q = FT_n`.
pub fn consumer_flows(raw: &RawRecord) -> Vec<f64> {
    let n = raw.ft.len();
    (0..n)
        .map(|i| if i + 1 < n { raw.ft[i] - raw.ft[i + 1] } else { raw.ft[i] })
        .collect()
}

/// Root pressure difference `PT1 - PT2`.
pub fn root_dp(raw: &RawRecord) -> f64 {
    raw.pt1 - raw.pt2
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowReject {
    pub window: usize,
    pub start: f64,
    pub reason: String,
}

impl fmt::Display for WindowReject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "window={} start={} reason={}", self.window, self.start, self.reason)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterOrder {
    /// Filter 1 Hz commands, then average.
    #[default]
    BeforeWindowing,
    /// Average commands, then filter the window means.
    AfterWindowing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub window: f64,
    pub discard: f64,
    /// Deadband applied to set-points; 0 disables.
    pub delta: f64,
    pub filter_order: FilterOrder,
    pub clip: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window: 40.0,
            discard: 10.0,
            delta: 0.0,
            filter_order: FilterOrder::BeforeWindowing,
            clip: DEFAULT_CLIP,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Windowed {
    pub dataset: Dataset,
    pub rejects: Vec<WindowReject>,
}

fn check_window(window: f64, discard: f64) -> Result<(), IngestError> {
    if !(discard >= 0.0 && window > discard && window.is_finite()) {
        return Err(IngestError::Window { window, discard });
    }
    Ok(())
}

/// Mean taken relative to the first value, so constant runs average exactly.
fn shifted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut first = None;
    let mut acc = 0.0;
    let mut n = 0usize;
    for x in values {
        let x0 = *first.get_or_insert(x);
        acc += x - x0;
        n += 1;
    }
    first.map_or(f64::NAN, |x0| x0 + acc / n as f64)
}

/// Splits the stream into consecutive windows from its first timestamp and
/// averages each after dropping its first `discard` seconds. A trailing
/// window without a record in its last second is dropped; windows with
/// cadence gaps, pump-off pressure, or clearly negative flow are rejected.
pub fn windowed_samples(
    records: &[RawRecord],
    window: f64,
    discard: f64,
    clip: f64,
) -> Result<Windowed, IngestError> {
    check_window(window, discard)?;
    let consumers = records.first().map_or(0, |r| r.ft.len());
    let mut samples = Vec::new();
    let mut rejects = Vec::new();
    let Some(first) = records.first() else {
        return Ok(Windowed {
            dataset: Dataset::new(samples, consumers)?,
            rejects,
        });
    };
    let t0 = first.t;
    let mut begin = 0;
    let mut k = 0usize;
    while begin < records.len() {
        let start = t0 + k as f64 * window;
        let end = start + window;
        let mut stop = begin;
        while stop < records.len() && records[stop].t < end {
            stop += 1;
        }
        let chunk = &records[begin..stop];
        let complete = chunk.last().is_some_and(|r| r.t >= end - 1.0);
        if stop == records.len() && !complete {
            break;
        }
        begin = stop;
        k += 1;
        let reject = |reason: String| WindowReject {
            window: k - 1,
            start,
            reason,
        };
        if chunk.is_empty() {
            rejects.push(reject("no records".into()));
            continue;
        }
        let mut prev = start;
        let mut gap = chunk[0].t - start;
        for r in chunk {
            gap = gap.max(r.t - prev);
            prev = r.t;
        }
        if gap > MAX_GAP {
            rejects.push(reject(format!("cadence gap of {gap} s")));
            continue;
        }
        let used: Vec<&RawRecord> = chunk.iter().filter(|r| r.t - start >= discard).collect();
        if used.is_empty() {
            rejects.push(reject("no records after discard".into()));
            continue;
        }
        let flows: Vec<Vec<f64>> = used.iter().map(|r| consumer_flows(r)).collect();
        let dp0 = shifted_mean(used.iter().map(|r| root_dp(r)));
        let v: Vec<f64> = (0..consumers)
            .map(|i| shifted_mean(used.iter().map(|r| r.v[i])))
            .collect();
        let mut q: Vec<f64> = (0..consumers)
            .map(|i| shifted_mean(flows.iter().map(|f| f[i])))
            .collect();
        if !(dp0 > 0.0) {
            rejects.push(reject(format!("root pressure difference {dp0} <= 0")));
            continue;
        }
        if let Some((i, &bad)) = q.iter().enumerate().find(|(_, &x)| x < -clip) {
            rejects.push(reject(format!("flow q{} = {bad} below -{clip}", i + 1)));
            continue;
        }
        q.iter_mut().for_each(|x| *x = x.max(0.0));
        samples.push(Sample { t: start, dp0, v, q });
    }
    Ok(Windowed {
        dataset: Dataset::new(samples, consumers)?,
        rejects,
    })
}

/// Deadband filtering, in the configured order, combined with windowing.
pub fn process_records(records: &[RawRecord], cfg: &PipelineConfig) -> Result<Windowed, IngestError> {
    if cfg.delta > 0.0 && cfg.filter_order == FilterOrder::BeforeWindowing {
        let mut filtered = records.to_vec();
        let n = records.first().map_or(0, |r| r.v.len());
        for i in 0..n {
            let series: Vec<f64> = records.iter().map(|r| r.v[i]).collect();
            for (r, f) in filtered.iter_mut().zip(filter_values(&series, cfg.delta)) {
                r.v[i] = f;
            }
        }
        let mut out = windowed_samples(&filtered, cfg.window, cfg.discard, cfg.clip)?;
        out.dataset.filtered_delta = Some(cfg.delta);
        Ok(out)
    } else {
        let mut out = windowed_samples(records, cfg.window, cfg.discard, cfg.clip)?;
        if cfg.delta > 0.0 {
            out.dataset = out.dataset.filtered(cfg.delta);
        }
        Ok(out)
    }
}

/// Canonical column name to file column name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap(pub BTreeMap<String, String>);

impl ColumnMap {
    fn resolve<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.0.get(canonical).map_or(canonical, |s| s.as_str())
    }
}

struct Columns {
    headers: Vec<String>,
}

impl Columns {
    fn find(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h.trim() == name)
    }

    fn require(&self, map: &ColumnMap, canonical: &str) -> Result<usize, IngestError> {
        let name = map.resolve(canonical);
        self.find(name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    }

    fn count(&self, map: &ColumnMap, prefix: &str) -> usize {
        (1..).take_while(|k| self.find(map.resolve(&format!("{prefix}{k}"))).is_some()).count()
    }
}

fn parse_field(record: &csv::StringRecord, idx: usize, row: usize, column: &str) -> Result<f64, IngestError> {
    let raw = record.get(idx).unwrap_or("").trim();
    let value: f64 = raw.parse().map_err(|_| IngestError::Parse {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })?;
    if !value.is_finite() {
        return Err(IngestError::NotFinite {
            row,
            column: column.to_string(),
        });
    }
    Ok(value)
}

enum Table {
    Raw(Vec<RawRecord>),
    Processed(Dataset),
}

fn read_table(reader: impl Read, map: &ColumnMap) -> Result<Table, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let cols = Columns {
        headers: rdr.headers()?.iter().map(str::to_string).collect(),
    };
    let t_idx = cols.require(map, "t")?;
    let is_raw = cols.find(map.resolve("ft1")).is_some();
    let is_processed = cols.find(map.resolve("dp0")).is_some();
    let mut last_t = f64::NEG_INFINITY;
    let mut check_t = |row: usize, t: f64| {
        if !(t > last_t) {
            return Err(IngestError::NonMonotone { row, t });
        }
        last_t = t;
        Ok(())
    };
    if is_raw {
        let n = cols.count(map, "ft");
        let ft: Vec<usize> = (1..=n)
            .map(|k| cols.require(map, &format!("ft{k}")))
            .collect::<Result<_, _>>()?;
        let pt1 = cols.require(map, "pt1")?;
        let pt2 = cols.require(map, "pt2")?;
        let v: Vec<usize> = (1..=n)
            .map(|k| cols.require(map, &format!("v{k}")))
            .collect::<Result<_, _>>()?;
        let mut out = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = row + 1;
            let t = parse_field(&rec, t_idx, row, "t")?;
            check_t(row, t)?;
            let get = |idx: usize, name: &str| parse_field(&rec, idx, row, name);
            out.push(RawRecord {
                t,
                ft: ft.iter().enumerate().map(|(k, &i)| get(i, &format!("ft{}", k + 1))).collect::<Result<_, _>>()?,
                pt1: get(pt1, "pt1")?,
                pt2: get(pt2, "pt2")?,
                v: v.iter().enumerate().map(|(k, &i)| get(i, &format!("v{}", k + 1))).collect::<Result<_, _>>()?,
            });
        }
        Ok(Table::Raw(out))
    } else if is_processed {
        let n = cols.count(map, "q");
        let dp0 = cols.require(map, "dp0")?;
        let v: Vec<usize> = (1..=n)
            .map(|k| cols.require(map, &format!("v{k}")))
            .collect::<Result<_, _>>()?;
        let q: Vec<usize> = (1..=n)
            .map(|k| cols.require(map, &format!("q{k}")))
            .collect::<Result<_, _>>()?;
        let mut samples = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = row + 1;
            let t = parse_field(&rec, t_idx, row, "t")?;
            check_t(row, t)?;
            samples.push(Sample {
                t,
                dp0: parse_field(&rec, dp0, row, "dp0")?,
                v: v.iter().enumerate().map(|(k, &i)| parse_field(&rec, i, row, &format!("v{}", k + 1))).collect::<Result<_, _>>()?,
                q: q.iter().enumerate().map(|(k, &i)| parse_field(&rec, i, row, &format!("q{}", k + 1))).collect::<Result<_, _>>()?,
            });
        }
        Ok(Table::Processed(Dataset::new(samples, n)?))
    } else if cols.find(map.resolve("pt1")).is_some() {
        Err(IngestError::MissingColumn(map.resolve("ft1").to_string()))
    } else {
        Err(IngestError::UnknownSchema)
    }
}

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a raw record CSV.
pub fn load_raw(path: impl AsRef<Path>, map: &ColumnMap) -> Result<Vec<RawRecord>, IngestError> {
    match read_table(open(path.as_ref())?, map)? {
        Table::Raw(r) => Ok(r),
        Table::Processed(_) => Err(IngestError::MissingColumn(map.resolve("ft1").to_string())),
    }
}

/// Loads either CSV schema; raw files run through the windowing pipeline.
pub fn load_dataset(
    path: impl AsRef<Path>,
    map: &ColumnMap,
    cfg: &PipelineConfig,
) -> Result<Windowed, IngestError> {
    match read_table(open(path.as_ref())?, map)? {
        Table::Raw(records) => process_records(&records, cfg),
        Table::Processed(dataset) => Ok(Windowed {
            dataset,
            rejects: Vec::new(),
        }),
    }
}

/// Parses a dataset from CSV text (either schema).
pub fn parse_dataset(text: &str, map: &ColumnMap, cfg: &PipelineConfig) -> Result<Windowed, IngestError> {
    match read_table(text.as_bytes(), map)? {
        Table::Raw(records) => process_records(&records, cfg),
        Table::Processed(dataset) => Ok(Windowed {
            dataset,
            rejects: Vec::new(),
        }),
    }
}

fn create(path: &Path) -> Result<File, IngestError> {
    File::create(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the processed schema `t,dp0,v1..,q1..` at full precision.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    let n = dataset.consumers;
    let mut header = vec!["t".to_string(), "dp0".to_string()];
    header.extend((1..=n).map(|k| format!("v{k}")));
    header.extend((1..=n).map(|k| format!("q{k}")));
    w.write_record(&header)?;
    for s in &dataset.samples {
        let mut row = vec![s.t.to_string(), s.dp0.to_string()];
        row.extend(s.v.iter().map(f64::to_string));
        row.extend(s.q.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes the raw schema `t,ft1..,pt1,pt2,v1..`.
pub fn save_raw(records: &[RawRecord], path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    let n = records.first().map_or(4, |r| r.ft.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|k| format!("ft{k}")));
    header.extend(["pt1".to_string(), "pt2".to_string()]);
    header.extend((1..=n).map(|k| format!("v{k}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.t.to_string()];
        row.extend(r.ft.iter().map(f64::to_string));
        row.extend([r.pt1.to_string(), r.pt2.to_string()]);
        row.extend(r.v.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))
}

/// One line per rejected window.
pub fn write_reject_log(rejects: &[WindowReject], path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    let mut f = create(path)?;
    for r in rejects {
        writeln!(f, "{r}").map_err(io_err(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: f64, ft: [f64; 4], pt: (f64, f64), v: [f64; 4]) -> RawRecord {
        RawRecord {
            t,
            ft: ft.to_vec(),
            pt1: pt.0,
            pt2: pt.1,
            v: v.to_vec(),
        }
    }

    fn constant_stream(n: usize) -> Vec<RawRecord> {
        (0..n)
            .map(|k| rec(k as f64, [10.0, 6.0, 3.0, 1.0], (7.0, 1.0), [0.5, 0.6, 0.7, 0.8]))
            .collect()
    }

    #[test]
    fn differencing_examples() {
        let r = rec(0.0, [10.0, 6.0, 3.0, 1.0], (5.0, 1.5), [0.0; 4]);
        assert_eq!(consumer_flows(&r), vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(root_dp(&r), 3.5);
        let r = rec(0.0, [2.5; 4], (1.0, 2.0), [0.0; 4]);
        assert_eq!(consumer_flows(&r), vec![0.0, 0.0, 0.0, 2.5]);
        assert_eq!(root_dp(&r), -1.0);
        let r = rec(0.0, [0.0; 4], (3.0, 3.0), [0.0; 4]);
        assert_eq!(consumer_flows(&r), vec![0.0; 4]);
        assert_eq!(root_dp(&r), 0.0);
    }

    #[test]
    fn constant_windows() {
        let w = windowed_samples(&constant_stream(120), 40.0, 10.0, DEFAULT_CLIP).unwrap();
        assert_eq!(w.dataset.len(), 3);
        assert!(w.rejects.is_empty());
        for s in w.dataset.samples() {
            assert_eq!(s.dp0, 6.0);
            assert_eq!(s.q, vec![4.0, 3.0, 2.0, 1.0]);
            assert_eq!(s.v, vec![0.5, 0.6, 0.7, 0.8]);
        }
        assert_eq!(w.dataset.samples()[2].t, 80.0);
        // trailing partial window is dropped
        let w2 = windowed_samples(&constant_stream(139), 40.0, 10.0, DEFAULT_CLIP).unwrap();
        assert_eq!(w2.dataset, w.dataset);
    }

    #[test]
    fn step_inside_discard() {
        let mut s = constant_stream(40);
        for r in s.iter_mut().filter(|r| r.t >= 5.0) {
            r.v[0] = 0.9;
        }
        let w = windowed_samples(&s, 40.0, 10.0, DEFAULT_CLIP).unwrap();
        assert_eq!(w.dataset.samples()[0].v[0], 0.9);
        // step after the discard period: 20 s at 0.5 and 10 s at 0.9
        let mut s = constant_stream(40);
        for r in s.iter_mut().filter(|r| r.t >= 30.0) {
            r.v[0] = 0.9;
        }
        let w = windowed_samples(&s, 40.0, 10.0, DEFAULT_CLIP).unwrap();
        assert!((w.dataset.samples()[0].v[0] - (20.0 * 0.5 + 10.0 * 0.9) / 30.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_gaps_pump_off_and_negative_flow() {
        let mut s = constant_stream(120);
        s.retain(|r| !(r.t > 50.0 && r.t < 56.0));
        for r in s.iter_mut().filter(|r| r.t >= 80.0) {
            r.pt1 = 0.5;
        }
        let w = windowed_samples(&s, 40.0, 10.0, DEFAULT_CLIP).unwrap();
        assert_eq!(w.dataset.len(), 1);
        assert_eq!(w.rejects.len(), 2);
        assert_eq!(w.rejects[0].window, 1);
        assert!(w.rejects[0].reason.contains("gap"));
        assert!(w.rejects[1].to_string().starts_with("window=2 start=80"));

        let mut s = constant_stream(80);
        for r in s.iter_mut() {
            r.ft[3] = 3.03;
        }
        for r in s.iter_mut().filter(|r| r.t >= 40.0) {
            r.ft[3] = 3.2;
        }
        let w = windowed_samples(&s, 40.0, 10.0, DEFAULT_CLIP).unwrap();
        assert_eq!(w.dataset.len(), 1);
        assert_eq!(w.dataset.samples()[0].q[2], 0.0);
        assert_eq!(w.rejects.len(), 1);
    }

    #[test]
    fn window_parameters_checked() {
        assert!(windowed_samples(&constant_stream(10), 10.0, 10.0, 0.05).is_err());
        assert!(windowed_samples(&constant_stream(10), 10.0, -1.0, 0.05).is_err());
    }

    #[test]
    fn filter_orders_agree_on_piecewise_constant_commands() {
        let mut s = constant_stream(160);
        for r in s.iter_mut() {
            r.v[1] = [0.5, 0.52, 0.6, 0.59][(r.t / 40.0) as usize];
        }
        let mut cfg = PipelineConfig {
            delta: 0.015,
            ..PipelineConfig::default()
        };
        let a = process_records(&s, &cfg).unwrap().dataset;
        cfg.filter_order = FilterOrder::AfterWindowing;
        let b = process_records(&s, &cfg).unwrap().dataset;
        assert_eq!(a.filtered_delta(), Some(0.015));
        let va: Vec<f64> = a.samples().iter().map(|s| s.v[1]).collect();
        let vb: Vec<f64> = b.samples().iter().map(|s| s.v[1]).collect();
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((va[2] - 0.585).abs() < 1e-12);
        assert!((va[3] - 0.585).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let w = windowed_samples(&constant_stream(120), 40.0, 10.0, DEFAULT_CLIP).unwrap();
        let mut ds = w.dataset;
        ds.samples[1].q[2] = 0.1 + 0.2;
        let p = dir.path().join("d.csv");
        save_dataset(&ds, &p).unwrap();
        let back = load_dataset(&p, &ColumnMap::default(), &PipelineConfig::default()).unwrap();
        assert_eq!(back.dataset, ds);
        let raw = dir.path().join("r.csv");
        save_raw(&constant_stream(80), &raw).unwrap();
        assert_eq!(load_raw(&raw, &ColumnMap::default()).unwrap(), constant_stream(80));
    }

    #[test]
    fn schema_errors() {
        let cfg = PipelineConfig::default();
        let map = ColumnMap::default();
        let text = "t,ft1,ft2,ft3,ft4,pt1,v1,v2,v3,v4\n0,1,1,1,1,2,0.5,0.5,0.5,0.5\n";
        match parse_dataset(text, &map, &cfg) {
            Err(IngestError::MissingColumn(c)) => assert_eq!(c, "pt2"),
            other => panic!("{other:?}"),
        }
        let text = "t,dp0,v1,q1\n1,2,0.5,1\n1,2,0.5,1\n";
        assert!(matches!(
            parse_dataset(text, &map, &cfg),
            Err(IngestError::NonMonotone { row: 2, .. })
        ));
        let text = "t,dp0,v1,q1\n1,NaN,0.5,1\n";
        assert!(matches!(
            parse_dataset(text, &map, &cfg),
            Err(IngestError::NotFinite { .. })
        ));
        let text = "t,dp0,v1,v2,v3,v4,q1,q2,q3,q4\n0,6,1,1,1,1,4,3,2,1\n40,6,1,1,1,1,4,3,2,1\n";
        let d = parse_dataset(text, &map, &cfg).unwrap().dataset;
        assert_eq!((d.len(), d.consumer_count()), (2, 4));
        assert!(matches!(
            parse_dataset("a,b\n1,2\n", &map, &cfg),
            Err(IngestError::MissingColumn(_))
        ));
    }

    #[test]
    fn column_mapping() {
        let mut map = ColumnMap::default();
        map.0.insert("pt2".into(), "PT_return".into());
        map.0.insert("t".into(), "time".into());
        let text = "time,ft1,pt1,PT_return,v1\n0,1,2,1,0.5\n1,1,2,1,0.5\n";
        let cfg = PipelineConfig {
            window: 2.0,
            discard: 0.0,
            ..PipelineConfig::default()
        };
        let d = parse_dataset(text, &map, &cfg).unwrap().dataset;
        assert_eq!(d.len(), 1);
        assert_eq!(d.samples()[0].dp0, 1.0);
    }
}
