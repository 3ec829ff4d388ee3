//! Synthetic FMI workloads and the four execution models of the pipeline
//! evaluation: MONOTONE, SEQUENCE, PIPELINE and SUPER_PIPELINE.

use std::collections::BTreeMap;
use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::message::{Address, CorrelationId, Timestamp};
use crate::service::{ExecInterval, Reply, ServiceCall, ServiceError, ServiceHandler};
use crate::topology::{Network, TopologyError, TopologySpec};
use crate::transmission::RuntimeConfig;

pub const FMI_FACTOR: f64 = 1.0000001;

pub const STAGES: [&str; 3] = ["Service1", "Service2", "Service3"];

/// `n` dependent multiplications starting from `x`.
pub fn fmi_burn_from(x: f64, n: u64) -> f64 {
    let mut x = black_box(x);
    for _ in 0..n {
        x = black_box(x * FMI_FACTOR);
    }
    x
}

pub fn fmi_burn(n: u64) -> f64 {
    fmi_burn_from(1.0, n)
}

/// Handler for a pipeline stage. Params are `[item, value, next...]`: the
/// value is burned `fmi` times, then either handed to the next listed
/// service or returned as `[item, value]`.
pub fn stage_handler(fmi: u64) -> impl ServiceHandler {
    move |call: &ServiceCall<'_>| {
        let item = call.params.first().ok_or("missing item index")?.clone();
        let value: f64 = call
            .params
            .get(1)
            .ok_or("missing value")?
            .parse()
            .map_err(|e| format!("bad value: {e}"))?;
        let out = fmi_burn_from(value, fmi).to_string();
        match call.params.get(2) {
            Some(next) => {
                let mut params = vec![item, out];
                params.extend_from_slice(&call.params[3..]);
                Ok(Reply::Forward {
                    service: next.clone(),
                    params,
                })
            }
            None => Ok(Reply::Done(vec![item, out])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PipelineModel {
    Monotone,
    Sequence,
    Pipeline,
    SuperPipeline,
}

impl PipelineModel {
    pub const ALL: [PipelineModel; 4] = [
        PipelineModel::Monotone,
        PipelineModel::Sequence,
        PipelineModel::Pipeline,
        PipelineModel::SuperPipeline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineModel::Monotone => "MONOTONE",
            PipelineModel::Sequence => "SEQUENCE",
            PipelineModel::Pipeline => "PIPELINE",
            PipelineModel::SuperPipeline => "SUPER_PIPELINE",
        }
    }
}

impl fmt::Display for PipelineModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        match norm.as_str() {
            "MONOTONE" | "MONO" => Ok(PipelineModel::Monotone),
            "SEQUENCE" | "SEQ" => Ok(PipelineModel::Sequence),
            "PIPELINE" | "PIPE" => Ok(PipelineModel::Pipeline),
            "SUPER_PIPELINE" | "SUPER" | "SUPERPIPELINE" => Ok(PipelineModel::SuperPipeline),
            _ => Err(format!("unknown model {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkConfig {
    pub fmi: [u64; 3],
    pub items: usize,
    pub repeats: usize,
    /// Upper bound on one repeat of one model.
    pub timeout: Duration,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            fmi: [1_000_000, 2_000_000, 1_000_000],
            items: 100,
            repeats: 5,
            timeout: Duration::from_secs(120),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.fmi.contains(&0) {
            return Err(BenchError::InvalidConfig("fmi counts must be positive".into()));
        }
        if self.items == 0 || self.repeats == 0 {
            return Err(BenchError::InvalidConfig("items and repeats must be positive".into()));
        }
        Ok(())
    }

    /// Value every item carries out of the last stage.
    pub fn expected_output(&self) -> f64 {
        let [a, b, c] = self.fmi;
        fmi_burn_from(fmi_burn_from(fmi_burn(a), b), c)
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("item {item}: {source}")]
    Stage { item: usize, source: ServiceError },
    #[error("sink received {got} items, expected {expected}")]
    ItemCount { expected: usize, got: usize },
    #[error("item {item}: output {got} differs from expected {expected}")]
    Mismatch { item: usize, expected: f64, got: f64 },
    #[error("malformed stage result {0:?}")]
    Malformed(Vec<String>),
    #[error("results lack {0}")]
    MissingModel(PipelineModel),
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelResult {
    pub model: PipelineModel,
    pub fmi: [u64; 3],
    pub items: usize,
    pub repeats: usize,
    pub repeat_ms: Vec<f64>,
    pub median_ms: f64,
    /// Summed execution time per stage in the last repeat.
    pub stage_busy_ms: BTreeMap<String, f64>,
    #[serde(skip)]
    pub intervals: Vec<ExecInterval>,
    #[serde(skip)]
    pub outputs: Vec<f64>,
}

impl ModelResult {
    pub fn items_per_second(&self) -> f64 {
        self.items as f64 / (self.median_ms / 1000.0)
    }
}

pub fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs `model` `cfg.repeats` times and checks every item's result.
pub fn run_model(model: PipelineModel, cfg: &BenchmarkConfig) -> Result<ModelResult, BenchError> {
    cfg.validate()?;
    let expected = cfg.expected_output();
    let net = match model {
        PipelineModel::Monotone => None,
        _ => {
            let spec = TopologySpec::evaluation(cfg.fmi, model == PipelineModel::SuperPipeline);
            let config = RuntimeConfig::default().with_trace(false);
            Some(Network::start(&spec, config)?)
        }
    };
    let mut repeat_ms = Vec::with_capacity(cfg.repeats);
    let mut last = (Vec::new(), Vec::new());
    for _ in 0..cfg.repeats {
        if let Some(net) = &net {
            clear_logs(net);
        }
        let started = Instant::now();
        let (outputs, local) = match &net {
            None => run_monotone(cfg),
            Some(net) => (process_items(model, Some(net), cfg)?, Vec::new()),
        };
        repeat_ms.push(started.elapsed().as_secs_f64() * 1000.0);
        check_outputs(cfg, expected, &outputs)?;
        let intervals = match &net {
            Some(net) => collect_logs(net),
            None => local,
        };
        last = (outputs.into_iter().map(|(_, v)| v).collect(), intervals);
    }
    if let Some(net) = net {
        if let Err(e) = net.shutdown() {
            log::warn!("benchmark network shutdown: {e}");
        }
    }
    let (outputs, intervals) = last;
    let mut stage_busy_ms = BTreeMap::new();
    for iv in &intervals {
        *stage_busy_ms.entry(iv.service.clone()).or_insert(0.0) +=
            iv.end.nanos().saturating_sub(iv.start.nanos()) as f64 / 1e6;
    }
    Ok(ModelResult {
        model,
        fmi: cfg.fmi,
        items: cfg.items,
        repeats: cfg.repeats,
        median_ms: median(&repeat_ms),
        repeat_ms,
        stage_busy_ms,
        intervals,
        outputs,
    })
}

/// Pushes `cfg.items` items through `model` once and returns
/// `(item, value)` pairs in completion order. Every model except MONOTONE
/// needs a registered evaluation network.
pub fn process_items(
    model: PipelineModel,
    net: Option<&Network>,
    cfg: &BenchmarkConfig,
) -> Result<Vec<(usize, f64)>, BenchError> {
    match (model, net) {
        (PipelineModel::Monotone, _) => Ok(run_monotone(cfg).0),
        (PipelineModel::Sequence, Some(net)) => run_sequence(net, cfg),
        (_, Some(net)) => run_pipeline(net, cfg),
        (_, None) => Err(BenchError::InvalidConfig(format!("{model} needs a network"))),
    }
}

fn run_monotone(cfg: &BenchmarkConfig) -> (Vec<(usize, f64)>, Vec<ExecInterval>) {
    let mut out = Vec::with_capacity(cfg.items);
    let mut intervals = Vec::with_capacity(cfg.items * 3);
    for item in 0..cfg.items {
        let mut v = 1.0;
        for (stage, fmi) in STAGES.iter().zip(cfg.fmi) {
            let start = Timestamp::now();
            v = fmi_burn_from(v, fmi);
            intervals.push(ExecInterval {
                service: stage.to_string(),
                provider: Address(0),
                correlation_id: CorrelationId(item as u64),
                start,
                end: Timestamp::now(),
            });
        }
        out.push((item, v));
    }
    (out, intervals)
}

fn run_sequence(net: &Network, cfg: &BenchmarkConfig) -> Result<Vec<(usize, f64)>, BenchError> {
    let master = net.master();
    let deadline = Instant::now() + cfg.timeout;
    let mut out = Vec::with_capacity(cfg.items);
    for item in 0..cfg.items {
        let mut params = vec![item.to_string(), 1.0f64.to_string()];
        for stage in STAGES {
            let left = deadline.saturating_duration_since(Instant::now());
            params = master
                .call(stage, params, left)
                .map_err(|source| BenchError::Stage { item, source })?;
        }
        out.push(parse_result(&params)?);
    }
    Ok(out)
}

fn run_pipeline(net: &Network, cfg: &BenchmarkConfig) -> Result<Vec<(usize, f64)>, BenchError> {
    let master = net.master();
    let deadline = Instant::now() + cfg.timeout;
    let mut handles = Vec::with_capacity(cfg.items);
    for item in 0..cfg.items {
        let params = vec![item.to_string(), 1.0f64.to_string(), STAGES[1].into(), STAGES[2].into()];
        let handle = master
            .submit(STAGES[0], params)
            .map_err(|source| BenchError::Stage { item, source })?;
        handles.push(handle);
    }
    let mut out = Vec::with_capacity(cfg.items);
    for (item, handle) in handles.into_iter().enumerate() {
        let left = deadline.saturating_duration_since(Instant::now());
        let payload = handle
            .wait(left)
            .map_err(|source| BenchError::Stage { item, source })?;
        out.push(parse_result(&payload)?);
    }
    Ok(out)
}

fn parse_result(payload: &[String]) -> Result<(usize, f64), BenchError> {
    let malformed = || BenchError::Malformed(payload.to_vec());
    match payload {
        [item, value] => Ok((
            item.parse().map_err(|_| malformed())?,
            value.parse().map_err(|_| malformed())?,
        )),
        _ => Err(malformed()),
    }
}

fn check_outputs(cfg: &BenchmarkConfig, expected: f64, outputs: &[(usize, f64)]) -> Result<(), BenchError> {
    if outputs.len() != cfg.items {
        return Err(BenchError::ItemCount {
            expected: cfg.items,
            got: outputs.len(),
        });
    }
    let mut seen = vec![false; cfg.items];
    for &(item, got) in outputs {
        if item >= cfg.items || std::mem::replace(&mut seen[item], true) {
            return Err(BenchError::ItemCount {
                expected: cfg.items,
                got: outputs.len(),
            });
        }
        if got != expected {
            return Err(BenchError::Mismatch { item, expected, got });
        }
    }
    Ok(())
}

fn providers(net: &Network) -> impl Iterator<Item = &crate::service::ServiceNode> {
    net.ids().iter().filter_map(|(id, _)| net.node(id)).filter(|n| !n.local_services().is_empty())
}

fn clear_logs(net: &Network) {
    for n in providers(net) {
        n.execution_log().clear();
    }
}

fn collect_logs(net: &Network) -> Vec<ExecInterval> {
    let mut all: Vec<ExecInterval> = providers(net).flat_map(|n| n.execution_log().snapshot()).collect();
    all.sort_by_key(|i| i.start);
    all
}

/// T_monotone / T_super_pipeline.
pub fn compute_speedup(results: &[ModelResult]) -> Result<f64, BenchError> {
    let time = |m: PipelineModel| {
        results
            .iter()
            .find(|r| r.model == m)
            .map(|r| r.median_ms)
            .ok_or(BenchError::MissingModel(m))
    };
    Ok(time(PipelineModel::Monotone)? / time(PipelineModel::SuperPipeline)?)
}

pub fn run_models(models: &[PipelineModel], cfg: &BenchmarkConfig) -> Result<Vec<ModelResult>, BenchError> {
    models.iter().map(|&m| run_model(m, cfg)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub fmi: [u64; 3],
    pub monotone_ms: f64,
    pub super_ms: f64,
    pub speedup: f64,
}

/// Speedup of SUPER_PIPELINE over MONOTONE for each per-service level `n`,
/// using the stage costs `(n, 2n, n)`.
pub fn sweep(levels: &[u64], items: usize, repeats: usize) -> Result<Vec<SweepPoint>, BenchError> {
    levels
        .iter()
        .map(|&n| {
            let cfg = BenchmarkConfig {
                fmi: [n, 2 * n, n],
                items,
                repeats,
                ..BenchmarkConfig::default()
            };
            let mono = run_model(PipelineModel::Monotone, &cfg)?;
            let sup = run_model(PipelineModel::SuperPipeline, &cfg)?;
            Ok(SweepPoint {
                fmi: cfg.fmi,
                monotone_ms: mono.median_ms,
                super_ms: sup.median_ms,
                speedup: mono.median_ms / sup.median_ms,
            })
        })
        .collect()
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub model: String,
    pub fmi1: u64,
    pub fmi2: u64,
    pub fmi3: u64,
    pub items: usize,
    pub repeats: usize,
    pub median_ms: f64,
    /// T_monotone of the same configuration over this model's time.
    pub speedup: Option<f64>,
}

pub fn table(results: &[ModelResult]) -> Vec<BenchRow> {
    results
        .iter()
        .map(|r| {
            let mono = results
                .iter()
                .find(|m| m.model == PipelineModel::Monotone && m.fmi == r.fmi && m.items == r.items);
            BenchRow {
                model: r.model.to_string(),
                fmi1: r.fmi[0],
                fmi2: r.fmi[1],
                fmi3: r.fmi[2],
                items: r.items,
                repeats: r.repeats,
                median_ms: r.median_ms,
                speedup: mono.map(|m| m.median_ms / r.median_ms),
            }
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct JsonRow<'a> {
    #[serde(flatten)]
    row: &'a BenchRow,
    repeat_ms: &'a [f64],
    stage_busy_ms: &'a BTreeMap<String, f64>,
}

/// JSON array of rows; each row also carries the per-repeat times and the
/// per-stage busy time.
pub fn write_json<W: Write>(results: &[ModelResult], out: W) -> serde_json::Result<()> {
    let rows = table(results);
    let json: Vec<JsonRow<'_>> = rows
        .iter()
        .zip(results)
        .map(|(row, r)| JsonRow {
            row,
            repeat_ms: &r.repeat_ms,
            stage_busy_ms: &r.stage_busy_ms,
        })
        .collect();
    serde_json::to_writer_pretty(out, &json)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn burn_counts_multiplications() {
        assert_eq!(fmi_burn(1), 1.0000001);
        assert_eq!(fmi_burn(2), 1.0000001 * 1.0000001);
        assert_eq!(fmi_burn(0), 1.0);
        assert_eq!(fmi_burn_from(fmi_burn(3), 4), fmi_burn(7));
    }

    #[test]
    fn model_names_round_trip() {
        for m in PipelineModel::ALL {
            assert_eq!(m.as_str().parse::<PipelineModel>(), Ok(m));
        }
        assert_eq!("super-pipeline".parse(), Ok(PipelineModel::SuperPipeline));
        assert!("turbo".parse::<PipelineModel>().is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn stage_handler_forwards_then_finishes() {
        let h = stage_handler(2);
        let params: Vec<String> = vec!["7".into(), "1".into(), "Service2".into(), "Service3".into()];
        let call = ServiceCall {
            name: "Service1",
            params: &params,
            creator: Address(0),
            correlation_id: CorrelationId(1),
            provider: Address(1),
        };
        match h.call(&call).unwrap() {
            Reply::Forward { service, params } => {
                assert_eq!(service, "Service2");
                assert_eq!(params[0], "7");
                assert_eq!(params[1].parse::<f64>().unwrap(), fmi_burn(2));
                assert_eq!(params[2], "Service3");
            }
            other => panic!("unexpected {other:?}"),
        }
        let last: Vec<String> = vec!["7".into(), "1".into()];
        let call = ServiceCall { params: &last, ..call };
        assert_eq!(h.call(&call).unwrap(), Reply::Done(vec!["7".into(), fmi_burn(2).to_string()]));
    }
}
