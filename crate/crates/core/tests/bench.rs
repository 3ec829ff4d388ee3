use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use protonet::bench::{
    compute_speedup, fmi_burn, run_model, table, write_csv, write_json, BenchError, BenchmarkConfig, ModelResult,
    PipelineModel,
};
use protonet::service::{count_overlaps, ExecInterval};

fn cfg(fmi: [u64; 3], items: usize, repeats: usize) -> BenchmarkConfig {
    BenchmarkConfig {
        fmi,
        items,
        repeats,
        timeout: Duration::from_secs(60),
    }
}

fn result(model: PipelineModel, median_ms: f64) -> ModelResult {
    ModelResult {
        model,
        fmi: [1, 2, 1],
        items: 1,
        repeats: 1,
        repeat_ms: vec![median_ms],
        median_ms,
        stage_busy_ms: BTreeMap::new(),
        intervals: Vec::new(),
        outputs: Vec::new(),
    }
}

#[test]
fn minimal_monotone_threads_the_value() {
    let r = run_model(PipelineModel::Monotone, &cfg([1, 1, 1], 1, 1)).unwrap();
    assert_eq!(r.outputs, vec![1.0000001f64 * 1.0000001 * 1.0000001]);
}

#[test]
fn every_model_processes_every_item_with_the_same_result() {
    let c = cfg([100, 200, 100], 25, 2);
    let expected = fmi_burn(400);
    for model in PipelineModel::ALL {
        let r = run_model(model, &c).unwrap();
        assert_eq!(r.outputs.len(), 25, "{model}");
        assert!(r.outputs.iter().all(|&v| v == expected), "{model}");
        assert_eq!(r.repeat_ms.len(), 2);
        assert!(r.median_ms > 0.0);
        assert_eq!(r.intervals.len(), 75, "{model}");
    }
}

fn by_item(intervals: &[ExecInterval]) -> BTreeMap<u64, Vec<&ExecInterval>> {
    let mut m: BTreeMap<u64, Vec<&ExecInterval>> = BTreeMap::new();
    for iv in intervals {
        m.entry(iv.correlation_id.0).or_default().push(iv);
    }
    m
}

#[test]
fn pipeline_stages_run_in_order_per_item() {
    let r = run_model(PipelineModel::Pipeline, &cfg([1_000, 2_000, 1_000], 20, 1)).unwrap();
    // a pipelined item keeps one correlation id through all stages
    let items = by_item(&r.intervals);
    assert_eq!(items.len(), 20);
    for stages in items.values() {
        let names: Vec<&str> = stages.iter().map(|s| s.service.as_str()).collect();
        assert_eq!(names, ["Service1", "Service2", "Service3"]);
        assert!(stages[0].end <= stages[1].start && stages[1].end <= stages[2].start);
    }
}

#[test]
fn super_pipeline_alternates_service2_providers() {
    let r = run_model(PipelineModel::SuperPipeline, &cfg([10, 20, 10], 40, 1)).unwrap();
    let mut per_provider: BTreeMap<_, usize> = BTreeMap::new();
    for iv in r.intervals.iter().filter(|i| i.service == "Service2") {
        *per_provider.entry(iv.provider).or_default() += 1;
    }
    assert_eq!(per_provider.values().copied().collect::<Vec<_>>(), vec![20, 20]);
}

#[test]
fn pipeline_overlaps_stages_but_sequential_models_do_not() {
    let c = cfg([300_000, 600_000, 300_000], 12, 1);
    let pipe = run_model(PipelineModel::Pipeline, &c).unwrap();
    assert!(count_overlaps(&pipe.intervals) > 0);
    for model in [PipelineModel::Monotone, PipelineModel::Sequence] {
        let r = run_model(model, &c).unwrap();
        assert_eq!(count_overlaps(&r.intervals), 0, "{model}");
    }
}

#[test]
fn speedup_definition() {
    let rs = [result(PipelineModel::Monotone, 4000.0), result(PipelineModel::SuperPipeline, 2000.0)];
    assert_eq!(compute_speedup(&rs).unwrap(), 2.0);
    let rs = [result(PipelineModel::Monotone, 10.0), result(PipelineModel::SuperPipeline, 10.0)];
    assert_eq!(compute_speedup(&rs).unwrap(), 1.0);
    assert!(matches!(
        compute_speedup(&[result(PipelineModel::Monotone, 1.0)]),
        Err(BenchError::MissingModel(PipelineModel::SuperPipeline))
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(matches!(run_model(PipelineModel::Monotone, &cfg([0, 1, 1], 1, 1)), Err(BenchError::InvalidConfig(_))));
    assert!(matches!(run_model(PipelineModel::Sequence, &cfg([1, 1, 1], 0, 1)), Err(BenchError::InvalidConfig(_))));
    assert!(matches!(run_model(PipelineModel::Pipeline, &cfg([1, 1, 1], 1, 0)), Err(BenchError::InvalidConfig(_))));
}

#[test]
fn results_table_columns() {
    let rs = [
        result(PipelineModel::Monotone, 30.0),
        result(PipelineModel::Sequence, 40.0),
        result(PipelineModel::SuperPipeline, 15.0),
    ];
    let rows = table(&rs);
    assert_eq!(rows[0].speedup, Some(1.0));
    assert_eq!(rows[2].speedup, Some(2.0));
    let mut csv = Vec::new();
    write_csv(&rows, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("model,fmi1,fmi2,fmi3,items,repeats,median_ms,speedup"));
    assert_eq!(lines.next(), Some("MONOTONE,1,2,1,1,1,30.0,1.0"));
    assert_eq!(lines.count(), 2);

    let mut json = Vec::new();
    write_json(&rs, &mut json).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
    assert_eq!(v[1]["model"], "SEQUENCE");
    assert_eq!(v[1]["repeat_ms"][0], 40.0);
    assert_eq!(v[2]["speedup"], 2.0);
}

#[test]
fn burn_time_scales_linearly() {
    let time = |n: u64| {
        (0..3)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(fmi_burn(n));
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    time(1_000_000);
    let ratio = time(10_000_000) / time(1_000_000);
    assert!((8.0..=12.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn service2_is_the_pipeline_bottleneck() {
    // stage intervals are wall time; on one core they absorb preemption by
    // the other stages, so the contention-free SEQUENCE run stands in there
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let model = if cores >= 2 { PipelineModel::Pipeline } else { PipelineModel::Sequence };
    let c = BenchmarkConfig { repeats: 1, ..BenchmarkConfig::default() };
    let r = run_model(model, &c).unwrap();
    let ratio = r.stage_busy_ms["Service2"] / r.stage_busy_ms["Service1"];
    eprintln!("{model} on {cores} cores: Service2/Service1 busy ratio {ratio:.2}");
    assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
}
