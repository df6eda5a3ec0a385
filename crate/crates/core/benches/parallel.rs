//! Sequential vs rayon execution of the three batch-level workloads:
//! per-sample gradients of one training step, proposal generation over a
//! split, and the evaluation grid.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rapnet::anchors::AnchorSet;
use rapnet::data::{synth_dataset, Split, SynthConfig};
use rapnet::eval::{build_curve, DatasetStyle};
use rapnet::exec::Execution;
use rapnet::interval::Interval;
use rapnet::network::NetworkConfig;
use rapnet::pipeline::{propose, Model, ModelSpec, PostprocessConfig};
use rapnet::postprocess::RankerConfig;
use rapnet::train::{batch_gradients, TrainConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (rapnet::data::Dataset, Model) {
    let data = synth_dataset(&SynthConfig::default()).unwrap();
    let widths: Vec<f64> = data
        .split(Split::Train)
        .iter()
        .flat_map(|v| v.segments.iter().map(Interval::width))
        .collect();
    let spec = ModelSpec {
        network: NetworkConfig::desk(),
        anchors: AnchorSet::fit(&widths, 4, 2, 0).unwrap(),
        ranker: RankerConfig::default(),
    };
    (data, Model::init(spec, 0).unwrap())
}

fn bench_all(c: &mut Criterion) {
    let (data, model) = setup();
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    let cfg = TrainConfig::desk();
    let batch: Vec<usize> = (0..cfg.batch_size).collect();

    let mut g = c.benchmark_group("train_step_gradients");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(batch_gradients(&model, &batch, &train, &cfg, exec).unwrap()))
        });
    }
    g.finish();

    let pp = PostprocessConfig::base();
    let mut g = c.benchmark_group("propose_val_split");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(propose(&model, &val, &pp, exec).unwrap()))
        });
    }
    g.finish();

    let props = propose(&model, &train, &pp, Execution::Parallel).unwrap();
    let gts = data.ground_truth(Split::Train);
    let mut g = c.benchmark_group("eval_curve");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(build_curve(&props, &gts, DatasetStyle::Anet, exec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_all);
criterion_main!(benches);
