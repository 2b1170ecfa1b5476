use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mmsr_core::infer::{plan_tiles, super_resolve_slice};
use mmsr_core::nn::{build_sr_generator, SrGeneratorSpec};
use mmsr_core::par::{set_execution, Execution};
use mmsr_core::tensor::Tensor;
use mmsr_core::ImagePatch;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn slice(h: usize, w: usize) -> ImagePatch {
    ImagePatch::from_fn(h, w, |r, c| ((r * 13 + c * 7) % 29) as f64 / 14.5 - 1.0)
}

fn generator_forward(c: &mut Criterion) {
    let g = build_sr_generator(
        SrGeneratorSpec {
            base_width: 8,
            n_res_blocks: 2,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let input = Tensor::from_patch(&slice(32, 32));
    let mut group = c.benchmark_group("sr_generator_32x32");
    group.sample_size(10);
    for (name, mode) in MODES {
        set_execution(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| g.forward(black_box(&input)).unwrap())
        });
    }
    group.finish();
    set_execution(Execution::Parallel);
}

fn tiled_slice(c: &mut Criterion) {
    let g = build_sr_generator(
        SrGeneratorSpec {
            base_width: 4,
            n_res_blocks: 1,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let input = slice(48, 48);
    let plan = plan_tiles(input.dims(), 32, 8).unwrap();
    let mut group = c.benchmark_group("tiled_slice_48x48");
    group.sample_size(10);
    for (name, mode) in MODES {
        set_execution(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| super_resolve_slice(&g, black_box(&input), &plan).unwrap())
        });
    }
    group.finish();
    set_execution(Execution::Parallel);
}

criterion_group!(benches, generator_forward, tiled_slice);
criterion_main!(benches);
