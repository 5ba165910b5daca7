use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use attalign::datagen::synth_glyph_dataset;
use attalign::model::{ConvNetSpec, Network, TapGrads};
use attalign::par::Exec;
use attalign::tensor::{Matrix, Tensor3};

fn inputs(n: usize) -> Vec<Tensor3<f32>> {
    synth_glyph_dataset(n, 10, 7)
        .unwrap()
        .samples
        .into_iter()
        .map(|s| s.pixels)
        .collect()
}

fn forward_backward(c: &mut Criterion) {
    let spec = ConvNetSpec::with_widths([1, 28, 28], [8, 16, 32], 10);
    let xs = inputs(32);
    let mut group = c.benchmark_group("forward_backward_b32");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let mut net = Network::<f32>::build(spec.clone(), 1).unwrap();
        net.exec = exec;
        group.bench_with_input(BenchmarkId::new("forward", format!("{exec:?}")), &xs, |b, xs| {
            b.iter(|| net.forward_with_taps(xs).unwrap())
        });
        let fwd = net.forward_with_taps(&xs).unwrap();
        let dl = Matrix::from_rows(&vec![vec![0.1f32; 10]; xs.len()]);
        group.bench_with_input(BenchmarkId::new("backward", format!("{exec:?}")), &fwd, |b, fwd| {
            b.iter(|| net.backward(fwd, &dl, &TapGrads::new()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
