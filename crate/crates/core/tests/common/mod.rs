#![allow(dead_code)]

pub mod checks;

use attalign::datagen::{compose_batch, make_domain_pair_datasets, Batch, BatchComposition, Dataset, Domain, DomainStreams, ImageSample};
use attalign::model::{ConvNetSpec, Network};
use attalign::tensor::Tensor3;
use attalign::translation::StyleMapConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 8;
pub const K: usize = 3;

/// Random 8x8 images with labels, values in [0, 1].
pub fn random_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| ImageSample {
            pixels: Tensor3::from_vec(1, SIDE, SIDE, (0..SIDE * SIDE).map(|_| rng.random::<f32>()).collect()),
            label: Some(i % K),
            domain: Domain::RealSource,
            pair_id: i as u64,
        })
        .collect();
    Dataset { samples, num_classes: K }
}

pub fn streams(seed: u64) -> DomainStreams {
    let params = StyleMapConfig::digit_style(SIDE, SIDE, 5).build().unwrap();
    make_domain_pair_datasets(&random_dataset(40, seed), &params).unwrap()
}

pub fn batch(streams: &DomainStreams, size: usize, step: u64) -> Batch {
    let comp = BatchComposition {
        fractions: [0.35, 0.15, 0.35, 0.15],
        batch_size: size,
    };
    compose_batch(streams, &comp, 11, step).unwrap()
}

pub fn mini_spec() -> ConvNetSpec {
    ConvNetSpec::with_widths([1, SIDE, SIDE], [2, 3, 3], K)
}

pub fn mini_net(seed: u64) -> Network<f64> {
    Network::build(mini_spec(), seed).unwrap()
}

/// Central differences of `loss` over every parameter of `net`.
pub fn numeric_grad(net: &Network<f64>, h: f64, loss: impl Fn(&Network<f64>) -> f64) -> Vec<f64> {
    let mut probe = net.clone();
    (0..net.num_params())
        .map(|i| {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.params_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.params_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error. Components smaller than `floor`
/// times the largest gradient entry (or `floor` itself, whichever is bigger)
/// are measured against that level, since central differences carry an
/// absolute round-off of roughly machine epsilon times the loss over `h`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let floor = floor * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
