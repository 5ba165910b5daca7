use crate::datagen::Dataset;
use crate::error::{ensure, Result};
use crate::model::Network;
use crate::tensor::{argmax, Real, Tensor3};

const EVAL_CHUNK: usize = 256;

/// Fraction of samples whose argmax prediction (lowest index on ties)
/// matches the label.
pub fn evaluate_accuracy<F: Real>(network: &Network<F>, data: &Dataset) -> Result<f64> {
    let labels = data.labels();
    ensure!(
        labels.is_some() && !data.is_empty(),
        InvalidArgument,
        "evaluation needs a non-empty labeled dataset"
    );
    let labels = labels.expect("checked");
    let mut correct = 0usize;
    for (chunk, ys) in data.samples.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let x: Vec<Tensor3<F>> = chunk.iter().map(|s| s.pixels.cast()).collect();
        let logits = network.forward(&x)?;
        correct += logits
            .iter_rows()
            .zip(ys)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::synth_glyph_dataset;
    use crate::model::ConvNetSpec;

    fn tiny_spec(k: usize) -> ConvNetSpec {
        ConvNetSpec::with_widths([1, 28, 28], [2, 2, 2], k)
    }

    #[test]
    fn zero_logits_pick_class_zero() {
        let data = synth_glyph_dataset(50, 10, 3).unwrap();
        let net = Network::<f32>::zeroed(tiny_spec(10)).unwrap();
        let acc = evaluate_accuracy(&net, &data).unwrap();
        let zeros = data.labels().unwrap().iter().filter(|&&y| y == 0).count();
        assert_eq!(acc, zeros as f64 / 50.0);
        assert_eq!(acc, 0.1);
    }

    #[test]
    fn order_invariant_and_requires_labels() {
        let data = synth_glyph_dataset(40, 4, 5).unwrap();
        let net = Network::<f32>::build(tiny_spec(4), 9).unwrap();
        let a = evaluate_accuracy(&net, &data).unwrap();
        let mut rev = data.clone();
        rev.samples.reverse();
        assert_eq!(a, evaluate_accuracy(&net, &rev).unwrap());
        let mut unlabeled = data;
        unlabeled.samples.iter_mut().for_each(|s| s.label = None);
        assert!(evaluate_accuracy(&net, &unlabeled).is_err());
    }
}
