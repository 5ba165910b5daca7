use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, ConvGeom};
use super::spec::{hex_digest, Activation, ConvNetSpec, LayerShapes, Pool};
use crate::error::{ensure, Error, Result};
use crate::par::{self, Exec};
use crate::tensor::{softmax_row, Matrix, Real, Tensor3};

/// Samples per gradient-accumulation chunk. Fixed so the reduction order (and
/// therefore the result) does not depend on the number of threads.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy)]
struct ParamRange {
    weights: (usize, usize),
    bias: (usize, usize),
}

/// Immutable parameter values tagged with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamsSnapshot<F> {
    spec_hash: String,
    values: Arc<Vec<F>>,
}

impl<F: Real> ParamsSnapshot<F> {
    pub fn new(spec_hash: String, values: Vec<F>) -> Self {
        Self {
            spec_hash,
            values: Arc::new(values),
        }
    }

    pub fn spec_hash(&self) -> &str {
        &self.spec_hash
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    /// SHA-256 over the little-endian f64 image of every parameter.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in self.values.iter() {
            bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        hex_digest(&bytes)
    }

    pub fn cast<G: Real>(&self) -> ParamsSnapshot<G> {
        ParamsSnapshot::new(
            self.spec_hash.clone(),
            self.values
                .iter()
                .map(|v| G::from_f64(v.to_f64_lossy()).unwrap_or_else(G::nan))
                .collect(),
        )
    }
}

/// Per-sample state kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
struct LayerCache<F> {
    input: Tensor3<F>,
    activated: Tensor3<F>,
    pool_index: Vec<u32>,
}

#[derive(Debug, Clone)]
struct SampleTrace<F> {
    layers: Vec<LayerCache<F>>,
}

#[derive(Debug, Clone)]
pub struct ForwardResult<F> {
    pub logits: Matrix<F>,
    /// layer index → one feature map per sample
    pub taps: BTreeMap<usize, Vec<Tensor3<F>>>,
    traces: Vec<SampleTrace<F>>,
    spec_hash: String,
}

impl<F: Real> ForwardResult<F> {
    pub fn batch_len(&self) -> usize {
        self.logits.rows
    }

    pub fn probs(&self) -> Matrix<F> {
        let rows: Vec<Vec<F>> = self.logits.iter_rows().map(softmax_row).collect();
        Matrix::from_rows(&rows)
    }

    pub fn tap(&self, layer: usize) -> Result<&[Tensor3<F>]> {
        self.taps
            .get(&layer)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} is not tapped")))
    }
}

/// Sparse upstream gradients with respect to tapped feature maps.
#[derive(Debug, Clone, Default)]
pub struct TapGrads<F> {
    grads: BTreeMap<usize, BTreeMap<usize, Tensor3<F>>>,
}

impl<F: Real> TapGrads<F> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Add `g` into the gradient of `layer`'s tap for `sample`.
    pub fn accumulate(&mut self, layer: usize, sample: usize, g: &Tensor3<F>) {
        let slot = self
            .grads
            .entry(layer)
            .or_default()
            .entry(sample)
            .or_insert_with(|| Tensor3::zeros(g.channels, g.height, g.width));
        for (a, &b) in slot.data.iter_mut().zip(&g.data) {
            *a += b;
        }
    }

    pub fn get(&self, layer: usize, sample: usize) -> Option<&Tensor3<F>> {
        self.grads.get(&layer).and_then(|m| m.get(&sample))
    }

    pub fn scale(&mut self, factor: F) {
        for per_layer in self.grads.values_mut() {
            for t in per_layer.values_mut() {
                for v in &mut t.data {
                    *v *= factor;
                }
            }
        }
    }

    /// Re-key samples through `map` (old index → new index).
    pub fn remap_samples(self, map: impl Fn(usize) -> usize) -> Self {
        let grads = self
            .grads
            .into_iter()
            .map(|(l, per)| (l, per.into_iter().map(|(s, t)| (map(s), t)).collect()))
            .collect();
        Self { grads }
    }
}

/// Small CNN with per-layer feature taps and manual backpropagation.
#[derive(Debug, Clone)]
pub struct Network<F> {
    spec: ConvNetSpec,
    shapes: Vec<LayerShapes>,
    ranges: Vec<ParamRange>,
    params: Vec<F>,
    spec_hash: String,
    pub exec: Exec,
}

impl<F: Real> Network<F> {
    /// Fan-in-scaled uniform weights `U(−√(6/fan_in), √(6/fan_in))`, zero
    /// biases. Values are drawn in f64 so f32 and f64 builds agree.
    pub fn build(spec: ConvNetSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, r) in net.ranges.clone().iter().enumerate() {
            let l = &net.spec.layers[i];
            let fan_in = net.shapes[i].input[0] * l.kernel * l.kernel;
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut net.params[r.weights.0..r.weights.1] {
                *p = F::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    /// All parameters zero.
    pub fn zeroed(spec: ConvNetSpec) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut ranges = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (l, s) in spec.layers.iter().zip(&shapes) {
            let nw = l.out_channels * s.input[0] * l.kernel * l.kernel;
            ranges.push(ParamRange {
                weights: (offset, offset + nw),
                bias: (offset + nw, offset + nw + l.out_channels),
            });
            offset += nw + l.out_channels;
        }
        let spec_hash = spec.hash();
        Ok(Self {
            spec,
            shapes,
            ranges,
            params: vec![F::zero(); offset],
            spec_hash,
            exec: Exec::default(),
        })
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    pub fn spec_hash(&self) -> &str {
        &self.spec_hash
    }

    pub fn layer_shapes(&self) -> &[LayerShapes] {
        &self.shapes
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn snapshot(&self) -> ParamsSnapshot<F> {
        ParamsSnapshot::new(self.spec_hash.clone(), self.params.clone())
    }

    /// Overwrite parameters with `src`. Optimizer state lives elsewhere and is
    /// not touched.
    pub fn sync_params(&mut self, src: &ParamsSnapshot<F>) -> Result<()> {
        if src.spec_hash != self.spec_hash {
            return Err(Error::SpecMismatch {
                expected: self.spec_hash.clone(),
                found: src.spec_hash.clone(),
            });
        }
        ensure!(
            src.values.len() == self.params.len(),
            Shape,
            "snapshot has {} parameters, network has {}",
            src.values.len(),
            self.params.len()
        );
        self.params.copy_from_slice(&src.values);
        Ok(())
    }

    pub fn from_snapshot(spec: ConvNetSpec, src: &ParamsSnapshot<F>) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        net.sync_params(src)?;
        Ok(net)
    }

    fn geom(&self, i: usize) -> ConvGeom {
        let (l, s) = (&self.spec.layers[i], &self.shapes[i]);
        ConvGeom {
            in_c: s.input[0],
            in_h: s.input[1],
            in_w: s.input[2],
            out_c: s.conv[0],
            out_h: s.conv[1],
            out_w: s.conv[2],
            kernel: l.kernel,
            stride: l.stride,
            padding: l.padding,
        }
    }

    fn forward_sample(&self, x: &Tensor3<F>) -> (Vec<F>, SampleTrace<F>) {
        let mut cur = x.clone();
        let mut layers = Vec::with_capacity(self.spec.layers.len());
        let mut logits = Vec::new();
        for (i, l) in self.spec.layers.iter().enumerate() {
            let r = self.ranges[i];
            let mut z = ops::conv_forward(
                &self.geom(i),
                &cur,
                &self.params[r.weights.0..r.weights.1],
                &self.params[r.bias.0..r.bias.1],
            );
            if l.activation == Activation::Relu {
                ops::relu_inplace(&mut z);
            }
            let (next, pool_index) = match l.pool {
                Pool::None => (z.clone(), Vec::new()),
                Pool::Max2 => ops::maxpool2_forward(&z),
                Pool::GlobalAvg => {
                    let n = F::from_usize(z.plane_len()).expect("plane size");
                    logits = (0..z.channels)
                        .map(|c| z.channel(c).iter().copied().sum::<F>() / n)
                        .collect();
                    (Tensor3::zeros(0, 0, 0), Vec::new())
                }
            };
            layers.push(LayerCache {
                input: std::mem::replace(&mut cur, next),
                activated: z,
                pool_index,
            });
        }
        (logits, SampleTrace { layers })
    }

    fn check_input(&self, x: &[Tensor3<F>]) -> Result<()> {
        for (i, t) in x.iter().enumerate() {
            ensure!(
                t.shape() == self.spec.input,
                Shape,
                "input {i} has shape {:?}, network expects {:?}",
                t.shape(),
                self.spec.input
            );
        }
        Ok(())
    }

    /// Logits and every tapped feature map, retaining what backprop needs.
    pub fn forward_with_taps(&self, x: &[Tensor3<F>]) -> Result<ForwardResult<F>> {
        self.check_input(x)?;
        let outs = par::map(self.exec, x, |s| self.forward_sample(s));
        let k = self.spec.num_classes;
        let mut logits = Matrix::zeros(outs.len(), k);
        let mut taps: BTreeMap<usize, Vec<Tensor3<F>>> = self
            .spec
            .tap_layers
            .iter()
            .map(|&t| (t, Vec::with_capacity(outs.len())))
            .collect();
        let mut traces = Vec::with_capacity(outs.len());
        for (i, (row, trace)) in outs.into_iter().enumerate() {
            logits.row_mut(i).copy_from_slice(&row);
            for (&t, maps) in taps.iter_mut() {
                maps.push(trace.layers[t].activated.clone());
            }
            traces.push(trace);
        }
        Ok(ForwardResult {
            logits,
            taps,
            traces,
            spec_hash: self.spec_hash.clone(),
        })
    }

    /// Logits only.
    pub fn forward(&self, x: &[Tensor3<F>]) -> Result<Matrix<F>> {
        self.check_input(x)?;
        let rows = par::map(self.exec, x, |s| self.forward_sample(s).0);
        Ok(Matrix::from_rows(&rows))
    }

    /// Row-wise softmax of the logits.
    pub fn predict_probs(&self, x: &[Tensor3<F>]) -> Result<Matrix<F>> {
        let logits = self.forward(x)?;
        let rows: Vec<Vec<F>> = logits.iter_rows().map(softmax_row).collect();
        Ok(Matrix::from_rows(&rows))
    }

    fn backward_sample(
        &self,
        trace: &SampleTrace<F>,
        sample: usize,
        dlogits: &[F],
        dtaps: &TapGrads<F>,
        grad: &mut [F],
    ) {
        let last = self.spec.classifier_index();
        let mut upstream: Option<Tensor3<F>> = None;
        for i in (0..=last).rev() {
            let l = &self.spec.layers[i];
            let cache = &trace.layers[i];
            let [c, h, w] = self.shapes[i].conv;
            let mut dz = match l.pool {
                Pool::GlobalAvg => {
                    let n = F::from_usize(h * w).expect("plane size");
                    let mut t = Tensor3::zeros(c, h, w);
                    for ch in 0..c {
                        let g = dlogits[ch] / n;
                        t.data[ch * h * w..(ch + 1) * h * w].fill(g);
                    }
                    t
                }
                Pool::Max2 => ops::maxpool2_backward(
                    upstream.as_ref().expect("upstream gradient"),
                    &cache.pool_index,
                    [c, h, w],
                ),
                Pool::None => upstream.take().expect("upstream gradient"),
            };
            if let Some(g) = dtaps.get(i, sample) {
                for (a, &b) in dz.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            if l.activation == Activation::Relu {
                ops::relu_backward_inplace(&mut dz, &cache.activated);
            }
            let r = self.ranges[i];
            let (head, tail) = grad.split_at_mut(r.bias.0);
            upstream = ops::conv_backward(
                &self.geom(i),
                &cache.input,
                &self.params[r.weights.0..r.weights.1],
                &dz,
                &mut head[r.weights.0..r.weights.1],
                &mut tail[..r.bias.1 - r.bias.0],
                i > 0,
            );
        }
    }

    /// Parameter gradient of a loss whose partial derivatives with respect to
    /// the logits (`dlogits`, batch×K) and tapped feature maps (`dtaps`) are
    /// given.
    pub fn backward(
        &self,
        fwd: &ForwardResult<F>,
        dlogits: &Matrix<F>,
        dtaps: &TapGrads<F>,
    ) -> Result<Vec<F>> {
        if fwd.spec_hash != self.spec_hash {
            return Err(Error::SpecMismatch {
                expected: self.spec_hash.clone(),
                found: fwd.spec_hash.clone(),
            });
        }
        ensure!(
            dlogits.rows == fwd.batch_len() && dlogits.cols == self.spec.num_classes,
            Shape,
            "dlogits is {}x{}, expected {}x{}",
            dlogits.rows,
            dlogits.cols,
            fwd.batch_len(),
            self.spec.num_classes
        );
        let chunks = par::chunk_ranges(fwd.batch_len(), GRAD_CHUNK);
        let partial = par::map(self.exec, &chunks, |range| {
            let mut g = vec![F::zero(); self.params.len()];
            for s in range.clone() {
                self.backward_sample(&fwd.traces[s], s, dlogits.row(s), dtaps, &mut g);
            }
            g
        });
        let mut total = vec![F::zero(); self.params.len()];
        for g in partial {
            for (a, b) in total.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(total)
    }
}
