//! Attention maps and the source/target attention alignment penalty.
//!
//! An attention map aggregates a layer's channels into one spatial map
//! (`Σ_c F_c²` by default). The penalty compares L2-normalized maps of the
//! frozen source network and the trainable target network over four groups
//! of samples: real source through both nets, real source against its
//! synthetic-target translation, synthetic source through both nets, and
//! synthetic source against its real-target original. Each group is averaged
//! over its own count; groups are summed, then layers are summed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::Batch;
use crate::discrepancy::{attention_l1_distance, joint_mmd_grad_y, gaussian_mmd_grad_y, KernelSet};
use crate::error::{ensure, Error, Result};
use crate::model::TapGrads;
use crate::tensor::{l2_norm, Matrix, Real, Tensor3};

pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// `Σ_c F_c²`
    #[default]
    SumSq,
    /// `Σ_c |F_c|`
    SumAbs,
    /// `max_c |F_c|`
    MaxAbs,
    /// The vectorized feature maps themselves.
    Raw,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::SumSq,
        AttentionMode::SumAbs,
        AttentionMode::MaxAbs,
        AttentionMode::Raw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::SumSq => "sumsq",
            AttentionMode::SumAbs => "sumabs",
            AttentionMode::MaxAbs => "maxabs",
            AttentionMode::Raw => "raw",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attention mode {s:?}")))
    }
}

/// How normalized attention vectors of the two networks are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// Per-pair Euclidean distance.
    #[default]
    L2,
    /// Per-pair L1 distance.
    L1,
    /// Multi-kernel MMD between the pooled source and target vectors, per layer.
    Mmd,
    /// Joint MMD with a product kernel across layers.
    Jmmd,
}

impl Measure {
    pub const ALL: [Measure; 4] = [Measure::L2, Measure::L1, Measure::Mmd, Measure::Jmmd];

    pub fn name(self) -> &'static str {
        match self {
            Measure::L2 => "l2",
            Measure::L1 => "l1",
            Measure::Mmd => "mmd",
            Measure::Jmmd => "jmmd",
        }
    }
}

impl std::str::FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown measure {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<F> {
    pub values: Vec<F>,
    pub height: usize,
    pub width: usize,
    pub layer: usize,
    pub mode: AttentionMode,
}

pub fn attention_map<F: Real>(
    features: &Tensor3<F>,
    mode: AttentionMode,
    layer: usize,
) -> Result<AttentionMap<F>> {
    ensure!(
        !features.is_empty() && features.channels >= 1,
        InvalidArgument,
        "attention of an empty feature tensor"
    );
    let plane = features.plane_len();
    let values = match mode {
        AttentionMode::Raw => features.data.clone(),
        _ => {
            let mut out = vec![F::zero(); plane];
            for c in 0..features.channels {
                for (o, &f) in out.iter_mut().zip(features.channel(c)) {
                    match mode {
                        AttentionMode::SumSq => *o += f * f,
                        AttentionMode::SumAbs => *o += f.abs(),
                        AttentionMode::MaxAbs => *o = o.max(f.abs()),
                        AttentionMode::Raw => unreachable!(),
                    }
                }
            }
            out
        }
    };
    Ok(AttentionMap {
        values,
        height: features.height,
        width: features.width,
        layer,
        mode,
    })
}

/// Chain a gradient on the attention map back to the feature tensor.
fn attention_map_backward<F: Real>(features: &Tensor3<F>, mode: AttentionMode, grad: &[F]) -> Tensor3<F> {
    let plane = features.plane_len();
    let mut out = Tensor3::zeros(features.channels, features.height, features.width);
    match mode {
        AttentionMode::Raw => out.data.copy_from_slice(grad),
        AttentionMode::SumSq => {
            let two = F::lit(2.0);
            for (o, (&f, &g)) in out
                .data
                .iter_mut()
                .zip(features.data.iter().zip(grad.iter().cycle()))
            {
                *o = two * f * g;
            }
        }
        AttentionMode::SumAbs => {
            for (o, (&f, &g)) in out
                .data
                .iter_mut()
                .zip(features.data.iter().zip(grad.iter().cycle()))
            {
                *o = sign(f) * g;
            }
        }
        AttentionMode::MaxAbs => {
            for p in 0..plane {
                let mut best = 0;
                for c in 1..features.channels {
                    if features.data[c * plane + p].abs() > features.data[best * plane + p].abs() {
                        best = c;
                    }
                }
                let f = features.data[best * plane + p];
                out.data[best * plane + p] = sign(f) * grad[p];
            }
        }
    }
    out
}

fn sign<F: Real>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// `v / max(‖v‖₂, eps)`.
pub fn normalize_attention<F: Real>(values: &[F], eps: F) -> Vec<F> {
    let denom = l2_norm(values).max(eps);
    values.iter().map(|&v| v / denom).collect()
}

fn normalize_backward<F: Real>(values: &[F], normalized: &[F], eps: F, grad: &[F]) -> Vec<F> {
    let norm = l2_norm(values);
    if norm < eps {
        return grad.iter().map(|&g| g / eps).collect();
    }
    let dot: F = normalized.iter().zip(grad).map(|(&u, &g)| u * g).sum();
    grad.iter()
        .zip(normalized)
        .map(|(&g, &u)| (g - u * dot) / norm)
        .collect()
}

/// Which sample of each network's forward batch takes part in each term group.
/// Entries are `(source-net index, target-net index)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentLayout {
    pub same_source: Vec<(usize, usize)>,
    pub source_vs_synth_target: Vec<(usize, usize)>,
    pub same_synth_source: Vec<(usize, usize)>,
    pub synth_source_vs_target: Vec<(usize, usize)>,
}

impl AlignmentLayout {
    /// Layout for the trainer's conventions: the target network sees
    /// `[real_source, synth_target, real_target, synth_source]` concatenated,
    /// the source network sees `[real_source, synth_source]`.
    pub fn from_batch(batch: &Batch) -> Result<Self> {
        batch.validate_pairing()?;
        let [n_rs, n_st, n_rt, n_ss] = batch.counts();
        let t_st = n_rs;
        let t_rt = n_rs + n_st;
        let t_ss = n_rs + n_st + n_rt;
        let s_ss = n_rs;
        Ok(Self {
            same_source: (0..n_rs).map(|i| (i, i)).collect(),
            source_vs_synth_target: batch
                .synth_target_partner
                .iter()
                .enumerate()
                .map(|(j, &p)| (p, t_st + j))
                .collect(),
            same_synth_source: (0..n_ss).map(|m| (s_ss + m, t_ss + m)).collect(),
            synth_source_vs_target: batch
                .synth_source_partner
                .iter()
                .enumerate()
                .map(|(m, &p)| (s_ss + m, t_rt + p))
                .collect(),
        })
    }

    pub fn groups(&self) -> [&[(usize, usize)]; 4] {
        [
            &self.same_source,
            &self.source_vs_synth_target,
            &self.same_synth_source,
            &self.synth_source_vs_target,
        ]
    }

    pub fn is_empty(&self) -> bool {
        self.groups().iter().all(|g| g.is_empty())
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentLoss<F> {
    pub value: F,
    /// Gradient with respect to the target network's taps only.
    pub target_grads: TapGrads<F>,
    pub per_layer: BTreeMap<usize, F>,
    /// Kernel bandwidths per layer used by the MMD measures; empty otherwise.
    pub bandwidths: Vec<Vec<F>>,
}

type Taps<F> = BTreeMap<usize, Vec<Tensor3<F>>>;

struct LayerVectors<'a, F> {
    features: &'a [Tensor3<F>],
    raw: BTreeMap<usize, Vec<F>>,
    unit: BTreeMap<usize, Vec<F>>,
}

fn layer_vectors<'a, F: Real>(
    taps: &'a Taps<F>,
    layer: usize,
    idx: impl Iterator<Item = usize>,
    mode: AttentionMode,
    who: &str,
) -> Result<LayerVectors<'a, F>> {
    let features = taps
        .get(&layer)
        .ok_or_else(|| Error::InvalidArgument(format!("{who} network has no tap at layer {layer}")))?;
    let eps = F::lit(NORM_EPS);
    let mut raw = BTreeMap::new();
    let mut unit = BTreeMap::new();
    for i in idx {
        if raw.contains_key(&i) {
            continue;
        }
        let f = features
            .get(i)
            .ok_or_else(|| Error::Pairing(format!("{who} sample {i} missing at layer {layer}")))?;
        let a = attention_map(f, mode, layer)?.values;
        unit.insert(i, normalize_attention(&a, eps));
        raw.insert(i, a);
    }
    Ok(LayerVectors {
        features,
        raw,
        unit,
    })
}

/// The alignment penalty and its gradient with respect to the target taps.
/// The source taps are treated as constants.
pub fn attention_alignment_loss<F: Real>(
    source_taps: &Taps<F>,
    target_taps: &Taps<F>,
    layout: &AlignmentLayout,
    mode: AttentionMode,
    layers: &[usize],
    measure: Measure,
) -> Result<AlignmentLoss<F>> {
    alignment_impl(source_taps, target_taps, layout, mode, layers, measure, None)
}

/// As [`attention_alignment_loss`], with the MMD bandwidths of each layer
/// given instead of taken from the median heuristic.
pub fn attention_alignment_loss_with_bandwidths<F: Real>(
    source_taps: &Taps<F>,
    target_taps: &Taps<F>,
    layout: &AlignmentLayout,
    mode: AttentionMode,
    layers: &[usize],
    measure: Measure,
    bandwidths: &[Vec<F>],
) -> Result<AlignmentLoss<F>> {
    ensure!(
        bandwidths.len() == layers.len(),
        InvalidArgument,
        "{} bandwidth sets for {} layers",
        bandwidths.len(),
        layers.len()
    );
    alignment_impl(source_taps, target_taps, layout, mode, layers, measure, Some(bandwidths))
}

fn alignment_impl<F: Real>(
    source_taps: &Taps<F>,
    target_taps: &Taps<F>,
    layout: &AlignmentLayout,
    mode: AttentionMode,
    layers: &[usize],
    measure: Measure,
    fixed_bandwidths: Option<&[Vec<F>]>,
) -> Result<AlignmentLoss<F>> {
    ensure!(!layers.is_empty(), InvalidArgument, "alignment layer set is empty");
    let eps = F::lit(NORM_EPS);
    let all_pairs: Vec<(usize, usize)> = layout.groups().iter().flat_map(|g| g.iter().copied()).collect();

    let mut per_layer = BTreeMap::new();
    let mut target_grads = TapGrads::new();
    let mut vectors = Vec::with_capacity(layers.len());
    for &l in layers {
        let src = layer_vectors(source_taps, l, all_pairs.iter().map(|p| p.0), mode, "source")?;
        let tgt = layer_vectors(target_taps, l, all_pairs.iter().map(|p| p.1), mode, "target")?;
        for &(s, t) in &all_pairs {
            ensure!(
                src.unit[&s].len() == tgt.unit[&t].len(),
                Shape,
                "layer {l}: source and target attention sizes differ"
            );
        }
        vectors.push((l, src, tgt));
    }

    // gradient wrt each target unit vector, per layer
    let mut unit_grads: Vec<BTreeMap<usize, Vec<F>>> = vec![BTreeMap::new(); layers.len()];
    let mut total = F::zero();
    let mut used_bandwidths = Vec::new();

    match measure {
        Measure::L2 | Measure::L1 => {
            for (li, (l, src, tgt)) in vectors.iter().enumerate() {
                let mut layer_total = F::zero();
                for group in layout.groups() {
                    if group.is_empty() {
                        continue;
                    }
                    let inv = F::one() / F::from_usize(group.len()).expect("count");
                    for &(s, t) in group {
                        let (a, b) = (&src.unit[&s], &tgt.unit[&t]);
                        let g = unit_grads[li].entry(t).or_insert_with(|| vec![F::zero(); b.len()]);
                        if measure == Measure::L2 {
                            let d = a.iter().zip(b).map(|(&p, &q)| (q - p) * (q - p)).sum::<F>().sqrt();
                            layer_total += d * inv;
                            if d > F::zero() {
                                for (gv, (&p, &q)) in g.iter_mut().zip(a.iter().zip(b)) {
                                    *gv += inv * (q - p) / d;
                                }
                            }
                        } else {
                            layer_total += attention_l1_distance(a, b)? * inv;
                            for (gv, (&p, &q)) in g.iter_mut().zip(a.iter().zip(b)) {
                                *gv += inv * sign(q - p);
                            }
                        }
                    }
                }
                per_layer.insert(*l, layer_total);
                total += layer_total;
            }
        }
        Measure::Mmd | Measure::Jmmd => {
            let mut xs = Vec::with_capacity(vectors.len());
            let mut ys = Vec::with_capacity(vectors.len());
            let mut sigmas = Vec::with_capacity(vectors.len());
            for (li, (_, src, tgt)) in vectors.iter().enumerate() {
                let x = Matrix::from_rows(&all_pairs.iter().map(|p| src.unit[&p.0].clone()).collect::<Vec<_>>());
                let y = Matrix::from_rows(&all_pairs.iter().map(|p| tgt.unit[&p.1].clone()).collect::<Vec<_>>());
                sigmas.push(match fixed_bandwidths {
                    Some(b) => b[li].clone(),
                    None if all_pairs.is_empty() => Vec::new(),
                    None => KernelSet::median().resolve(&x, &y)?,
                });
                xs.push(x);
                ys.push(y);
            }
            let mut scatter = |li: usize, gy: &Matrix<F>| {
                for (row, &(_, t)) in all_pairs.iter().enumerate() {
                    let g = unit_grads[li].entry(t).or_insert_with(|| vec![F::zero(); gy.cols]);
                    for (gv, &d) in g.iter_mut().zip(gy.row(row)) {
                        *gv += d;
                    }
                }
            };
            used_bandwidths = sigmas.clone();
            if all_pairs.is_empty() {
                // nothing to compare
            } else if measure == Measure::Mmd {
                for (li, (x, y)) in xs.iter().zip(&ys).enumerate() {
                    let (v, gy) = gaussian_mmd_grad_y(x, y, &sigmas[li])?;
                    per_layer.insert(vectors[li].0, v);
                    total += v;
                    scatter(li, &gy);
                }
            } else {
                let (v, gys) = joint_mmd_grad_y(&xs, &ys, &sigmas)?;
                total = v;
                for (li, gy) in gys.iter().enumerate() {
                    scatter(li, gy);
                }
            }
        }
    }

    for (li, (l, _, tgt)) in vectors.iter().enumerate() {
        for (&t, g_unit) in &unit_grads[li] {
            let g_map = normalize_backward(&tgt.raw[&t], &tgt.unit[&t], eps, g_unit);
            let g_feat = attention_map_backward(&tgt.features[t], mode, &g_map);
            target_grads.accumulate(*l, t, &g_feat);
        }
    }

    Ok(AlignmentLoss {
        value: total,
        target_grads,
        per_layer,
        bandwidths: used_bandwidths,
    })
}
