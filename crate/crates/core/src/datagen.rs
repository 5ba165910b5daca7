//! Four-stream paired training data: real source, synthetic target, real
//! target, synthetic source.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor3;
use crate::translation::{analytic_translate, Direction, StyleMapParams};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    RealSource,
    SynthTarget,
    RealTarget,
    SynthSource,
}

impl Domain {
    pub const ALL: [Domain; 4] = [
        Domain::RealSource,
        Domain::SynthTarget,
        Domain::RealTarget,
        Domain::SynthSource,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor3<f32>,
    pub label: Option<usize>,
    pub domain: Domain,
    pub pair_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.label.is_some())
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn images(&self) -> Vec<&Tensor3<f32>> {
        self.samples.iter().map(|s| &s.pixels).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for l in self.samples.iter().filter_map(|s| s.label) {
            counts[l] += 1;
        }
        counts
    }

    /// Take the first `n` samples.
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(n).cloned().collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn translated(&self, params: &StyleMapParams, direction: Direction) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(ImageSample {
                    pixels: analytic_translate(&s.pixels, params, direction)?,
                    ..s.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            samples,
            num_classes: self.num_classes,
        })
    }
}

// ---------------------------------------------------------------------------
// IDX

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Load an IDX image/label file pair (MNIST layout). Pixels are scaled by 1/255.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;

    let magic = read_be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_path,
            format!("bad image magic {magic:#010x}"),
        ));
    }
    let count = read_be_u32(&img, 4, images_path)? as usize;
    let rows = read_be_u32(&img, 8, images_path)? as usize;
    let cols = read_be_u32(&img, 12, images_path)? as usize;

    let magic = read_be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("bad label magic {magic:#010x}"),
        ));
    }
    let label_count = read_be_u32(&lab, 4, labels_path)? as usize;
    if label_count != count {
        return Err(Error::format(
            labels_path,
            format!("{count} images but {label_count} labels"),
        ));
    }

    let plane = rows * cols;
    let body = &img[16..];
    if body.len() != count * plane {
        return Err(Error::format(
            images_path,
            format!(
                "expected {} pixel bytes, found {}",
                count * plane,
                body.len()
            ),
        ));
    }
    let labels = &lab[8..];
    if labels.len() != count {
        return Err(Error::format(
            labels_path,
            format!("expected {count} label bytes, found {}", labels.len()),
        ));
    }

    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    let samples = body
        .chunks_exact(plane.max(1))
        .take(count)
        .zip(labels)
        .enumerate()
        .map(|(i, (px, &l))| ImageSample {
            pixels: Tensor3::from_vec(1, rows, cols, px.iter().map(|&b| f32::from(b) / 255.0).collect()),
            label: Some(l as usize),
            domain: Domain::RealSource,
            pair_id: i as u64,
        })
        .collect();
    Ok(Dataset {
        samples,
        num_classes,
    })
}

/// Write raw IDX bytes; pixel values are expected in `[0, 1]` and rounded.
pub fn write_idx_dataset(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot write empty dataset".into()))?;
    let (rows, cols) = (first.pixels.height, first.pixels.width);
    let mut img = Vec::with_capacity(16 + dataset.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for s in &dataset.samples {
        ensure!(
            s.pixels.shape() == [1, rows, cols],
            Shape,
            "IDX images must be single-channel {rows}x{cols}"
        );
        img.extend(s.pixels.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        lab.push(s.label.unwrap_or(0) as u8);
    }
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Procedural glyphs

pub const GLYPH_SIZE: usize = 28;

// Seven-segment endpoints in a unit box (x right, y down).
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((0.0, 0.0), (1.0, 0.0)), // a: top
    ((1.0, 0.0), (1.0, 0.5)), // b: upper right
    ((1.0, 0.5), (1.0, 1.0)), // c: lower right
    ((0.0, 1.0), (1.0, 1.0)), // d: bottom
    ((0.0, 0.5), (0.0, 1.0)), // e: lower left
    ((0.0, 0.0), (0.0, 0.5)), // f: upper left
    ((0.0, 0.5), (1.0, 0.5)), // g: middle
];

const DIAGONALS: [((f64, f64), (f64, f64)); 4] = [
    ((0.0, 0.0), (1.0, 0.5)),
    ((0.0, 0.5), (1.0, 0.0)),
    ((0.0, 0.5), (1.0, 1.0)),
    ((0.0, 1.0), (1.0, 0.5)),
];

const DIGIT_MASKS: [u8; 10] = [
    0b011_1111, // 0: abcdef
    0b000_0110, // 1: bc
    0b101_1011, // 2: abdeg
    0b100_1111, // 3: abcdg
    0b110_0110, // 4: bcfg
    0b110_1101, // 5: acdfg
    0b111_1101, // 6: acdefg
    0b000_0111, // 7: abc
    0b111_1111, // 8
    0b110_1111, // 9: abcdfg
];

fn glyph_strokes(class: usize) -> Vec<((f64, f64), (f64, f64))> {
    if class < DIGIT_MASKS.len() {
        let mask = DIGIT_MASKS[class];
        return SEGMENTS
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, s)| *s)
            .collect();
    }
    // Classes past ten: a diagonal plus a deterministic segment subset.
    let mut rng = ChaCha8Rng::seed_from_u64(0x91f0 + class as u64);
    let mut strokes = vec![DIAGONALS[class % DIAGONALS.len()]];
    for s in SEGMENTS {
        if rng.random_bool(0.5) {
            strokes.push(s);
        }
    }
    strokes
}

fn segment_distance(px: f64, py: f64, (a, b): ((f64, f64), (f64, f64))) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn render_glyph(class: usize, rng: &mut ChaCha8Rng) -> Tensor3<f32> {
    let strokes = glyph_strokes(class);
    let scale = rng.random_range(0.85..1.15);
    let (bw, bh) = (10.0 * scale, 16.0 * scale);
    let ox = (GLYPH_SIZE as f64 - bw) / 2.0 + rng.random_range(-2.0..2.0);
    let oy = (GLYPH_SIZE as f64 - bh) / 2.0 + rng.random_range(-2.0..2.0);
    let slant = rng.random_range(-0.15..0.15);
    let half_thick = rng.random_range(0.8..1.4);
    let placed: Vec<_> = strokes
        .iter()
        .map(|&(a, b)| {
            let map = |(x, y): (f64, f64)| (ox + x * bw + slant * (1.0 - y) * bh, oy + y * bh);
            (map(a), map(b))
        })
        .collect();
    let mut img = Tensor3::zeros(1, GLYPH_SIZE, GLYPH_SIZE);
    for y in 0..GLYPH_SIZE {
        for x in 0..GLYPH_SIZE {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = placed
                .iter()
                .map(|&s| segment_distance(px, py, s))
                .fold(f64::INFINITY, f64::min);
            let v = (half_thick + 0.5 - d).clamp(0.0, 1.0);
            img.set(0, y, x, v as f32);
        }
    }
    img
}

/// `n` single-channel 28×28 procedurally rendered glyphs of `k` classes,
/// labels balanced (`label = i mod k`).
pub fn synth_glyph_dataset(n: usize, k: usize, seed: u64) -> Result<Dataset> {
    ensure!(k >= 2, InvalidArgument, "need at least two classes, got {k}");
    ensure!(n >= k, InvalidArgument, "need n >= k, got n={n}, k={k}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let label = i % k;
            ImageSample {
                pixels: render_glyph(label, &mut rng),
                label: Some(label),
                domain: Domain::RealSource,
                pair_id: i as u64,
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        num_classes: k,
    })
}

// ---------------------------------------------------------------------------
// Pairing

/// The four training streams plus the privately held target labels.
#[derive(Debug, Clone)]
pub struct DomainStreams {
    pub source: Dataset,
    pub synth_target: Dataset,
    pub target: Dataset,
    pub synth_source: Dataset,
    target_eval_labels: Vec<usize>,
    synth_target_by_pair: HashMap<u64, usize>,
    synth_source_by_pair: HashMap<u64, usize>,
}

impl DomainStreams {
    pub fn num_classes(&self) -> usize {
        self.source.num_classes
    }

    pub fn stream(&self, domain: Domain) -> &Dataset {
        match domain {
            Domain::RealSource => &self.source,
            Domain::SynthTarget => &self.synth_target,
            Domain::RealTarget => &self.target,
            Domain::SynthSource => &self.synth_source,
        }
    }

    /// Ground-truth labels of the real target stream. Evaluation only.
    pub fn target_eval_labels(&self) -> &[usize] {
        &self.target_eval_labels
    }

    /// The target stream with its held-out labels attached, for evaluation.
    pub fn labeled_target_for_eval(&self) -> Dataset {
        Dataset {
            samples: self
                .target
                .samples
                .iter()
                .zip(&self.target_eval_labels)
                .map(|(s, &l)| ImageSample {
                    label: Some(l),
                    ..s.clone()
                })
                .collect(),
            num_classes: self.target.num_classes,
        }
    }
}

fn index_by_pair(ds: &Dataset) -> HashMap<u64, usize> {
    ds.samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.pair_id, i))
        .collect()
}

/// Split into halves A (source) and B (target-to-be) and build all four
/// streams. Target labels are kept out of the target stream.
pub fn make_domain_pair_datasets(
    source_dataset: &Dataset,
    params: &StyleMapParams,
) -> Result<DomainStreams> {
    ensure!(
        source_dataset.len() >= 2,
        InvalidArgument,
        "dataset of {} samples is too small to split",
        source_dataset.len()
    );
    ensure!(
        source_dataset.is_labeled(),
        InvalidArgument,
        "source dataset must be labeled"
    );
    let half = source_dataset.len().div_ceil(2);
    let tag = |samples: &[ImageSample], offset: usize, domain: Domain| -> Vec<ImageSample> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| ImageSample {
                domain,
                pair_id: (offset + i) as u64,
                ..s.clone()
            })
            .collect()
    };
    let k = source_dataset.num_classes;
    let source = Dataset {
        samples: tag(&source_dataset.samples[..half], 0, Domain::RealSource),
        num_classes: k,
    };
    let split_b = Dataset {
        samples: tag(&source_dataset.samples[half..], half, Domain::RealTarget),
        num_classes: k,
    };

    let mut synth_target = source.translated(params, Direction::SourceToTarget)?;
    for s in &mut synth_target.samples {
        s.domain = Domain::SynthTarget;
    }
    let mut target = split_b.translated(params, Direction::SourceToTarget)?;
    let target_eval_labels = target
        .samples
        .iter_mut()
        .map(|s| s.label.take().expect("labeled split"))
        .collect();
    let mut synth_source = target.translated(params, Direction::TargetToSource)?;
    for s in &mut synth_source.samples {
        s.domain = Domain::SynthSource;
    }

    Ok(DomainStreams {
        synth_target_by_pair: index_by_pair(&synth_target),
        synth_source_by_pair: index_by_pair(&synth_source),
        source,
        synth_target,
        target,
        synth_source,
        target_eval_labels,
    })
}

// ---------------------------------------------------------------------------
// Batches

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchComposition {
    /// (real_source, synth_target, real_target, synth_source)
    pub fractions: [f64; 4],
    pub batch_size: usize,
}

impl Default for BatchComposition {
    fn default() -> Self {
        Self {
            fractions: [0.35, 0.15, 0.35, 0.15],
            batch_size: 64,
        }
    }
}

impl BatchComposition {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0, InvalidArgument, "batch_size must be positive");
        ensure!(
            self.fractions.iter().all(|&f| f >= 0.0 && f.is_finite()),
            InvalidArgument,
            "fractions must be nonnegative"
        );
        let total: f64 = self.fractions.iter().sum();
        ensure!(
            (total - 1.0).abs() <= 1e-9,
            InvalidArgument,
            "fractions sum to {total}, expected 1"
        );
        Ok(())
    }

    /// Largest-remainder rounding: floors first, then one extra sample per
    /// stream in order of decreasing remainder (ties to the earlier stream).
    pub fn counts(&self) -> Result<[usize; 4]> {
        self.validate()?;
        let raw: Vec<f64> = self
            .fractions
            .iter()
            .map(|f| f * self.batch_size as f64)
            .collect();
        // absorb representation error such as 0.35 * 20 = 6.999…
        let mut counts = [0usize; 4];
        for (c, r) in counts.iter_mut().zip(&raw) {
            *c = (r + 1e-9).floor() as usize;
        }
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..4).collect();
        let rem = |i: usize| (raw[i] - counts[i] as f64).max(0.0);
        order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
        for &i in order.iter().take(self.batch_size.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub pixels: Tensor3<f32>,
    pub label: Option<usize>,
    pub pair_id: u64,
}

/// One training batch. Every synthetic sample's real partner is present:
/// `synth_target[j]` translates `real_source[synth_target_partner[j]]` and
/// `synth_source[m]` translates back `real_target[synth_source_partner[m]]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub real_source: Vec<BatchItem>,
    pub synth_target: Vec<BatchItem>,
    pub real_target: Vec<BatchItem>,
    pub synth_source: Vec<BatchItem>,
    pub synth_target_partner: Vec<usize>,
    pub synth_source_partner: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.real_source.len()
            + self.synth_target.len()
            + self.real_target.len()
            + self.synth_source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> [usize; 4] {
        [
            self.real_source.len(),
            self.synth_target.len(),
            self.real_target.len(),
            self.synth_source.len(),
        ]
    }

    /// Check that each synthetic item's partner index points at the item
    /// with the same pair id.
    pub fn validate_pairing(&self) -> Result<()> {
        let check = |synth: &[BatchItem], real: &[BatchItem], partner: &[usize], what: &str| {
            ensure!(
                synth.len() == partner.len(),
                Pairing,
                "{what}: {} items but {} partner indices",
                synth.len(),
                partner.len()
            );
            for (j, (s, &p)) in synth.iter().zip(partner).enumerate() {
                let ok = real.get(p).is_some_and(|r| r.pair_id == s.pair_id);
                ensure!(ok, Pairing, "{what}[{j}] (pair {}) has no partner", s.pair_id);
            }
            Ok(())
        };
        check(
            &self.synth_target,
            &self.real_source,
            &self.synth_target_partner,
            "synth_target",
        )?;
        check(
            &self.synth_source,
            &self.real_target,
            &self.synth_source_partner,
            "synth_source",
        )
    }
}

pub(crate) fn mix_seed(seed: u64, step: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step.wrapping_add(0x632B_E59B_D9B4_E019));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    if count <= len {
        sample_indices(rng, len, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..len)).collect()
    }
}

fn item(s: &ImageSample) -> BatchItem {
    BatchItem {
        pixels: s.pixels.clone(),
        label: s.label,
        pair_id: s.pair_id,
    }
}

/// Deterministic in `(seed, step)`. Synthetic samples are the translation
/// partners of the first drawn real samples of the paired stream.
pub fn compose_batch(
    streams: &DomainStreams,
    comp: &BatchComposition,
    seed: u64,
    step: u64,
) -> Result<Batch> {
    let [n_rs, n_st, n_rt, n_ss] = comp.counts()?;
    for (domain, n) in Domain::ALL.iter().zip([n_rs, n_st, n_rt, n_ss]) {
        ensure!(
            n == 0 || !streams.stream(*domain).is_empty(),
            InvalidArgument,
            "stream {domain:?} is empty but the composition asks for {n} samples"
        );
    }
    ensure!(
        n_st <= n_rs && n_ss <= n_rt,
        Pairing,
        "each synthetic sample needs its real partner in the batch (counts {:?})",
        [n_rs, n_st, n_rt, n_ss]
    );

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, step));
    let rs_idx = draw(&mut rng, streams.source.len(), n_rs);
    let rt_idx = draw(&mut rng, streams.target.len(), n_rt);

    let paired = |real: &Dataset,
                  synth: &Dataset,
                  lookup: &HashMap<u64, usize>,
                  idx: &[usize],
                  n: usize|
     -> Result<(Vec<BatchItem>, Vec<usize>)> {
        let mut items = Vec::with_capacity(n);
        for &i in &idx[..n] {
            let pid = real.samples[i].pair_id;
            let j = *lookup
                .get(&pid)
                .ok_or_else(|| Error::Pairing(format!("pair {pid} has no translation")))?;
            items.push(item(&synth.samples[j]));
        }
        Ok((items, (0..n).collect()))
    };
    let (synth_target, synth_target_partner) = paired(
        &streams.source,
        &streams.synth_target,
        &streams.synth_target_by_pair,
        &rs_idx,
        n_st,
    )?;
    let (synth_source, synth_source_partner) = paired(
        &streams.target,
        &streams.synth_source,
        &streams.synth_source_by_pair,
        &rt_idx,
        n_ss,
    )?;

    Ok(Batch {
        real_source: rs_idx.iter().map(|&i| item(&streams.source.samples[i])).collect(),
        synth_target,
        real_target: rt_idx.iter().map(|&i| item(&streams.target.samples[i])).collect(),
        synth_source,
        synth_target_partner,
        synth_source_partner,
    })
}

// ---------------------------------------------------------------------------
// Dataset cache: raw little-endian f32 + JSON sidecar

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub labels_present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

fn default_classes() -> usize {
    10
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

pub fn write_dataset_cache(dataset: &Dataset, path: &Path) -> Result<()> {
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot cache empty dataset".into()))?;
    let [c, h, w] = first.pixels.shape();
    let mut bytes = Vec::with_capacity(dataset.len() * c * h * w * 4);
    for s in &dataset.samples {
        ensure!(s.pixels.shape() == [c, h, w], Shape, "ragged dataset");
        for v in &s.pixels.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let labels = dataset.labels();
    let sidecar = CacheSidecar {
        shape: vec![dataset.len(), c, h, w],
        dtype: "float32".into(),
        labels_present: labels.is_some(),
        labels,
        num_classes: dataset.num_classes,
    };
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

pub fn read_dataset_cache(path: &Path) -> Result<Dataset> {
    let side = sidecar_path(path);
    let meta: CacheSidecar =
        serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    if meta.dtype != "float32" || meta.shape.len() != 4 {
        return Err(Error::format(&side, "expected float32 N×C×H×W"));
    }
    let [n, c, h, w] = [meta.shape[0], meta.shape[1], meta.shape[2], meta.shape[3]];
    let bytes = read_file(path)?;
    if bytes.len() != n * c * h * w * 4 {
        return Err(Error::format(path, "size does not match sidecar shape"));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let plane = c * h * w;
    let samples = (0..n)
        .map(|i| ImageSample {
            pixels: Tensor3::from_vec(c, h, w, values[i * plane..(i + 1) * plane].to_vec()),
            label: meta.labels.as_ref().and_then(|l| l.get(i).copied()),
            domain: Domain::RealSource,
            pair_id: i as u64,
        })
        .collect();
    Ok(Dataset {
        samples,
        num_classes: meta.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::translation::StyleMapConfig;

    fn streams(n: usize) -> DomainStreams {
        let ds = synth_glyph_dataset(n, 10, 3).unwrap();
        let params = StyleMapConfig::digit_style(28, 28, 1).build().unwrap();
        make_domain_pair_datasets(&ds, &params).unwrap()
    }

    #[test]
    fn glyphs_balanced_and_deterministic() {
        let a = synth_glyph_dataset(10, 10, 7).unwrap();
        assert_eq!(a.class_counts(), vec![1; 10]);
        let b = synth_glyph_dataset(10, 10, 7).unwrap();
        assert_eq!(a, b);
        let big = synth_glyph_dataset(1000, 10, 1).unwrap();
        assert_eq!(big.class_counts(), vec![100; 10]);
        let odd = synth_glyph_dataset(23, 4, 1).unwrap();
        let c = odd.class_counts();
        assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
        assert!(synth_glyph_dataset(3, 5, 0).is_err());
    }

    #[test]
    fn glyph_classes_render_differently() {
        let ds = synth_glyph_dataset(12, 12, 0).unwrap();
        for i in 0..12 {
            for j in i + 1..12 {
                let diff = ds.samples[i].pixels.max_abs_diff(&ds.samples[j].pixels);
                assert!(diff > 0.5, "classes {i} and {j} look identical");
            }
        }
        assert!(ds.samples.iter().all(|s| s.pixels.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn pairing_construction() {
        let s = streams(40);
        let ids = |d: &Dataset| d.samples.iter().map(|s| s.pair_id).collect::<Vec<_>>();
        assert_eq!(ids(&s.source), ids(&s.synth_target));
        assert_eq!(ids(&s.target), ids(&s.synth_source));
        assert!(s.target.samples.iter().all(|x| x.label.is_none()));
        assert!(s.synth_source.samples.iter().all(|x| x.label.is_none()));
        assert!(s.synth_target.samples.iter().all(|x| x.label.is_some()));

        let ds = synth_glyph_dataset(40, 10, 3).unwrap();
        for (i, syn) in s.synth_source.samples.iter().enumerate() {
            assert!(syn.pixels.max_abs_diff(&ds.samples[20 + i].pixels) <= 1e-6);
            assert_eq!(s.target_eval_labels()[i], ds.samples[20 + i].label.unwrap());
        }
    }

    #[test]
    fn tiny_dataset_cannot_split() {
        let ds = synth_glyph_dataset(2, 2, 0).unwrap().truncated(1);
        let params = StyleMapConfig::identity(28, 28).build().unwrap();
        assert!(make_domain_pair_datasets(&ds, &params).is_err());
    }

    #[test]
    fn paper_composition_counts() {
        let comp = BatchComposition {
            fractions: [0.35, 0.15, 0.35, 0.15],
            batch_size: 20,
        };
        assert_eq!(comp.counts().unwrap(), [7, 3, 7, 3]);
        let comp = BatchComposition {
            fractions: [0.35, 0.15, 0.35, 0.15],
            batch_size: 64,
        };
        // 22.4, 9.6, 22.4, 9.6 -> floors 22, 9, 22, 9; two extra go to the .6s
        assert_eq!(comp.counts().unwrap(), [22, 10, 22, 10]);
        let bad = BatchComposition {
            fractions: [0.5, 0.5, 0.5, 0.0],
            batch_size: 4,
        };
        assert!(bad.counts().is_err());
    }

    #[test]
    fn degenerate_composition_all_source() {
        let s = streams(20);
        let comp = BatchComposition {
            fractions: [1.0, 0.0, 0.0, 0.0],
            batch_size: 8,
        };
        let b = compose_batch(&s, &comp, 1, 0).unwrap();
        assert_eq!(b.counts(), [8, 0, 0, 0]);
    }

    #[test]
    fn batches_deterministic_and_paired() {
        let s = streams(60);
        let comp = BatchComposition {
            fractions: [0.35, 0.15, 0.35, 0.15],
            batch_size: 20,
        };
        let a = compose_batch(&s, &comp, 5, 3).unwrap();
        let b = compose_batch(&s, &comp, 5, 3).unwrap();
        assert_eq!(a, b);
        let c = compose_batch(&s, &comp, 5, 4).unwrap();
        assert_ne!(a, c);
        a.validate_pairing().unwrap();
        assert!(a.real_target.iter().all(|x| x.label.is_none()));
        assert!(a.synth_target.iter().all(|x| x.label.is_some()));
        for (j, st) in a.synth_target.iter().enumerate() {
            assert_eq!(st.label, a.real_source[a.synth_target_partner[j]].label);
        }
    }

    #[test]
    fn empty_required_stream_errors() {
        let mut s = streams(20);
        s.target.samples.clear();
        let comp = BatchComposition::default();
        assert!(compose_batch(&s, &comp, 0, 0).is_err());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let mut ds = synth_glyph_dataset(4, 2, 0).unwrap();
        ds.samples[0].pixels = Tensor3::zeros(1, 28, 28);
        ds.samples[1].pixels.set(0, 0, 0, 51.0 / 255.0);
        write_idx_dataset(&ds, &ip, &lp).unwrap();
        let back = load_idx_dataset(&ip, &lp).unwrap();
        assert_eq!(back.len(), 4);
        assert!(back.samples[0].pixels.data.iter().all(|&v| v == 0.0));
        assert_eq!(back.samples[1].pixels.get(0, 0, 0), 51.0 / 255.0);
        assert_eq!(back.labels().unwrap(), vec![0, 1, 0, 1]);

        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_idx_dataset(&ip, &lp), Err(Error::Format { .. })));

        let mut bad = bytes.clone();
        bad[3] = 0x01;
        fs::write(&ip, &bad).unwrap();
        assert!(matches!(load_idx_dataset(&ip, &lp), Err(Error::Format { .. })));

        fs::write(&ip, &bytes).unwrap();
        let labels = fs::read(&lp).unwrap();
        let mut short = labels.clone();
        short[7] = 3;
        short.truncate(11);
        fs::write(&lp, &short).unwrap();
        assert!(load_idx_dataset(&ip, &lp).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.f32");
        let ds = synth_glyph_dataset(6, 3, 2).unwrap();
        write_dataset_cache(&ds, &path).unwrap();
        let side: CacheSidecar =
            serde_json::from_slice(&fs::read(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side.shape, vec![6, 1, 28, 28]);
        assert!(side.labels_present);
        let back = read_dataset_cache(&path).unwrap();
        assert_eq!(back, ds);
    }
}
