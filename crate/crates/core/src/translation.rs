//! Exactly invertible cross-domain image pairing and the CycleGAN loss terms.
//!
//! The translator is a fixed per-pixel affine map `a ⊙ x + c`; its inverse
//! `(x − c) ⊘ a` is exact up to float rounding, which is what makes the
//! real/synthetic pairs usable for attention alignment without training a
//! generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor3;

/// Discriminator probabilities are clamped to `[ε, 1−ε]` before logs.
pub const DISC_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSpec {
    Constant(f64),
    /// Uniform per-pixel draws in `[lo, hi]` from `seed`.
    Random { seed: u64, lo: f64, hi: f64 },
}

/// Serializable description of a translator; [`StyleMapConfig::build`]
/// materializes the fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleMapConfig {
    pub a_min: f64,
    pub scale_spec: ScaleSpec,
    pub offset_seed: u64,
    pub offset_range: [f64; 2],
    pub height: usize,
    pub width: usize,
}

impl StyleMapConfig {
    /// Intensity-flipping map: `a = −0.8`, smooth texture `c ∈ [0.85, 1.0]`.
    pub fn digit_style(height: usize, width: usize, seed: u64) -> Self {
        Self {
            a_min: 0.1,
            scale_spec: ScaleSpec::Constant(-0.8),
            offset_seed: seed,
            offset_range: [0.85, 1.0],
            height,
            width,
        }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            a_min: 0.1,
            scale_spec: ScaleSpec::Constant(1.0),
            offset_seed: 0,
            offset_range: [0.0, 0.0],
            height,
            width,
        }
    }

    pub fn build(&self) -> Result<StyleMapParams> {
        ensure!(self.a_min > 0.0, InvalidArgument, "a_min must be positive");
        ensure!(
            self.height > 0 && self.width > 0,
            InvalidArgument,
            "translator field must be non-empty"
        );
        let [lo, hi] = self.offset_range;
        ensure!(
            lo.is_finite() && hi.is_finite() && lo <= hi,
            InvalidArgument,
            "offset_range must be finite with lo <= hi"
        );
        let n = self.height * self.width;
        let scale: Vec<f64> = match self.scale_spec {
            ScaleSpec::Constant(a) => vec![a; n],
            ScaleSpec::Random { seed, lo, hi } => {
                ensure!(lo <= hi, InvalidArgument, "scale range must have lo <= hi");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| rng.random_range(lo..=hi)).collect()
            }
        };
        let offset = smooth_texture(self.height, self.width, self.offset_seed, lo, hi);
        StyleMapParams::new(self.clone(), scale, offset)
    }
}

/// Validated translator fields. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleMapParams {
    config: StyleMapConfig,
    scale: Vec<f64>,
    offset: Vec<f64>,
}

impl StyleMapParams {
    pub fn new(config: StyleMapConfig, scale: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        let n = config.height * config.width;
        ensure!(
            scale.len() == n && offset.len() == n,
            Shape,
            "translator fields must have {n} entries"
        );
        if let Some(i) = scale
            .iter()
            .position(|a| !a.is_finite() || a.abs() < config.a_min)
        {
            return Err(Error::InvalidArgument(format!(
                "scale entry {i} = {} violates |a| >= a_min = {}",
                scale[i], config.a_min
            )));
        }
        ensure!(
            offset.iter().all(|c| c.is_finite()),
            InvalidArgument,
            "offset must be finite"
        );
        Ok(Self {
            config,
            scale,
            offset,
        })
    }

    pub fn config(&self) -> &StyleMapConfig {
        &self.config
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }
}

/// Low-frequency texture: a few random plane waves, min-max rescaled to `[lo, hi]`.
fn smooth_texture(height: usize, width: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_u64);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.05..0.35),
                rng.random_range(0.05..0.35),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            waves
                .iter()
                .map(|&(fy, fx, ph, amp)| amp * (fy * y + fx * x + ph).sin())
                .sum()
        })
        .collect();
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    raw.into_iter()
        .map(|v| {
            if span > 0.0 {
                lo + (hi - lo) * (v - min) / span
            } else {
                lo
            }
        })
        .collect()
}

/// Apply the translator. The fields broadcast over channels.
pub fn analytic_translate(
    x: &Tensor3<f32>,
    params: &StyleMapParams,
    direction: Direction,
) -> Result<Tensor3<f32>> {
    let (h, w) = params.spatial();
    ensure!(
        x.height == h && x.width == w,
        Shape,
        "image is {}x{}, translator expects {h}x{w}",
        x.height,
        x.width
    );
    let plane = h * w;
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = i % plane;
            let (a, c) = (params.scale[p], params.offset[p]);
            let v = f64::from(v);
            let out = match direction {
                Direction::SourceToTarget => a * v + c,
                Direction::TargetToSource => (v - c) / a,
            };
            out as f32
        })
        .collect();
    Ok(Tensor3::from_vec(x.channels, h, w, data))
}

#[derive(Debug, Clone, Default)]
pub struct DiscriminatorOutputs {
    /// D applied to real samples of its own domain.
    pub real: Vec<f64>,
    /// D applied to translated samples.
    pub fake: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct GanLossInputs {
    /// `D^T` on real targets and on `G^ST(x^S)`.
    pub target_disc: DiscriminatorOutputs,
    /// `D^S` on real sources and on `G^TS(x^T)`.
    pub source_disc: DiscriminatorOutputs,
    /// `G^TS(G^ST(x^S))` and `x^S`.
    pub recon_s: Vec<Tensor3<f32>>,
    pub orig_s: Vec<Tensor3<f32>>,
    /// `G^ST(G^TS(x^T))` and `x^T`.
    pub recon_t: Vec<Tensor3<f32>>,
    pub orig_t: Vec<Tensor3<f32>>,
    pub lambda_cyc: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(DISC_EPS, 1.0 - DISC_EPS)
}

/// `mean log D(real) + mean log(1 − D(fake))` for the discriminator guarding
/// the direction's output domain.
pub fn gan_adversarial_loss(inputs: &GanLossInputs, direction: Direction) -> Result<f64> {
    let disc = match direction {
        Direction::SourceToTarget => &inputs.target_disc,
        Direction::TargetToSource => &inputs.source_disc,
    };
    ensure!(
        !disc.real.is_empty() && !disc.fake.is_empty(),
        InvalidArgument,
        "adversarial loss needs non-empty real and fake batches"
    );
    let real = disc.real.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / disc.real.len() as f64;
    let fake = disc
        .fake
        .iter()
        .map(|&p| (1.0 - clamp_prob(p)).ln())
        .sum::<f64>()
        / disc.fake.len() as f64;
    Ok(real + fake)
}

fn mean_l1(recon: &[Tensor3<f32>], orig: &[Tensor3<f32>], side: &str) -> Result<f64> {
    ensure!(
        recon.len() == orig.len(),
        Shape,
        "{side}: {} reconstructions for {} originals",
        recon.len(),
        orig.len()
    );
    if recon.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, o) in recon.iter().zip(orig) {
        ensure!(r.shape() == o.shape(), Shape, "{side}: image shape mismatch");
        total += r
            .data
            .iter()
            .zip(&o.data)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .sum::<f64>();
    }
    Ok(total / recon.len() as f64)
}

/// Per-image L1 sums averaged over each batch, summed over both cycles.
pub fn cycle_consistency_loss(inputs: &GanLossInputs) -> Result<f64> {
    Ok(mean_l1(&inputs.recon_s, &inputs.orig_s, "source cycle")?
        + mean_l1(&inputs.recon_t, &inputs.orig_t, "target cycle")?)
}

pub fn cyclegan_full_loss(inputs: &GanLossInputs) -> Result<f64> {
    ensure!(
        inputs.lambda_cyc >= 0.0,
        InvalidArgument,
        "lambda_cyc must be nonnegative, got {}",
        inputs.lambda_cyc
    );
    let adv = gan_adversarial_loss(inputs, Direction::SourceToTarget)?
        + gan_adversarial_loss(inputs, Direction::TargetToSource)?;
    if inputs.lambda_cyc == 0.0 {
        return Ok(adv);
    }
    Ok(adv + inputs.lambda_cyc * cycle_consistency_loss(inputs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_params(a: f64, c: f64, h: usize, w: usize) -> StyleMapParams {
        let cfg = StyleMapConfig {
            a_min: 0.1,
            scale_spec: ScaleSpec::Constant(a),
            offset_seed: 0,
            offset_range: [c, c],
            height: h,
            width: w,
        };
        cfg.build().unwrap()
    }

    fn disc(real: f64, fake: f64, n: usize) -> DiscriminatorOutputs {
        DiscriminatorOutputs {
            real: vec![real; n],
            fake: vec![fake; n],
        }
    }

    #[test]
    fn zero_image_maps_to_offset() {
        let p = const_params(-0.8, 0.9, 4, 4);
        let out = analytic_translate(&Tensor3::zeros(1, 4, 4), &p, Direction::SourceToTarget)
            .unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.9).abs() < 1e-7));
    }

    #[test]
    fn single_pixel_hand_value() {
        let p = const_params(-0.8, 1.0, 2, 2);
        let mut x = Tensor3::zeros(1, 2, 2);
        x.set(0, 0, 0, 0.5);
        let out = analytic_translate(&x, &p, Direction::SourceToTarget).unwrap();
        assert!((out.get(0, 0, 0) - 0.6).abs() < 1e-7);
    }

    #[test]
    fn round_trip_is_exact() {
        let p = StyleMapConfig::digit_style(28, 28, 3).build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor3::from_vec(1, 28, 28, (0..784).map(|_| rng.random::<f32>()).collect());
        let y = analytic_translate(&x, &p, Direction::SourceToTarget).unwrap();
        let back = analytic_translate(&y, &p, Direction::TargetToSource).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-6);
    }

    #[test]
    fn texture_stays_in_range() {
        let p = StyleMapConfig::digit_style(28, 28, 9).build().unwrap();
        assert!(p.offset().iter().all(|&c| (0.85..=1.0).contains(&c)));
        assert!(p.scale().iter().all(|&a| a == -0.8));
    }

    #[test]
    fn small_scale_rejected_at_construction() {
        let cfg = StyleMapConfig {
            scale_spec: ScaleSpec::Constant(0.05),
            ..StyleMapConfig::identity(2, 2)
        };
        assert!(cfg.build().is_err());
    }

    #[test]
    fn shape_mismatch_errors() {
        let p = const_params(1.0, 0.0, 4, 4);
        assert!(analytic_translate(&Tensor3::zeros(1, 3, 4), &p, Direction::SourceToTarget).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = StyleMapConfig::digit_style(28, 28, 5);
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("a_min") && s.contains("offset_seed") && s.contains("offset_range"));
        let back: StyleMapConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.build().unwrap(), cfg.build().unwrap());
    }

    #[test]
    fn adversarial_half_probabilities() {
        let inputs = GanLossInputs {
            target_disc: disc(0.5, 0.5, 4),
            ..Default::default()
        };
        let v = gan_adversarial_loss(&inputs, Direction::SourceToTarget).unwrap();
        let oracle: f64 = 2.0 * 0.5f64.ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v + 1.386).abs() < 1e-3);
    }

    #[test]
    fn adversarial_inverse_e_case() {
        let e_inv = (-1.0f64).exp();
        let inputs = GanLossInputs {
            target_disc: disc(e_inv, 1.0 - e_inv, 1),
            ..Default::default()
        };
        let v = gan_adversarial_loss(&inputs, Direction::SourceToTarget).unwrap();
        assert!((v + 2.0).abs() < 1e-12);
    }

    #[test]
    fn adversarial_perfect_discriminator_limit() {
        let mut last = f64::NEG_INFINITY;
        for eps in [1e-1, 1e-2, 1e-3, 1e-5] {
            let inputs = GanLossInputs {
                target_disc: disc(1.0 - eps, eps, 3),
                ..Default::default()
            };
            let v = gan_adversarial_loss(&inputs, Direction::SourceToTarget).unwrap();
            assert!(v < 0.0 && v > last);
            last = v;
        }
        assert!(last > -1e-4);
    }

    #[test]
    fn adversarial_empty_batch_errors() {
        assert!(gan_adversarial_loss(&GanLossInputs::default(), Direction::TargetToSource).is_err());
    }

    fn offset_images(delta: f32) -> GanLossInputs {
        let orig = Tensor3::from_vec(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let recon = Tensor3::from_vec(1, 2, 2, orig.data.iter().map(|v| v + delta).collect());
        GanLossInputs {
            recon_s: vec![recon],
            orig_s: vec![orig.clone()],
            recon_t: vec![orig.clone()],
            orig_t: vec![orig],
            ..Default::default()
        }
    }

    #[test]
    fn cycle_loss_hand_case_and_homogeneity() {
        let zero = cycle_consistency_loss(&offset_images(0.0)).unwrap();
        assert_eq!(zero, 0.0);
        let half = cycle_consistency_loss(&offset_images(0.5)).unwrap();
        assert!((half - 2.0).abs() < 1e-6);
        let one = cycle_consistency_loss(&offset_images(1.0)).unwrap();
        assert!((one - 2.0 * half).abs() < 1e-6);
    }

    #[test]
    fn cycle_loss_shape_mismatch_errors() {
        let mut inputs = offset_images(0.0);
        inputs.recon_s[0] = Tensor3::zeros(1, 3, 3);
        assert!(cycle_consistency_loss(&inputs).is_err());
    }

    #[test]
    fn full_loss_combinations() {
        let mut inputs = offset_images(0.075);
        inputs.target_disc = disc(0.5, 0.5, 2);
        inputs.source_disc = disc(0.5, 0.5, 2);
        let adv = 4.0 * 0.5f64.ln();

        inputs.lambda_cyc = 0.0;
        assert_eq!(cyclegan_full_loss(&inputs).unwrap(), adv);

        // per-image L1 of 4 pixels × 0.075 = 0.3
        inputs.lambda_cyc = 10.0;
        let cyc = cycle_consistency_loss(&inputs).unwrap();
        assert!((cyc - 0.3).abs() < 1e-6);
        let full = cyclegan_full_loss(&inputs).unwrap();
        assert!((full - (adv + 3.0)).abs() < 1e-5);
        assert!((full - 0.228).abs() < 1e-3);

        inputs.lambda_cyc = -1.0;
        assert!(cyclegan_full_loss(&inputs).is_err());
    }

    #[test]
    fn perfect_reconstruction_leaves_adversarial_sum() {
        let mut inputs = offset_images(0.0);
        inputs.target_disc = disc(0.3, 0.6, 3);
        inputs.source_disc = disc(0.8, 0.1, 3);
        inputs.lambda_cyc = 7.0;
        let adv = gan_adversarial_loss(&inputs, Direction::SourceToTarget).unwrap()
            + gan_adversarial_loss(&inputs, Direction::TargetToSource).unwrap();
        assert_eq!(cyclegan_full_loss(&inputs).unwrap(), adv);
    }
}
