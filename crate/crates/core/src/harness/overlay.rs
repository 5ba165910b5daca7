use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{attention_map, AttentionMode};
use crate::error::{ensure, Error, Result};
use crate::model::Network;
use crate::tensor::{Real, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlaySidecar {
    /// `[samples, height, width]` of the raw array.
    pub shape: [usize; 3],
    pub dtype: String,
    pub layer: usize,
    pub mode: AttentionMode,
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear_upsample(values: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sample = |dst: usize, src_len: usize, dst_len: usize| {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = sample(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = sample(x, w, out_w);
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Rescale to `[0, 1]`; a constant input maps to zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn write_gray_png(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// For every sample write `sample_NNN_input.png` and `sample_NNN_attention.png`
/// (map upsampled to the input size, min-max normalized), then all maps as
/// raw little-endian f32 in `attention.f32` with `attention.json` alongside.
pub fn export_attention_overlay<F: Real>(
    network: &Network<F>,
    samples: &[Tensor3<F>],
    layer: usize,
    mode: AttentionMode,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let spec = network.spec();
    ensure!(
        spec.tap_layers.contains(&layer),
        InvalidArgument,
        "layer {layer} is not a tapped convolutional layer (taps: {:?})",
        spec.tap_layers
    );
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let [_, h, w] = spec.input;
    let fwd = network.forward_with_taps(samples)?;
    let taps = fwd.tap(layer)?;
    let mut written = Vec::new();
    let mut raw = Vec::with_capacity(samples.len() * h * w * 4);
    for (i, (x, feat)) in samples.iter().zip(taps).enumerate() {
        let map = attention_map(feat, mode, layer)?;
        let values: Vec<f64> = map.values.iter().map(|v| v.to_f64_lossy()).collect();
        let overlay = min_max_normalize(&bilinear_upsample(&values, map.height, map.width, h, w));
        let input: Vec<f64> = x.channel(0).iter().map(|v| v.to_f64_lossy()).collect();

        let input_path = out_dir.join(format!("sample_{i:03}_input.png"));
        write_gray_png(&input_path, w, h, &input)?;
        let map_path = out_dir.join(format!("sample_{i:03}_attention.png"));
        write_gray_png(&map_path, w, h, &overlay)?;
        written.push(input_path);
        written.push(map_path);
        for v in &overlay {
            raw.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let raw_path = out_dir.join("attention.f32");
    std::fs::write(&raw_path, &raw).map_err(|e| Error::io(&raw_path, e))?;
    let sidecar = OverlaySidecar {
        shape: [samples.len(), h, w],
        dtype: "float32_le".into(),
        layer,
        mode,
    };
    let json_path = out_dir.join("attention.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json_path, e))?;
    written.push(raw_path);
    written.push(json_path);
    Ok(written)
}
