use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    None,
    /// 2×2 window, stride 2, odd trailing rows/columns dropped.
    Max2,
    /// Mean over the spatial plane; only valid on the classifier layer.
    GlobalAvg,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
    pub pool: Pool,
}

impl ConvLayerSpec {
    pub fn conv3_relu(out_channels: usize, pool: Pool) -> Self {
        Self {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            activation: Activation::Relu,
            pool,
        }
    }

    pub fn classifier(num_classes: usize, kernel: usize) -> Self {
        Self {
            out_channels: num_classes,
            kernel,
            stride: 1,
            padding: kernel / 2,
            activation: Activation::Identity,
            pool: Pool::GlobalAvg,
        }
    }
}

/// Layer list; the last layer is the classifier and produces the logits.
/// Taps expose post-activation, pre-pool feature maps of feature layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    /// (channels, height, width)
    pub input: [usize; 3],
    pub layers: Vec<ConvLayerSpec>,
    pub num_classes: usize,
    pub tap_layers: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShapes {
    pub input: [usize; 3],
    /// conv (and activation) output
    pub conv: [usize; 3],
    /// after pooling
    pub output: [usize; 3],
}

impl ConvNetSpec {
    /// conv3×3(32)-ReLU-maxpool, conv3×3(64)-ReLU-maxpool, conv3×3(128)-ReLU,
    /// 1×1 conv classifier with global average pooling; taps on the three
    /// ReLU outputs.
    pub fn default_mnist(num_classes: usize) -> Self {
        Self::with_widths([1, 28, 28], [32, 64, 128], num_classes)
    }

    /// Same topology as [`ConvNetSpec::default_mnist`] with custom widths.
    pub fn with_widths(input: [usize; 3], widths: [usize; 3], num_classes: usize) -> Self {
        Self {
            input,
            layers: vec![
                ConvLayerSpec::conv3_relu(widths[0], Pool::Max2),
                ConvLayerSpec::conv3_relu(widths[1], Pool::Max2),
                ConvLayerSpec::conv3_relu(widths[2], Pool::None),
                ConvLayerSpec::classifier(num_classes, 1),
            ],
            num_classes,
            tap_layers: vec![0, 1, 2],
        }
    }

    pub fn classifier_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn validate(&self) -> Result<Vec<LayerShapes>> {
        ensure!(!self.layers.is_empty(), InvalidArgument, "network has no layers");
        ensure!(self.num_classes >= 2, InvalidArgument, "need at least two classes");
        ensure!(
            self.input.iter().all(|&d| d > 0),
            InvalidArgument,
            "input shape must be positive"
        );
        let last = self.classifier_index();
        let head = &self.layers[last];
        ensure!(
            head.out_channels == self.num_classes,
            InvalidArgument,
            "classifier emits {} channels, expected {} logits",
            head.out_channels,
            self.num_classes
        );
        let mut seen = Vec::new();
        for &t in &self.tap_layers {
            ensure!(
                t < last,
                InvalidArgument,
                "tap {t} is not a feature-extraction conv layer (classifier is layer {last})"
            );
            ensure!(!seen.contains(&t), InvalidArgument, "duplicate tap {t}");
            seen.push(t);
        }

        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        for (i, l) in self.layers.iter().enumerate() {
            ensure!(
                l.out_channels > 0 && l.kernel > 0 && l.stride > 0,
                InvalidArgument,
                "layer {i}: channels, kernel and stride must be positive"
            );
            let span = |d: usize| (d + 2 * l.padding).checked_sub(l.kernel).map(|v| v / l.stride + 1);
            let (Some(h), Some(w)) = (span(cur[1]), span(cur[2])) else {
                return Err(crate::error::Error::InvalidArgument(format!(
                    "layer {i}: kernel {} larger than padded input {}x{}",
                    l.kernel, cur[1], cur[2]
                )));
            };
            let conv = [l.out_channels, h, w];
            let output = match l.pool {
                Pool::None => conv,
                Pool::Max2 => {
                    ensure!(h >= 2 && w >= 2, InvalidArgument, "layer {i}: too small to pool");
                    [l.out_channels, h / 2, w / 2]
                }
                Pool::GlobalAvg => {
                    ensure!(i == last, InvalidArgument, "layer {i}: global pooling only on the classifier");
                    [l.out_channels, 1, 1]
                }
            };
            if i == last {
                ensure!(
                    output[1] == 1 && output[2] == 1,
                    InvalidArgument,
                    "classifier must reduce to 1x1 (use global average pooling)"
                );
            }
            shapes.push(LayerShapes {
                input: cur,
                conv,
                output,
            });
            cur = output;
        }
        Ok(shapes)
    }

    /// Stable identifier of the architecture (hex SHA-256 prefix of the
    /// canonical JSON form).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex_digest(&json)[..16].to_string()
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let shapes = ConvNetSpec::default_mnist(10).validate().unwrap();
        assert_eq!(shapes[0].conv, [32, 28, 28]);
        assert_eq!(shapes[1].conv, [64, 14, 14]);
        assert_eq!(shapes[2].conv, [128, 7, 7]);
        assert_eq!(shapes[3].output, [10, 1, 1]);
    }

    #[test]
    fn tap_on_classifier_rejected() {
        let mut s = ConvNetSpec::default_mnist(10);
        s.tap_layers = vec![0, 3];
        assert!(s.validate().is_err());
        s.tap_layers = vec![7];
        assert!(s.validate().is_err());
    }

    #[test]
    fn head_must_match_classes() {
        let mut s = ConvNetSpec::default_mnist(10);
        s.num_classes = 5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn hash_tracks_spec() {
        let a = ConvNetSpec::default_mnist(10);
        let b = ConvNetSpec::with_widths([1, 28, 28], [8, 16, 32], 10);
        assert_eq!(a.hash(), ConvNetSpec::default_mnist(10).hash());
        assert_ne!(a.hash(), b.hash());
    }
}
