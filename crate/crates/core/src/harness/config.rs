use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, Measure};
use crate::datagen::{synth_glyph_dataset, load_idx_dataset, BatchComposition, Dataset, GLYPH_SIZE};
use crate::em_trainer::{EmConfig, TrainFlags};
use crate::error::{ensure, Error, Result};
use crate::model::ConvNetSpec;
use crate::optim::LrSchedule;
use crate::translation::StyleMapConfig;

/// Environment variable holding the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "ATTALIGN_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Procedural glyphs; train and test sets come from different seeds.
    SynthGlyphs {
        train_size: usize,
        test_size: usize,
        num_classes: usize,
        seed: u64,
    },
    /// IDX image/label pairs (MNIST layout).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::SynthGlyphs {
                train_size,
                test_size,
                num_classes,
                seed,
            } => Ok((
                synth_glyph_dataset(*train_size, *num_classes, *seed)?,
                synth_glyph_dataset(*test_size, *num_classes, seed.wrapping_add(0x7e57))?,
            )),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let mut train = load_idx_dataset(train_images, train_labels)?;
                let mut test = load_idx_dataset(test_images, test_labels)?;
                if let Some(n) = train_limit {
                    train = train.truncated(*n);
                }
                if let Some(n) = test_limit {
                    test = test.truncated(*n);
                }
                Ok((train, test))
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::SynthGlyphs { num_classes, .. } => *num_classes,
            DatasetSpec::Idx { .. } => 10,
        }
    }
}

/// Source pre-training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTraining {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
}

impl Default for SourceTraining {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            lr_schedule: LrSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub translator: StyleMapConfig,
    pub network: ConvNetSpec,
    pub batch: BatchComposition,
    pub em: EmConfig,
    pub flags: TrainFlags,
    pub source: SourceTraining,
    /// Adaptation steps.
    pub steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    /// Seeds used by the grid commands.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// 4000 glyph images, batch 64, 4000 adaptation steps, three seeds.
    pub fn desk() -> Self {
        let k = 10;
        Self {
            dataset: DatasetSpec::SynthGlyphs {
                train_size: 4000,
                test_size: 1000,
                num_classes: k,
                seed: 1,
            },
            translator: StyleMapConfig::digit_style(GLYPH_SIZE, GLYPH_SIZE, 17),
            network: ConvNetSpec::default_mnist(k),
            batch: BatchComposition::default(),
            em: EmConfig::default(),
            flags: TrainFlags::default(),
            source: SourceTraining::default(),
            steps: 4000,
            eval_every: 250,
            seed: 0,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
        }
    }

    /// A narrow network and short schedules that finish in minutes on one core.
    pub fn quick() -> Self {
        let k = 10;
        let mut cfg = Self::desk();
        cfg.dataset = DatasetSpec::SynthGlyphs {
            train_size: 2000,
            test_size: 500,
            num_classes: k,
            seed: 1,
        };
        cfg.network = ConvNetSpec::with_widths([1, GLYPH_SIZE, GLYPH_SIZE], [8, 16, 32], k);
        cfg.batch.batch_size = 32;
        cfg.source = SourceTraining {
            steps: 400,
            batch_size: 32,
            lr_schedule: LrSchedule::StepDecay {
                lr0: 0.003,
                gamma: 0.5,
                decay_steps: 200,
            },
        };
        // four halvings per sync window; runs end on a window boundary so the
        // reported accuracy is taken at the smallest learning rate
        cfg.em.sync_period = 200;
        cfg.em.lr_schedule = LrSchedule::StepDecay {
            lr0: 0.003,
            gamma: 0.5,
            decay_steps: 50,
        };
        cfg.steps = 3000;
        cfg.eval_every = 500;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.network.validate()?;
        ensure!(
            self.network.input == [1, self.translator.height, self.translator.width],
            Shape,
            "network input {:?} does not match translator size {}x{}",
            self.network.input,
            self.translator.height,
            self.translator.width
        );
        ensure!(
            self.network.num_classes == self.dataset.num_classes(),
            InvalidArgument,
            "network has {} classes, dataset {}",
            self.network.num_classes,
            self.dataset.num_classes()
        );
        ensure!(!shapes.is_empty(), InvalidArgument, "network has no layers");
        for &l in &self.flags.layers {
            ensure!(
                self.network.tap_layers.contains(&l),
                InvalidArgument,
                "alignment layer {l} is not tapped"
            );
        }
        self.batch.validate()?;
        self.em.validate()?;
        ensure!(self.source.batch_size > 0, InvalidArgument, "source batch size must be positive");
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// `output_dir`, placed under the output-root variable when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn with_measure(mut self, measure: Measure, mode: AttentionMode) -> Self {
        self.flags.measure = measure;
        self.flags.mode = mode;
        self
    }
}
