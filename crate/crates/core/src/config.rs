//! Model and training configuration: presets, overrides, and the on-disk
//! config file.
//!
//! Two presets exist. `paper` mirrors the reference scale (pathway widths
//! 2048/256, 512-d transformers, 168^2/50^2 memories, 112x112 crops, batch
//! 84/64). `desk` keeps the identical control flow at tractable cost
//! (64/16 widths, 64-d transformers, 8^2 memories, 32x32 crops, batch 8).
//! Config files are TOML with a `preset` key plus sparse overrides; unknown
//! keys are rejected with the offending path.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::pkmem::PkMemConfig;
use crate::preprocess::{AugmentConfig, CropBox};
use crate::transformer::TransformerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}, expected paper|desk"
            ))),
        }
    }
}

/// Input pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Expected frames per clip.
    pub frames: usize,
    pub channels: usize,
    /// Collapse RGB to luma before the model.
    pub grayscale: bool,
    /// Fixed mouth-crop coordinates, applied before everything else when set.
    /// The reference default assumes spatially centered 256x256 inputs.
    pub mouth_crop: Option<CropBox>,
    pub augment: AugmentConfig,
}

/// Scalable architecture description with paper-scale defaults and the
/// desk-scale preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub transformer: TransformerConfig,
    pub spot_memory: PkMemConfig,
    pub fast_memory: PkMemConfig,
    pub data: DataConfig,
}

impl ModelConfig {
    pub fn paper(window_size: usize, num_classes: usize) -> Self {
        let transformer = TransformerConfig::paper();
        let d = transformer.model_dim;
        ModelConfig {
            preset: Preset::Paper,
            num_classes,
            backbone: BackboneConfig::paper(window_size),
            spot_memory: PkMemConfig::paper_spot(d, d),
            fast_memory: PkMemConfig::paper_fast(d, d),
            transformer,
            data: DataConfig {
                frames: 29,
                channels: 3,
                grayscale: false,
                mouth_crop: Some(CropBox {
                    top: 96,
                    left: 80,
                    height: 96,
                    width: 96,
                }),
                augment: AugmentConfig::paper(),
            },
        }
    }

    pub fn desk(window_size: usize, num_classes: usize) -> Self {
        let transformer = TransformerConfig::desk();
        let d = transformer.model_dim;
        ModelConfig {
            preset: Preset::Desk,
            num_classes,
            backbone: BackboneConfig::desk(window_size),
            spot_memory: PkMemConfig::desk(d, d),
            fast_memory: PkMemConfig::desk(d, d),
            transformer,
            data: DataConfig {
                frames: 29,
                channels: 3,
                grayscale: false,
                mouth_crop: None,
                augment: AugmentConfig {
                    upsample_min: 34,
                    upsample_max: 40,
                    crop: 32,
                    eval_upsample: 34,
                },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        self.backbone.validate()?;
        self.transformer.validate()?;
        self.spot_memory.validate()?;
        self.fast_memory.validate()?;
        self.data.augment.validate()?;
        if self.backbone.full_len != self.data.frames {
            return Err(Error::Config(format!(
                "backbone full length {} != data frames {}",
                self.backbone.full_len, self.data.frames
            )));
        }
        if self.backbone.in_channels != if self.data.grayscale { 1 } else { self.data.channels } {
            return Err(Error::Config(
                "backbone input channels disagree with the data pipeline".into(),
            ));
        }
        Ok(())
    }

    /// Spatial input size the model sees (the augment crop).
    pub fn input_size(&self) -> usize {
        self.data.augment.crop
    }
}

/// One training phase: optimizer settings, scheduler chain, frozen set,
/// epoch budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phase_id: u32,
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    /// Parameter-name prefixes excluded from updates.
    pub frozen: Vec<String>,
    /// Chain validation-plateau reduction after the cosine schedule.
    pub plateau: bool,
    pub plateau_patience: usize,
}

impl PhasePlan {
    /// Reference-scale plans: phase 1 trains the front-end end-to-end, phase
    /// 2 freezes it and trains the transformers and temporal back-end, phase
    /// 3 finetunes everything with plateau reduction chained.
    pub fn paper(phase: u32) -> Result<Self> {
        let plan = match phase {
            1 => PhasePlan {
                phase_id: 1,
                lr0: 2.5e-4,
                weight_decay: 1e-4,
                batch_size: 84,
                epochs: 10,
                warmup_steps: 2000,
                frozen: vec![],
                plateau: false,
                plateau_patience: 1,
            },
            2 => PhasePlan {
                phase_id: 2,
                lr0: 2.25e-4,
                weight_decay: 3e-4,
                batch_size: 84,
                epochs: 5,
                warmup_steps: 1000,
                frozen: vec!["backbone.".to_string()],
                plateau: false,
                plateau_patience: 1,
            },
            3 => PhasePlan {
                phase_id: 3,
                lr0: 1.566e-4,
                weight_decay: 1e-4,
                batch_size: 64,
                epochs: 30,
                warmup_steps: 1000,
                frozen: vec![],
                plateau: true,
                plateau_patience: 1,
            },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "phase {other} out of range 1..=3"
                )))
            }
        };
        Ok(plan)
    }

    /// Desk-scale plans: batch 8, epochs {3, 2, 5}, warmup {50, 25, 25},
    /// same learning rates.
    pub fn desk(phase: u32) -> Result<Self> {
        let mut plan = Self::paper(phase)?;
        plan.batch_size = 8;
        (plan.epochs, plan.warmup_steps) = match phase {
            1 => (3, 50),
            2 => (2, 25),
            _ => (5, 25),
        };
        Ok(plan)
    }

    pub fn preset(preset: Preset, phase: u32) -> Result<Self> {
        match preset {
            Preset::Paper => Self::paper(phase),
            Preset::Desk => Self::desk(phase),
        }
    }
}

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataOverrides {
    pub frames: Option<usize>,
    pub channels: Option<usize>,
    pub grayscale: Option<bool>,
    pub mouth_crop: Option<CropBox>,
    pub upsample_min: Option<usize>,
    pub upsample_max: Option<usize>,
    pub crop: Option<usize>,
    pub eval_upsample: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseOverrides {
    pub lr0: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub warmup_steps: Option<usize>,
    pub plateau_patience: Option<usize>,
}

/// On-disk config: a preset plus sparse overrides.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Preset,
    pub num_classes: Option<usize>,
    pub window_size: Option<usize>,
    pub model_dim: Option<usize>,
    pub ff_dim: Option<usize>,
    pub memory_n_keys: Option<usize>,
    pub memory_k: Option<usize>,
    #[serde(default)]
    pub data: DataOverrides,
    #[serde(default)]
    pub phase1: PhaseOverrides,
    #[serde(default)]
    pub phase2: PhaseOverrides,
    #[serde(default)]
    pub phase3: PhaseOverrides,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn default_for(preset: Preset) -> Self {
        ConfigFile {
            preset,
            num_classes: None,
            window_size: None,
            model_dim: None,
            ff_dim: None,
            memory_n_keys: None,
            memory_k: None,
            data: DataOverrides::default(),
            phase1: PhaseOverrides::default(),
            phase2: PhaseOverrides::default(),
            phase3: PhaseOverrides::default(),
        }
    }

    /// Materializes the model config and the three phase plans.
    pub fn build(&self) -> Result<(ModelConfig, [PhasePlan; 3])> {
        let num_classes = self.num_classes.unwrap_or(match self.preset {
            Preset::Paper => 500,
            Preset::Desk => 10,
        });
        let window_size = self.window_size.unwrap_or(match self.preset {
            Preset::Paper => 23,
            Preset::Desk => 7,
        });
        let mut model = match self.preset {
            Preset::Paper => ModelConfig::paper(window_size, num_classes),
            Preset::Desk => ModelConfig::desk(window_size, num_classes),
        };
        if let Some(d) = self.model_dim {
            model.transformer.model_dim = d;
            model.spot_memory.input_dim = d;
            model.spot_memory.value_dim = d;
            model.fast_memory.input_dim = d;
            model.fast_memory.value_dim = d;
        }
        if let Some(f) = self.ff_dim {
            model.transformer.ff_dim = f;
        }
        if let Some(n) = self.memory_n_keys {
            model.spot_memory.n_keys = n;
            model.fast_memory.n_keys = n;
        }
        if let Some(k) = self.memory_k {
            model.spot_memory.k = k;
            model.fast_memory.k = k;
        }
        let d = &self.data;
        if let Some(v) = d.frames {
            model.data.frames = v;
            model.backbone.full_len = v;
        }
        if let Some(v) = d.channels {
            model.data.channels = v;
            model.backbone.in_channels = v;
        }
        if let Some(v) = d.grayscale {
            model.data.grayscale = v;
            if v {
                model.backbone.in_channels = 1;
            }
        }
        if let Some(v) = d.mouth_crop {
            model.data.mouth_crop = Some(v);
        }
        if let Some(v) = d.upsample_min {
            model.data.augment.upsample_min = v;
        }
        if let Some(v) = d.upsample_max {
            model.data.augment.upsample_max = v;
        }
        if let Some(v) = d.crop {
            model.data.augment.crop = v;
        }
        if let Some(v) = d.eval_upsample {
            model.data.augment.eval_upsample = v;
        }
        model.validate()?;
        model.backbone.check_width_ratio()?;

        let mut plans = [
            PhasePlan::preset(self.preset, 1)?,
            PhasePlan::preset(self.preset, 2)?,
            PhasePlan::preset(self.preset, 3)?,
        ];
        for (plan, over) in plans
            .iter_mut()
            .zip([&self.phase1, &self.phase2, &self.phase3])
        {
            if let Some(v) = over.lr0 {
                plan.lr0 = v;
            }
            if let Some(v) = over.weight_decay {
                plan.weight_decay = v;
            }
            if let Some(v) = over.batch_size {
                plan.batch_size = v;
            }
            if let Some(v) = over.epochs {
                plan.epochs = v;
            }
            if let Some(v) = over.warmup_steps {
                plan.warmup_steps = v;
            }
            if let Some(v) = over.plateau_patience {
                plan.plateau_patience = v;
            }
        }
        Ok((model, plans))
    }
}

/// One row of the config-key reference printed by the CLI.
pub struct ConfigKeyDoc {
    pub key: &'static str,
    pub paper_default: String,
    pub doc: &'static str,
}

/// Every config-file key with its paper-preset default, for `--help`-style
/// listings.
pub fn config_key_docs() -> Vec<ConfigKeyDoc> {
    let paper = ModelConfig::paper(23, 500);
    let p1 = PhasePlan::paper(1).unwrap();
    let p2 = PhasePlan::paper(2).unwrap();
    let p3 = PhasePlan::paper(3).unwrap();
    vec![
        ConfigKeyDoc { key: "preset", paper_default: "paper".into(), doc: "scale preset: paper|desk" },
        ConfigKeyDoc { key: "num_classes", paper_default: "500".into(), doc: "word classes" },
        ConfigKeyDoc { key: "window_size", paper_default: "23".into(), doc: "spot-pathway temporal window (odd); candidates 15/19/23" },
        ConfigKeyDoc { key: "model_dim", paper_default: paper.transformer.model_dim.to_string(), doc: "transformer width per pathway" },
        ConfigKeyDoc { key: "ff_dim", paper_default: paper.transformer.ff_dim.to_string(), doc: "transformer feed-forward width" },
        ConfigKeyDoc { key: "memory_n_keys", paper_default: format!("{} (spot) / {} (fast)", paper.spot_memory.n_keys, paper.fast_memory.n_keys), doc: "sub-keys per half; value rows are n^2" },
        ConfigKeyDoc { key: "memory_k", paper_default: paper.spot_memory.k.to_string(), doc: "memory nearest neighbors per head" },
        ConfigKeyDoc { key: "data.frames", paper_default: "29".into(), doc: "frames per clip" },
        ConfigKeyDoc { key: "data.channels", paper_default: "3".into(), doc: "input channels (RGB default)" },
        ConfigKeyDoc { key: "data.grayscale", paper_default: "false".into(), doc: "collapse RGB to luma" },
        ConfigKeyDoc { key: "data.mouth_crop", paper_default: "top 96, left 80, 96x96".into(), doc: "fixed mouth crop for 256x256 inputs" },
        ConfigKeyDoc { key: "data.upsample_min", paper_default: "122".into(), doc: "random upsample lower bound" },
        ConfigKeyDoc { key: "data.upsample_max", paper_default: "146".into(), doc: "random upsample upper bound" },
        ConfigKeyDoc { key: "data.crop", paper_default: "112".into(), doc: "training crop size" },
        ConfigKeyDoc { key: "data.eval_upsample", paper_default: "122".into(), doc: "eval upsample before center crop" },
        ConfigKeyDoc { key: "phaseN.lr0", paper_default: format!("{} / {} / {}", p1.lr0, p2.lr0, p3.lr0), doc: "initial learning rate per phase" },
        ConfigKeyDoc { key: "phaseN.weight_decay", paper_default: format!("{} / {} / {}", p1.weight_decay, p2.weight_decay, p3.weight_decay), doc: "weight decay per phase" },
        ConfigKeyDoc { key: "phaseN.batch_size", paper_default: format!("{} / {} / {}", p1.batch_size, p2.batch_size, p3.batch_size), doc: "batch size per phase" },
        ConfigKeyDoc { key: "phaseN.epochs", paper_default: format!("{} / {} / {}", p1.epochs, p2.epochs, p3.epochs), doc: "epoch budget per phase" },
        ConfigKeyDoc { key: "phaseN.warmup_steps", paper_default: format!("{} / {} / {}", p1.warmup_steps, p2.warmup_steps, p3.warmup_steps), doc: "linear warmup steps per phase" },
        ConfigKeyDoc { key: "phaseN.plateau_patience", paper_default: "1".into(), doc: "evaluations without improvement before halving (phase 3)" },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for w in [15, 19, 23] {
            ModelConfig::paper(w, 500).validate().unwrap();
        }
        ModelConfig::desk(7, 10).validate().unwrap();
    }

    #[test]
    fn paper_phase_plans_match_reference_values() {
        let p1 = PhasePlan::paper(1).unwrap();
        assert_eq!((p1.lr0, p1.weight_decay), (2.5e-4, 1e-4));
        assert_eq!((p1.batch_size, p1.epochs, p1.warmup_steps), (84, 10, 2000));
        assert!(p1.frozen.is_empty() && !p1.plateau);

        let p2 = PhasePlan::paper(2).unwrap();
        assert_eq!((p2.lr0, p2.weight_decay), (2.25e-4, 3e-4));
        assert_eq!((p2.batch_size, p2.epochs, p2.warmup_steps), (84, 5, 1000));
        assert_eq!(p2.frozen, vec!["backbone.".to_string()]);

        let p3 = PhasePlan::paper(3).unwrap();
        assert_eq!((p3.lr0, p3.weight_decay), (1.566e-4, 1e-4));
        assert_eq!((p3.batch_size, p3.epochs, p3.warmup_steps), (64, 30, 1000));
        assert!(p3.frozen.is_empty() && p3.plateau);
    }

    #[test]
    fn desk_phase_plans_override_cost_knobs_only() {
        for phase in 1..=3 {
            let paper = PhasePlan::paper(phase).unwrap();
            let desk = PhasePlan::desk(phase).unwrap();
            assert_eq!(desk.lr0, paper.lr0);
            assert_eq!(desk.weight_decay, paper.weight_decay);
            assert_eq!(desk.batch_size, 8);
            assert_eq!(desk.frozen, paper.frozen);
        }
        assert_eq!(PhasePlan::desk(1).unwrap().epochs, 3);
        assert_eq!(PhasePlan::desk(2).unwrap().epochs, 2);
        assert_eq!(PhasePlan::desk(3).unwrap().epochs, 5);
        assert_eq!(PhasePlan::desk(1).unwrap().warmup_steps, 50);
        assert_eq!(PhasePlan::desk(3).unwrap().warmup_steps, 25);
    }

    #[test]
    fn config_file_round_trip_with_overrides() {
        let text = r#"
            preset = "desk"
            num_classes = 4
            window_size = 5

            [data]
            frames = 17

            [phase1]
            epochs = 9
        "#;
        let cf = ConfigFile::parse(text).unwrap();
        let (model, plans) = cf.build().unwrap();
        assert_eq!(model.num_classes, 4);
        assert_eq!(model.backbone.window_size, 5);
        assert_eq!(model.backbone.full_len, 17);
        assert_eq!(plans[0].epochs, 9);
        assert_eq!(plans[1].epochs, 2);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = ConfigFile::parse("preset = \"desk\"\nbogus_knob = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_knob"), "{err}");
        let err =
            ConfigFile::parse("preset = \"desk\"\n[data]\nnot_a_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("not_a_key"), "{err}");
    }

    #[test]
    fn config_key_docs_cover_the_file_schema() {
        let docs = config_key_docs();
        for key in [
            "preset",
            "num_classes",
            "window_size",
            "model_dim",
            "memory_n_keys",
            "data.frames",
            "phaseN.lr0",
            "phaseN.warmup_steps",
        ] {
            assert!(docs.iter().any(|d| d.key == key), "missing doc for {key}");
        }
    }
}
