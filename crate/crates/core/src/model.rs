//! Full model assembly and checkpointing.
//!
//! Two topologies share the front-end. `SpotFastOnly` (training phase 1)
//! wires the two-pathway front-end straight into the dual temporal-conv
//! back-end and classifier. `WithTransformers` (phases 2 and 3) inserts the
//! memory-augmented lateral transformers between them: pooled backbone
//! features are linearly projected to the transformer width per pathway,
//! encoded, and the encoder outputs feed temporal-conv stacks sized for that
//! width. The two heads are distinct modules with distinct parameter names,
//! so loading a phase-1 checkpoint into a phase-2 model restores exactly the
//! front-end and leaves the new head freshly initialized.
//!
//! Checkpoints are archives of every named tensor (parameters and buffers)
//! plus a JSON echo of the model config and topology, so evaluation can
//! reconstruct the exact architecture from the file alone.

use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{spatial_pool, SpotFastBackbone};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore};
use crate::temporal_conv::{fused_width, stack_length_trace, FusedClassifier, TemporalConvStack};
use crate::tensorio::{self, CheckpointMeta};
use crate::transformer::LateralTransformers;
use crate::windowing::window_start;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    SpotFastOnly,
    WithTransformers,
}

impl Topology {
    pub fn for_phase(phase: u32) -> Topology {
        if phase <= 1 {
            Topology::SpotFastOnly
        } else {
            Topology::WithTransformers
        }
    }
}

struct EncoderHead {
    spot_proj: Linear,
    fast_proj: Linear,
    xf: LateralTransformers,
}

pub struct SpotFastModel {
    pub cfg: ModelConfig,
    pub topology: Topology,
    pub ps: ParamStore,
    pub backbone: SpotFastBackbone,
    encoder: Option<EncoderHead>,
    tc_spot: TemporalConvStack,
    tc_fast: TemporalConvStack,
    pub classifier: FusedClassifier,
    backbone_frozen: bool,
}

impl SpotFastModel {
    pub fn new(cfg: &ModelConfig, topology: Topology, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut init = Init::new(seed);
        let backbone = SpotFastBackbone::new(&mut ps, &mut init, "backbone", &cfg.backbone)?;

        let (encoder, tc_spot_ch, tc_fast_ch, head_prefix) = match topology {
            Topology::SpotFastOnly => (
                None,
                cfg.backbone.spot_channels(),
                cfg.backbone.fast_channels(),
                "head.direct",
            ),
            Topology::WithTransformers => {
                let d = cfg.transformer.model_dim;
                let spot_proj = Linear::new(
                    &mut ps,
                    &mut init,
                    "encoder.spot_proj",
                    cfg.backbone.spot_channels(),
                    d,
                    true,
                );
                let fast_proj = Linear::new(
                    &mut ps,
                    &mut init,
                    "encoder.fast_proj",
                    cfg.backbone.fast_channels(),
                    d,
                    true,
                );
                let xf = LateralTransformers::new(
                    &mut ps,
                    &mut init,
                    "encoder.xf",
                    &cfg.transformer,
                    &cfg.spot_memory,
                    &cfg.fast_memory,
                )?;
                (
                    Some(EncoderHead {
                        spot_proj,
                        fast_proj,
                        xf,
                    }),
                    d,
                    d,
                    "head.encoded",
                )
            }
        };
        let tc_spot = TemporalConvStack::new(
            &mut ps,
            &mut init,
            &format!("{head_prefix}.spot_tc"),
            tc_spot_ch,
            3,
        );
        let tc_fast = TemporalConvStack::new(
            &mut ps,
            &mut init,
            &format!("{head_prefix}.fast_tc"),
            tc_fast_ch,
            5,
        );
        let classifier = FusedClassifier::new(
            &mut ps,
            &mut init,
            &format!("{head_prefix}.classifier"),
            tc_spot_ch,
            tc_fast_ch,
            cfg.num_classes,
        );
        Ok(SpotFastModel {
            cfg: cfg.clone(),
            topology,
            ps,
            backbone,
            encoder,
            tc_spot,
            tc_fast,
            classifier,
            backbone_frozen: false,
        })
    }

    /// Window start of the spot pathway inside the full clip; also the
    /// positional-encoding offset.
    pub fn spot_offset(&self) -> usize {
        window_start(self.cfg.backbone.full_len, self.cfg.backbone.window_size)
    }

    /// Collapses a 5-mode feature map to `[B, C, T]` by spatial pooling and
    /// averaging what remains.
    fn to_sequence(&self, g: &mut Graph, x: crate::backbone::FeatureMap) -> Result<Var> {
        let pooled = spatial_pool(g, x)?;
        let m = g.mean_axis(pooled.0, 4);
        Ok(g.mean_axis(m, 3))
    }

    /// `window [B,C,w,H,W]`, `full [B,C,T,H,W]` -> logits `[B, num_classes]`.
    pub fn forward(&mut self, g: &mut Graph, window: Var, full: Var, train: bool) -> Result<Var> {
        let bb_train = train && !self.backbone_frozen;
        let (spot, fast) = self
            .backbone
            .forward(g, &mut self.ps, window, full, bb_train)?;
        let spot_seq = self.to_sequence(g, spot)?; // [B, C_s, w]
        let fast_seq = self.to_sequence(g, fast)?; // [B, C_f, T]

        let (spot_in, fast_in) = match &self.encoder {
            None => (spot_seq, fast_seq),
            Some(head) => {
                let d = self.cfg.transformer.model_dim;
                let project = |g: &mut Graph, ps: &ParamStore, seq: Var, lin: &Linear| {
                    let s = g.shape(seq).to_vec();
                    let (b, c, t) = (s[0], s[1], s[2]);
                    let tm = g.permute(seq, &[0, 2, 1]);
                    let flat = g.reshape(tm, &[b * t, c]);
                    let proj = lin.forward(g, ps, flat);
                    g.reshape(proj, &[b, t, d])
                };
                let spot_tokens = project(g, &self.ps, spot_seq, &head.spot_proj);
                let fast_tokens = project(g, &self.ps, fast_seq, &head.fast_proj);
                let offset = self.spot_offset();
                let (so, fo) =
                    head.xf
                        .encode(g, &mut self.ps, spot_tokens, fast_tokens, offset, train)?;
                // back to [B, D, T] for the temporal stacks
                (g.permute(so, &[0, 2, 1]), g.permute(fo, &[0, 2, 1]))
            }
        };
        let spot_vec = self.tc_spot.forward_pooled(g, &mut self.ps, spot_in, train)?;
        let fast_vec = self.tc_fast.forward_pooled(g, &mut self.ps, fast_in, train)?;
        self.classifier.forward(g, &self.ps, spot_vec, fast_vec)
    }

    /// Eval-mode predictions with deterministic first-maximum tie breaking.
    pub fn predict(
        &mut self,
        window: &ArrayD<f64>,
        full: &ArrayD<f64>,
    ) -> Result<(Vec<usize>, ArrayD<f64>)> {
        let mut g = Graph::new(false, 0);
        let wv = g.leaf(window.clone());
        let fv = g.leaf(full.clone());
        let logits = self.forward(&mut g, wv, fv, false)?;
        let values = g.value(logits).clone();
        let preds = values
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        Ok((preds, values))
    }

    /// Value-row usage histograms `(spot, fast)` of the two memories for one
    /// eval-mode batch. Requires the transformer topology.
    pub fn memory_usage(
        &mut self,
        window: &ArrayD<f64>,
        full: &ArrayD<f64>,
    ) -> Result<(Vec<u64>, Vec<u64>)> {
        if self.encoder.is_none() {
            return Err(Error::Prerequisite(
                "memory diagnostics need the transformer topology (phase >= 2 checkpoint)".into(),
            ));
        }
        let mut g = Graph::new(false, 0);
        let wv = g.leaf(window.clone());
        let fv = g.leaf(full.clone());
        let (spot, fast) = self
            .backbone
            .forward(&mut g, &mut self.ps, wv, fv, false)?;
        let spot_seq = self.to_sequence(&mut g, spot)?;
        let fast_seq = self.to_sequence(&mut g, fast)?;
        let d = self.cfg.transformer.model_dim;
        let offset = self.spot_offset();
        let head = self.encoder.as_ref().unwrap();
        let project = |g: &mut Graph, ps: &ParamStore, seq: Var, lin: &Linear| {
            let s = g.shape(seq).to_vec();
            let (b, c, t) = (s[0], s[1], s[2]);
            let tm = g.permute(seq, &[0, 2, 1]);
            let flat = g.reshape(tm, &[b * t, c]);
            let proj = lin.forward(g, ps, flat);
            g.reshape(proj, &[b, t, d])
        };
        let spot_tokens = project(&mut g, &self.ps, spot_seq, &head.spot_proj);
        let fast_tokens = project(&mut g, &self.ps, fast_seq, &head.fast_proj);
        let (_, _, taps) =
            head.xf
                .encode_captured(&mut g, &mut self.ps, spot_tokens, fast_tokens, offset, false)?;
        let flatten = |g: &Graph, v: Var| -> ndarray::Array2<f64> {
            let s = g.shape(v).to_vec();
            g.value(v)
                .to_shape((s[0] * s[1], s[2]))
                .unwrap()
                .to_owned()
        };
        let spot_in = flatten(&g, taps.spot_input);
        let fast_in = flatten(&g, taps.fast_input);
        let spot_hist = head.xf.spot_memory.usage_stats(&mut self.ps, &spot_in)?;
        let fast_hist = head.xf.fast_memory.usage_stats(&mut self.ps, &fast_in)?;
        Ok((spot_hist, fast_hist))
    }

    /// Freezes parameter groups by name prefix. Freezing the front-end also
    /// pins its normalization buffers (they run in eval mode), so the whole
    /// group stays bit-identical across a phase.
    pub fn freeze(&mut self, prefixes: &[String]) {
        for prefix in prefixes {
            self.ps.set_frozen_by_prefix(prefix, true);
            if prefix.starts_with("backbone") {
                self.backbone_frozen = true;
            }
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.ps.clear_frozen();
        self.backbone_frozen = false;
    }

    pub fn save(&self, path: &Path, phase: u32, epoch: usize) -> Result<()> {
        let meta = CheckpointMeta {
            config: serde_json::json!({
                "model": self.cfg,
                "topology": self.topology,
            }),
            phase,
            epoch,
        };
        tensorio::write_checkpoint(path, &meta, &self.ps.named_tensors())
    }

    /// Loads matching tensors by name; returns what loaded and what stayed
    /// freshly initialized.
    pub fn load_values(&mut self, path: &Path) -> Result<LoadReport> {
        let (_, tensors) = tensorio::read_checkpoint(path)?;
        let loaded = self.ps.load_named_tensors(&tensors)?;
        let loaded_set: std::collections::BTreeSet<&str> =
            loaded.iter().map(|s| s.as_str()).collect();
        let fresh = self
            .ps
            .entries()
            .map(|(_, e)| e.name.clone())
            .filter(|n| !loaded_set.contains(n.as_str()))
            .collect();
        Ok(LoadReport { loaded, fresh })
    }

    /// Reconstructs the exact model a checkpoint was saved from.
    pub fn from_checkpoint(path: &Path) -> Result<(SpotFastModel, CheckpointMeta)> {
        let (meta, tensors) = tensorio::read_checkpoint(path)?;
        let echo: ConfigEcho = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::format(path, format!("bad config echo: {e}")))?;
        let mut model = SpotFastModel::new(&echo.model, echo.topology, 0)?;
        let loaded = model.ps.load_named_tensors(&tensors)?;
        if loaded.len() != model.ps.len() {
            return Err(Error::format(
                path,
                format!(
                    "checkpoint restored {} of {} model tensors",
                    loaded.len(),
                    model.ps.len()
                ),
            ));
        }
        Ok((model, meta))
    }

    /// Hash of every parameter and buffer, for freezing-contract checks.
    pub fn param_fingerprint(&self, prefix: &str) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (_, e) in self.ps.entries() {
            if !e.name.starts_with(prefix) {
                continue;
            }
            for v in e.value.iter() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConfigEcho {
    model: ModelConfig,
    topology: Topology,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub fresh: Vec<String>,
}

/// Symbolic end-to-end shape report; pure arithmetic on the config, no
/// tensors allocated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeReport {
    pub spot_backbone: [usize; 5],
    pub fast_backbone: [usize; 5],
    /// `[B, T, model_dim]` per pathway when transformers are present.
    pub encoder_spot: Option<[usize; 3]>,
    pub encoder_fast: Option<[usize; 3]>,
    /// `[B, C, T]` sequences entering the temporal stacks.
    pub spot_sequence: [usize; 3],
    pub fast_sequence: [usize; 3],
    /// Length traces `[in, conv1, pool1, conv2, pool2]`.
    pub spot_tc_trace: Vec<usize>,
    pub fast_tc_trace: Vec<usize>,
    pub fused_width: usize,
    pub logits: [usize; 2],
}

pub fn symbolic_shapes(
    cfg: &ModelConfig,
    topology: Topology,
    batch: usize,
    input_size: usize,
) -> Result<ShapeReport> {
    let (spot_bb, fast_bb) = cfg.backbone.output_shapes(batch, input_size, input_size);
    let w = cfg.backbone.window_size;
    let t = cfg.backbone.full_len;
    let (encoder_spot, encoder_fast, spot_c, fast_c) = match topology {
        Topology::SpotFastOnly => (
            None,
            None,
            cfg.backbone.spot_channels(),
            cfg.backbone.fast_channels(),
        ),
        Topology::WithTransformers => {
            let d = cfg.transformer.model_dim;
            (Some([batch, w, d]), Some([batch, t, d]), d, d)
        }
    };
    let spot_tc_trace = stack_length_trace(w, 3)?;
    let fast_tc_trace = stack_length_trace(t, 5)?;
    Ok(ShapeReport {
        spot_backbone: spot_bb,
        fast_backbone: fast_bb,
        encoder_spot,
        encoder_fast,
        spot_sequence: [batch, spot_c, w],
        fast_sequence: [batch, fast_c, t],
        fused_width: fused_width(spot_c, fast_c),
        logits: [batch, cfg.num_classes],
        spot_tc_trace,
        fast_tc_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn micro_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk(3, 3);
        cfg.backbone.full_len = 9;
        cfg.backbone.stage_channels_spot = vec![8, 16];
        cfg.backbone.stage_channels_fast = vec![2, 4];
        cfg.backbone.spatial_strides = vec![2, 2];
        cfg.data.frames = 9;
        cfg.data.augment.upsample_min = 16;
        cfg.data.augment.upsample_max = 18;
        cfg.data.augment.crop = 16;
        cfg.data.augment.eval_upsample = 16;
        cfg.transformer.model_dim = 8;
        cfg.transformer.ff_dim = 16;
        cfg.transformer.attn_heads = 2;
        cfg.transformer.layers = 3;
        cfg.transformer.memory_layer = 2;
        cfg.spot_memory = crate::pkmem::PkMemConfig {
            heads: 2,
            key_dim: 8,
            n_keys: 4,
            k: 4,
            input_dim: 8,
            value_dim: 8,
            value_dropout: 0.1,
            layernorm: crate::pkmem::LnMode::Affine,
        };
        cfg.fast_memory = cfg.spot_memory.clone();
        cfg
    }

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() - 0.5)
    }

    fn micro_inputs(cfg: &ModelConfig, b: usize, seed: u64) -> (ArrayD<f64>, ArrayD<f64>) {
        let s = cfg.input_size();
        let full = randn(&[b, 3, cfg.backbone.full_len, s, s], seed);
        let start = window_start(cfg.backbone.full_len, cfg.backbone.window_size);
        let window = full
            .slice(ndarray::s![
                ..,
                ..,
                start..start + cfg.backbone.window_size,
                ..,
                ..
            ])
            .to_owned()
            .into_dyn();
        (window, full)
    }

    #[test]
    fn both_topologies_emit_class_logits() {
        let cfg = micro_cfg();
        for topology in [Topology::SpotFastOnly, Topology::WithTransformers] {
            let mut model = SpotFastModel::new(&cfg, topology, 1).unwrap();
            let (window, full) = micro_inputs(&cfg, 2, 3);
            let mut g = Graph::new(true, 0);
            let wv = g.leaf(window);
            let fv = g.leaf(full);
            let logits = model.forward(&mut g, wv, fv, true).unwrap();
            assert_eq!(g.shape(logits), &[2, 3]);
            assert!(g.value(logits).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn predict_breaks_ties_toward_the_first_class() {
        let cfg = micro_cfg();
        let mut model = SpotFastModel::new(&cfg, Topology::SpotFastOnly, 2).unwrap();
        // zeroed classifier makes all logits equal
        model.ps.value_mut(model.classifier.linear.w).fill(0.0);
        if let Some(b) = model.classifier.linear.b {
            model.ps.value_mut(b).fill(0.0);
        }
        let (window, full) = micro_inputs(&cfg, 3, 5);
        let (preds, logits) = model.predict(&window, &full).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        assert_eq!(preds, vec![0, 0, 0]);
    }

    #[test]
    fn checkpoint_roundtrip_restores_every_tensor() {
        let cfg = micro_cfg();
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.sfckpt");
        let model = SpotFastModel::new(&cfg, Topology::WithTransformers, 3).unwrap();
        model.save(&path, 2, 1).unwrap();
        let (restored, meta) = SpotFastModel::from_checkpoint(&path).unwrap();
        assert_eq!(meta.phase, 2);
        assert_eq!(restored.topology, Topology::WithTransformers);
        assert_eq!(
            restored.param_fingerprint(""),
            model.param_fingerprint("")
        );
        // predictions agree bit-for-bit
        let (window, full) = micro_inputs(&cfg, 2, 7);
        let mut a = model;
        let mut b = restored;
        let (pa, la) = a.predict(&window, &full).unwrap();
        let (pb, lb) = b.predict(&window, &full).unwrap();
        assert_eq!(pa, pb);
        assert!(la
            .iter()
            .zip(lb.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn phase1_checkpoint_seeds_only_the_front_end_of_phase2() {
        let cfg = micro_cfg();
        let dir = tempdir().unwrap();
        let path = dir.path().join("p1.sfckpt");
        let p1 = SpotFastModel::new(&cfg, Topology::SpotFastOnly, 4).unwrap();
        p1.save(&path, 1, 3).unwrap();

        let mut p2 = SpotFastModel::new(&cfg, Topology::WithTransformers, 5).unwrap();
        let report = p2.load_values(&path).unwrap();
        assert!(report
            .loaded
            .iter()
            .all(|n| n.starts_with("backbone.")));
        assert!(report.loaded.iter().count() > 0);
        assert!(report
            .fresh
            .iter()
            .all(|n| n.starts_with("encoder.") || n.starts_with("head.encoded.")));
        assert_eq!(
            p2.param_fingerprint("backbone."),
            p1.param_fingerprint("backbone.")
        );
    }

    #[test]
    fn symbolic_report_matches_a_real_forward_pass() {
        let cfg = micro_cfg();
        let report = symbolic_shapes(&cfg, Topology::SpotFastOnly, 2, 16).unwrap();
        let mut model = SpotFastModel::new(&cfg, Topology::SpotFastOnly, 6).unwrap();
        let (window, full) = micro_inputs(&cfg, 2, 9);
        let mut g = Graph::new(false, 0);
        let wv = g.leaf(window);
        let fv = g.leaf(full);
        let (spot, fast) = model
            .backbone
            .forward(&mut g, &mut model.ps, wv, fv, false)
            .unwrap();
        assert_eq!(spot.dims(&g), report.spot_backbone);
        assert_eq!(fast.dims(&g), report.fast_backbone);
        let logits = {
            let mut g2 = Graph::new(false, 0);
            let (window, full) = micro_inputs(&cfg, 2, 9);
            let wv = g2.leaf(window);
            let fv = g2.leaf(full);
            let l = model.forward(&mut g2, wv, fv, false).unwrap();
            g2.shape(l).to_vec()
        };
        assert_eq!(logits, report.logits.to_vec());
    }

    #[test]
    fn freezing_marks_backbone_and_survives_roundtrip() {
        let cfg = micro_cfg();
        let mut model = SpotFastModel::new(&cfg, Topology::WithTransformers, 7).unwrap();
        model.freeze(&["backbone.".to_string()]);
        let frozen = model
            .ps
            .entries()
            .filter(|(_, e)| e.frozen)
            .count();
        assert!(frozen > 0);
        assert!(model
            .ps
            .entries()
            .all(|(_, e)| e.frozen == e.name.starts_with("backbone.")));
        model.unfreeze_all();
        assert!(model.ps.entries().all(|(_, e)| !e.frozen));
    }
}
