//! Two-pathway 3-D convolutional front-end.
//!
//! The spot pathway reads the temporal window, the fast pathway reads every
//! frame. After every stage except the last, fast features are adaptively
//! pooled to the spot pathway's time length, passed through a learned 3-D
//! convolution that multiplies their channels by `beta`, and concatenated
//! onto the spot stream; the next spot stage consumes the widened input. The
//! final stage outputs keep their configured widths per pathway.
//!
//! The body is a configurable residual CNN stand-in: stage 0 is a plain
//! conv-bn-relu stem, later stages are basic residual blocks with two 3x3x3
//! convolutions. Neither pathway strides in time, so the spot stream keeps
//! the window length and the fast stream keeps the full clip length
//! throughout.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv3d, Init, ParamStore};

/// 5-mode feature array `[batch, channel, time, height, width]`; the
/// inter-module currency. Axis semantics are fixed by position.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap(pub Var);

impl FeatureMap {
    pub fn dims(&self, g: &Graph) -> [usize; 5] {
        let s = g.shape(self.0);
        assert_eq!(s.len(), 5, "feature map must be 5-mode");
        [s[0], s[1], s[2], s[3], s[4]]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Odd temporal window length of the spot pathway.
    pub window_size: usize,
    /// Full clip length seen by the fast pathway.
    pub full_len: usize,
    pub in_channels: usize,
    /// Stage output widths, stage 0 being the stem; the last entry is the
    /// pathway's feature size.
    pub stage_channels_spot: Vec<usize>,
    pub stage_channels_fast: Vec<usize>,
    /// Per-stage spatial stride (time is never strided).
    pub spatial_strides: Vec<usize>,
    /// Channel multiplier of the lateral fusion convolution.
    pub fusion_channel_multiplier: usize,
    /// Temporal kernel of the lateral fusion convolution.
    pub fusion_time_kernel: usize,
}

impl BackboneConfig {
    /// Reference-scale preset: pathway widths 2048/256 at ratio 8, five
    /// stages, 112x112 inputs pooling down to 4x4.
    pub fn paper(window_size: usize) -> Self {
        BackboneConfig {
            window_size,
            full_len: 29,
            in_channels: 3,
            stage_channels_spot: vec![64, 256, 512, 1024, 2048],
            stage_channels_fast: vec![8, 32, 64, 128, 256],
            spatial_strides: vec![2, 2, 2, 2, 2],
            fusion_channel_multiplier: 2,
            fusion_time_kernel: 5,
        }
    }

    /// Desk-scale preset: same topology at widths 64/16, 32x32 inputs.
    pub fn desk(window_size: usize) -> Self {
        BackboneConfig {
            window_size,
            full_len: 29,
            in_channels: 3,
            stage_channels_spot: vec![16, 32, 64],
            stage_channels_fast: vec![4, 8, 16],
            spatial_strides: vec![2, 2, 2],
            fusion_channel_multiplier: 2,
            fusion_time_kernel: 5,
        }
    }

    pub fn spot_channels(&self) -> usize {
        *self.stage_channels_spot.last().unwrap()
    }

    pub fn fast_channels(&self) -> usize {
        *self.stage_channels_fast.last().unwrap()
    }

    pub fn stages(&self) -> usize {
        self.stage_channels_spot.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size % 2 == 0 || self.window_size > self.full_len {
            return Err(Error::Config(format!(
                "window size {} must be odd and <= full length {}",
                self.window_size, self.full_len
            )));
        }
        if self.stage_channels_spot.is_empty()
            || self.stage_channels_spot.len() != self.stage_channels_fast.len()
            || self.stage_channels_spot.len() != self.spatial_strides.len()
        {
            return Err(Error::Config(
                "stage channel and stride lists must be equal-length and non-empty".into(),
            ));
        }
        Ok(())
    }

    /// Preset invariants on top of [`Self::validate`]: pathway widths
    /// divisible by 8 and the spot pathway at least 4x as wide as the fast
    /// one. The named presets satisfy these; custom configs are checked when
    /// they claim a preset.
    pub fn check_width_ratio(&self) -> Result<()> {
        if self.spot_channels() < 4 * self.fast_channels() {
            return Err(Error::Config(format!(
                "pathway width ratio violated: spot {} < 4 * fast {}",
                self.spot_channels(),
                self.fast_channels()
            )));
        }
        if self.spot_channels() % 8 != 0 || self.fast_channels() % 8 != 0 {
            return Err(Error::Config(
                "pathway widths must be divisible by 8".into(),
            ));
        }
        Ok(())
    }

    /// Spatial extent after the stage strides (3x3 kernels, padding 1):
    /// per stage `n -> (n - 1) / s + 1`.
    pub fn spatial_out(&self, mut n: usize) -> usize {
        for &s in &self.spatial_strides {
            n = (n - 1) / s + 1;
        }
        n
    }

    /// Symbolic output shapes of [`SpotFastBackbone::forward`], no tensors
    /// involved.
    pub fn output_shapes(&self, batch: usize, in_h: usize, in_w: usize) -> ([usize; 5], [usize; 5]) {
        let h = self.spatial_out(in_h);
        let w = self.spatial_out(in_w);
        (
            [batch, self.spot_channels(), self.window_size, h, w],
            [batch, self.fast_channels(), self.full_len, h, w],
        )
    }

    /// Spot-stage input widths, accounting for the channels the lateral
    /// fusion concatenates after every stage but the last.
    fn spot_stage_inputs(&self) -> Vec<usize> {
        let mut ins = vec![self.in_channels];
        for i in 1..self.stages() {
            ins.push(
                self.stage_channels_spot[i - 1]
                    + self.fusion_channel_multiplier * self.stage_channels_fast[i - 1],
            );
        }
        ins
    }
}

/// Temporal adaptive average pooling on a 5-mode feature map.
pub fn adaptive_avg_pool_time(g: &mut Graph, x: FeatureMap, target_len: usize) -> FeatureMap {
    let _ = x.dims(g);
    FeatureMap(g.adaptive_avg_pool_axis(x.0, 2, target_len))
}

/// Average pooling with kernel `[1,4,4]`, stride 1. Fails below 4x4 input.
pub fn spatial_pool(g: &mut Graph, x: FeatureMap) -> Result<FeatureMap> {
    let [_, _, _, h, w] = x.dims(g);
    if h < 4 || w < 4 {
        return Err(Error::Shape(format!(
            "spatial_pool wants at least 4x4 input, got {h}x{w}"
        )));
    }
    Ok(FeatureMap(g.avgpool_spatial(x.0, 4, 4)))
}

struct Stem {
    conv: Conv3d,
    bn: BatchNorm,
}

impl Stem {
    fn new(
        ps: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        Stem {
            conv: Conv3d::new(
                ps,
                init,
                &format!("{name}.conv"),
                in_ch,
                out_ch,
                (3, 3, 3),
                (1, stride, stride),
                (1, 1, 1),
                false,
            ),
            bn: BatchNorm::new(ps, init, &format!("{name}.bn"), out_ch, 1),
        }
    }

    fn forward(&self, g: &mut Graph, ps: &mut ParamStore, x: Var, train: bool) -> Var {
        let y = self.conv.forward(g, ps, x);
        let y = self.bn.forward(g, ps, y, train);
        g.relu(y)
    }
}

struct ResBlock {
    conv1: Conv3d,
    bn1: BatchNorm,
    conv2: Conv3d,
    bn2: BatchNorm,
    shortcut: Option<(Conv3d, BatchNorm)>,
}

impl ResBlock {
    fn new(
        ps: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv3d::new(
            ps,
            init,
            &format!("{name}.conv1"),
            in_ch,
            out_ch,
            (3, 3, 3),
            (1, stride, stride),
            (1, 1, 1),
            false,
        );
        let bn1 = BatchNorm::new(ps, init, &format!("{name}.bn1"), out_ch, 1);
        let conv2 = Conv3d::new(
            ps,
            init,
            &format!("{name}.conv2"),
            out_ch,
            out_ch,
            (3, 3, 3),
            (1, 1, 1),
            (1, 1, 1),
            false,
        );
        let bn2 = BatchNorm::new(ps, init, &format!("{name}.bn2"), out_ch, 1);
        let shortcut = (in_ch != out_ch || stride != 1).then(|| {
            (
                Conv3d::new(
                    ps,
                    init,
                    &format!("{name}.short.conv"),
                    in_ch,
                    out_ch,
                    (1, 1, 1),
                    (1, stride, stride),
                    (0, 0, 0),
                    false,
                ),
                BatchNorm::new(ps, init, &format!("{name}.short.bn"), out_ch, 1),
            )
        });
        ResBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    fn forward(&self, g: &mut Graph, ps: &mut ParamStore, x: Var, train: bool) -> Var {
        let y = self.conv1.forward(g, ps, x);
        let y = self.bn1.forward(g, ps, y, train);
        let y = g.relu(y);
        let y = self.conv2.forward(g, ps, y);
        let y = self.bn2.forward(g, ps, y, train);
        let sc = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, ps, x);
                bn.forward(g, ps, s, train)
            }
            None => x,
        };
        let sum = g.add(y, sc);
        g.relu(sum)
    }
}

/// Fast-to-spot lateral fusion: pool fast features to the spot time length,
/// widen channels by `beta` with a learned convolution, concatenate onto the
/// spot stream.
pub struct LateralFusion {
    pub conv: Conv3d,
}

impl LateralFusion {
    fn new(ps: &mut ParamStore, init: &mut Init, name: &str, fast_ch: usize, cfg: &BackboneConfig) -> Self {
        let kt = cfg.fusion_time_kernel;
        LateralFusion {
            conv: Conv3d::new(
                ps,
                init,
                &format!("{name}.conv"),
                fast_ch,
                cfg.fusion_channel_multiplier * fast_ch,
                (kt, 1, 1),
                (1, 1, 1),
                (kt / 2, 0, 0),
                true,
            ),
        }
    }

    /// `fuse(fast, spot)`: returns the widened spot stream. Spatial extents
    /// must match; any fast time length is accepted.
    pub fn fuse(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        fast: FeatureMap,
        spot: FeatureMap,
    ) -> Result<FeatureMap> {
        let [_, _, spot_t, sh, sw] = spot.dims(g);
        let [_, _, _, fh, fw] = fast.dims(g);
        if (sh, sw) != (fh, fw) {
            return Err(Error::Shape(format!(
                "lateral fusion spatial mismatch: spot {sh}x{sw} vs fast {fh}x{fw}"
            )));
        }
        let pooled = adaptive_avg_pool_time(g, fast, spot_t);
        let projected = self.conv.forward(g, ps, pooled.0);
        Ok(FeatureMap(g.concat(1, spot.0, projected)))
    }
}

pub struct SpotFastBackbone {
    pub cfg: BackboneConfig,
    spot_stem: Stem,
    fast_stem: Stem,
    spot_stages: Vec<ResBlock>,
    fast_stages: Vec<ResBlock>,
    pub fusions: Vec<LateralFusion>,
}

impl SpotFastBackbone {
    pub fn new(ps: &mut ParamStore, init: &mut Init, prefix: &str, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let spot_in = cfg.spot_stage_inputs();
        let spot_stem = Stem::new(
            ps,
            init,
            &format!("{prefix}.spot.stage0"),
            cfg.in_channels,
            cfg.stage_channels_spot[0],
            cfg.spatial_strides[0],
        );
        let fast_stem = Stem::new(
            ps,
            init,
            &format!("{prefix}.fast.stage0"),
            cfg.in_channels,
            cfg.stage_channels_fast[0],
            cfg.spatial_strides[0],
        );
        let mut spot_stages = Vec::new();
        let mut fast_stages = Vec::new();
        for i in 1..cfg.stages() {
            spot_stages.push(ResBlock::new(
                ps,
                init,
                &format!("{prefix}.spot.stage{i}"),
                spot_in[i],
                cfg.stage_channels_spot[i],
                cfg.spatial_strides[i],
            ));
            fast_stages.push(ResBlock::new(
                ps,
                init,
                &format!("{prefix}.fast.stage{i}"),
                cfg.stage_channels_fast[i - 1],
                cfg.stage_channels_fast[i],
                cfg.spatial_strides[i],
            ));
        }
        let fusions = (0..cfg.stages().saturating_sub(1))
            .map(|i| {
                LateralFusion::new(
                    ps,
                    init,
                    &format!("{prefix}.fuse{i}"),
                    cfg.stage_channels_fast[i],
                    cfg,
                )
            })
            .collect();
        Ok(SpotFastBackbone {
            cfg: cfg.clone(),
            spot_stem,
            fast_stem,
            spot_stages,
            fast_stages,
            fusions,
        })
    }

    /// Runs both pathways with lateral fusion between them. `window` must be
    /// the centered temporal window of `full` (caller contract).
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &mut ParamStore,
        window: Var,
        full: Var,
        train: bool,
    ) -> Result<(FeatureMap, FeatureMap)> {
        let ws = g.shape(window).to_vec();
        let fs = g.shape(full).to_vec();
        if ws.len() != 5 || fs.len() != 5 {
            return Err(Error::Shape("backbone inputs must be 5-mode".into()));
        }
        if ws[1] != self.cfg.in_channels || fs[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "backbone wants {} input channels, got {}/{}",
                self.cfg.in_channels, ws[1], fs[1]
            )));
        }
        if ws[2] != self.cfg.window_size || fs[2] != self.cfg.full_len {
            return Err(Error::Shape(format!(
                "backbone wants window {} and full {}, got {} and {}",
                self.cfg.window_size, self.cfg.full_len, ws[2], fs[2]
            )));
        }
        let mut spot = FeatureMap(self.spot_stem.forward(g, ps, window, train));
        let mut fast = FeatureMap(self.fast_stem.forward(g, ps, full, train));
        if let Some(fusion) = self.fusions.first() {
            spot = fusion.fuse(g, ps, fast, spot)?;
        }
        for (i, (sb, fb)) in self
            .spot_stages
            .iter()
            .zip(self.fast_stages.iter())
            .enumerate()
        {
            spot = FeatureMap(sb.forward(g, ps, spot.0, train));
            fast = FeatureMap(fb.forward(g, ps, fast.0, train));
            if let Some(fusion) = self.fusions.get(i + 1) {
                spot = fusion.fuse(g, ps, fast, spot)?;
            }
        }
        Ok((spot, fast))
    }

    /// Zeroes every lateral fusion convolution, cutting fast-to-spot flow.
    pub fn zero_fusions(&self, ps: &mut ParamStore) {
        for fusion in &self.fusions {
            ps.value_mut(fusion.conv.w).fill(0.0);
            if let Some(b) = fusion.conv.b {
                ps.value_mut(b).fill(0.0);
            }
        }
    }
}

/// Promotes a `[T,H,W,C]` f32 clip stack to one batch item of a model input
/// batch `[B,C,T,H,W]` in f64.
pub fn clip_to_input(frames: &ndarray::Array4<f32>) -> ArrayD<f64> {
    let (t, h, w, c) = frames.dim();
    let mut out = ArrayD::zeros(ndarray::IxDyn(&[1, c, t, h, w]));
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[0, ch, ti, y, x]] = frames[[ti, y, x, ch]] as f64;
                }
            }
        }
    }
    out
}
