//! Memory-augmented lateral transformers.
//!
//! One encoder per pathway, run layer-by-layer in lockstep. After every layer
//! except the last, a lateral connection updates the spot stream from the
//! fast stream: fast hidden states are projected pointwise, adaptively pooled
//! to the spot length, concatenated per position with the spot states, passed
//! through linear/batchnorm/ReLU, and added residually (so zeroed lateral
//! parameters reduce the spot encoder to a vanilla one). At the layer before
//! the last, each pathway's output feeds its product-key memory and the
//! memory output (which ends in its own layer norm) is added back through a
//! skip connection.
//!
//! Positional encodings are shared across pathways by absolute frame index:
//! the spot sequence is encoded at positions `offset .. offset + w`, where
//! `offset` is the window start inside the full clip, so the same frame gets
//! the same code in both encoders.
//!
//! Encoder layers use the pre-activation ordering: `x + Attn(LN(x))` then
//! `x + FF(LN(x))`. Inputs are expected at `model_dim` already; the host
//! model owns the projections from backbone widths.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Init, LayerNorm, Linear, ParamStore};
use crate::pkmem::{PkMemConfig, ProductKeyMemory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub attn_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    /// 1-indexed; must equal `layers - 1`.
    pub memory_layer: usize,
    pub pe_dropout: f64,
}

impl TransformerConfig {
    pub fn paper() -> Self {
        TransformerConfig {
            layers: 6,
            attn_heads: 8,
            model_dim: 512,
            ff_dim: 2048,
            memory_layer: 5,
            pe_dropout: 0.1,
        }
    }

    pub fn desk() -> Self {
        TransformerConfig {
            model_dim: 64,
            ff_dim: 128,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config("encoder needs at least 2 layers".into()));
        }
        if self.memory_layer != self.layers - 1 {
            return Err(Error::Config(format!(
                "memory layer {} must sit before the last layer ({})",
                self.memory_layer,
                self.layers - 1
            )));
        }
        if self.model_dim % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} attention heads",
                self.model_dim, self.attn_heads
            )));
        }
        Ok(())
    }
}

/// Sinusoidal position table `[positions, dim]`:
/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal_table(positions: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((positions, dim));
    for p in 0..positions {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = p as f64 / 10000f64.powf(exponent);
            pe[[p, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Adds positional encodings for absolute positions `offset..offset+T` to a
/// `[B, T, D]` sequence, with dropout in train mode.
pub fn positional_encode(
    g: &mut Graph,
    seq: Var,
    offset: usize,
    dropout: f64,
) -> Var {
    let shape = g.shape(seq).to_vec();
    assert_eq!(shape.len(), 3, "positional_encode wants [B, T, D]");
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let table = sinusoidal_table(offset + t, d);
    let mut tiled = ArrayD::zeros(IxDyn(&[b, t, d]));
    for bi in 0..b {
        for ti in 0..t {
            for di in 0..d {
                tiled[[bi, ti, di]] = table[[offset + ti, di]];
            }
        }
    }
    let pe = g.leaf(tiled);
    let summed = g.add(seq, pe);
    g.dropout(summed, dropout)
}

struct EncoderLayer {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
}

impl EncoderLayer {
    fn new(ps: &mut ParamStore, init: &mut Init, name: &str, cfg: &TransformerConfig) -> Self {
        let d = cfg.model_dim;
        EncoderLayer {
            ln1: LayerNorm::new(ps, init, &format!("{name}.ln1"), d, true),
            wq: Linear::new(ps, init, &format!("{name}.attn.wq"), d, d, true),
            wk: Linear::new(ps, init, &format!("{name}.attn.wk"), d, d, true),
            wv: Linear::new(ps, init, &format!("{name}.attn.wv"), d, d, true),
            wo: Linear::new(ps, init, &format!("{name}.attn.wo"), d, d, true),
            ln2: LayerNorm::new(ps, init, &format!("{name}.ln2"), d, true),
            ff1: Linear::new(ps, init, &format!("{name}.ff.lin1"), d, cfg.ff_dim, true),
            ff2: Linear::new(ps, init, &format!("{name}.ff.lin2"), cfg.ff_dim, d, true),
            heads: cfg.attn_heads,
        }
    }

    fn attention(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dh = d / h;
        let flat = g.reshape(x, &[b * t, d]);
        let split = |g: &mut Graph, lin: &Linear| {
            let y = lin.forward(g, ps, flat);
            let y = g.reshape(y, &[b, t, h, dh]);
            let y = g.permute(y, &[0, 2, 1, 3]);
            g.reshape(y, &[b * h, t, dh])
        };
        let q = split(g, &self.wq);
        let k = split(g, &self.wk);
        let v = split(g, &self.wv);
        let kt = g.permute(k, &[0, 2, 1]);
        let scores = g.matmul_batched(q, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax_last(scores);
        let ctx = g.matmul_batched(att, v);
        let ctx = g.reshape(ctx, &[b, h, t, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b * t, d]);
        let out = self.wo.forward(g, ps, ctx);
        g.reshape(out, &[b, t, d])
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let normed = self.ln1.forward(g, ps, x);
        let attn = self.attention(g, ps, normed);
        let x = g.add(x, attn);

        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let normed = self.ln2.forward(g, ps, x);
        let flat = g.reshape(normed, &[b * t, d]);
        let hidden = self.ff1.forward(g, ps, flat);
        let hidden = g.relu(hidden);
        let out = self.ff2.forward(g, ps, hidden);
        let out = g.reshape(out, &[b, t, d]);
        g.add(x, out)
    }
}

/// Fast-to-spot lateral connection between encoder layers.
pub struct LateralConnect {
    pub proj: Linear,
    pub fuse: Linear,
    bn: BatchNorm,
}

impl LateralConnect {
    fn new(ps: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Self {
        LateralConnect {
            proj: Linear::new(ps, init, &format!("{name}.proj"), dim, dim, true),
            fuse: Linear::new(ps, init, &format!("{name}.fuse"), 2 * dim, dim, true),
            bn: BatchNorm::new(ps, init, &format!("{name}.bn"), dim, 1),
        }
    }

    /// `(fast [B,T_f,D], spot [B,T_s,D]) -> [B,T_s,D]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &mut ParamStore,
        fast: Var,
        spot: Var,
        train: bool,
    ) -> Var {
        let fshape = g.shape(fast).to_vec();
        let sshape = g.shape(spot).to_vec();
        let (b, tf, d) = (fshape[0], fshape[1], fshape[2]);
        let ts = sshape[1];
        let flat = g.reshape(fast, &[b * tf, d]);
        let projected = self.proj.forward(g, ps, flat);
        let projected = g.reshape(projected, &[b, tf, d]);
        let pooled = g.adaptive_avg_pool_axis(projected, 1, ts);
        let cat = g.concat(2, spot, pooled);
        let cat = g.reshape(cat, &[b * ts, 2 * d]);
        let fused = self.fuse.forward(g, ps, cat);
        let fused = self.bn.forward(g, ps, fused, train);
        let fused = g.relu(fused);
        let fused = g.reshape(fused, &[b, ts, d]);
        g.add(spot, fused)
    }
}

/// Hidden states `[B, T, D]` feeding each pathway's memory.
#[derive(Clone, Copy)]
pub struct MemoryTaps {
    pub spot_input: Var,
    pub fast_input: Var,
}

pub struct LateralTransformers {
    pub cfg: TransformerConfig,
    spot_layers: Vec<EncoderLayer>,
    fast_layers: Vec<EncoderLayer>,
    laterals: Vec<LateralConnect>,
    pub spot_memory: ProductKeyMemory,
    pub fast_memory: ProductKeyMemory,
}

impl LateralTransformers {
    pub fn new(
        ps: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        cfg: &TransformerConfig,
        spot_mem_cfg: &PkMemConfig,
        fast_mem_cfg: &PkMemConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        for (name, mem) in [("spot", spot_mem_cfg), ("fast", fast_mem_cfg)] {
            if mem.input_dim != cfg.model_dim || mem.value_dim != cfg.model_dim {
                return Err(Error::Config(format!(
                    "{name} memory dims ({}, {}) must match model dim {} so the skip connection type-checks",
                    mem.input_dim, mem.value_dim, cfg.model_dim
                )));
            }
        }
        let spot_layers = (1..=cfg.layers)
            .map(|l| EncoderLayer::new(ps, init, &format!("{prefix}.spot.layer{l}"), cfg))
            .collect();
        let fast_layers = (1..=cfg.layers)
            .map(|l| EncoderLayer::new(ps, init, &format!("{prefix}.fast.layer{l}"), cfg))
            .collect();
        let laterals = (1..cfg.layers)
            .map(|l| LateralConnect::new(ps, init, &format!("{prefix}.lateral{l}"), cfg.model_dim))
            .collect();
        let spot_memory =
            ProductKeyMemory::new(ps, init, &format!("{prefix}.spot.memory"), spot_mem_cfg)?;
        let fast_memory =
            ProductKeyMemory::new(ps, init, &format!("{prefix}.fast.memory"), fast_mem_cfg)?;
        Ok(LateralTransformers {
            cfg: cfg.clone(),
            spot_layers,
            fast_layers,
            laterals,
            spot_memory,
            fast_memory,
        })
    }

    fn memory_skip(
        &self,
        g: &mut Graph,
        ps: &mut ParamStore,
        mem: &ProductKeyMemory,
        x: Var,
        train: bool,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(x, &[b * t, d]);
        let read = mem.read(g, ps, flat, train)?;
        let read = g.reshape(read, &[b, t, d]);
        Ok(g.add(x, read))
    }

    /// Runs both encoders in lockstep. `spot` and `fast` are `[B, T, D]` at
    /// `model_dim`; `spot_offset` is the window start frame inside the full
    /// clip. Information flows fast-to-spot only.
    pub fn encode(
        &self,
        g: &mut Graph,
        ps: &mut ParamStore,
        spot: Var,
        fast: Var,
        spot_offset: usize,
        train: bool,
    ) -> Result<(Var, Var)> {
        let (spot_out, fast_out, _) = self.encode_captured(g, ps, spot, fast, spot_offset, train)?;
        Ok((spot_out, fast_out))
    }

    /// [`Self::encode`] that also returns the hidden states entering each
    /// memory, for usage diagnostics.
    pub fn encode_captured(
        &self,
        g: &mut Graph,
        ps: &mut ParamStore,
        spot: Var,
        fast: Var,
        spot_offset: usize,
        train: bool,
    ) -> Result<(Var, Var, MemoryTaps)> {
        for (name, var) in [("spot", spot), ("fast", fast)] {
            let s = g.shape(var);
            if s.len() != 3 || s[2] != self.cfg.model_dim {
                return Err(Error::Shape(format!(
                    "{name} encoder input must be [B, T, {}], got {s:?}",
                    self.cfg.model_dim
                )));
            }
        }
        let mut spot = positional_encode(g, spot, spot_offset, self.cfg.pe_dropout);
        let mut fast = positional_encode(g, fast, 0, self.cfg.pe_dropout);
        let mut taps = MemoryTaps {
            spot_input: spot,
            fast_input: fast,
        };
        for l in 1..=self.cfg.layers {
            spot = self.spot_layers[l - 1].forward(g, ps, spot);
            fast = self.fast_layers[l - 1].forward(g, ps, fast);
            if l == self.cfg.memory_layer {
                taps = MemoryTaps {
                    spot_input: spot,
                    fast_input: fast,
                };
                spot = self.memory_skip(g, ps, &self.spot_memory, spot, train)?;
                fast = self.memory_skip(g, ps, &self.fast_memory, fast, train)?;
            }
            if l < self.cfg.layers {
                spot = self.laterals[l - 1].forward(g, ps, fast, spot, train);
            }
        }
        Ok((spot, fast, taps))
    }

    /// Zeroes every lateral connection's projection and fusion weights.
    pub fn zero_laterals(&self, ps: &mut ParamStore) {
        for lat in &self.laterals {
            for lin in [&lat.proj, &lat.fuse] {
                ps.value_mut(lin.w).fill(0.0);
                if let Some(b) = lin.b {
                    ps.value_mut(b).fill(0.0);
                }
            }
        }
    }

    /// Zeroes both memories' value tables, silencing their contribution.
    pub fn zero_memories(&self, ps: &mut ParamStore) {
        ps.value_mut(self.spot_memory.values).fill(0.0);
        ps.value_mut(self.fast_memory.values).fill(0.0);
    }
}
