//! Parameter store and primitive layers.
//!
//! Parameters live outside the autodiff graph in a [`ParamStore`] with stable
//! dotted names (`backbone.spot.stage1.conv1.weight`). A forward pass leases
//! each parameter into the graph as a tagged leaf; after `backward`,
//! [`ParamStore::accumulate_grads`] folds leaf gradients back into the store.
//! Freezing is a per-entry flag toggled by name prefix, and checkpoints are
//! just the named tensors.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable tensor.
    Param,
    /// Persistent state updated by forward passes (running statistics), never
    /// touched by the optimizer.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub kind: ParamKind,
    pub frozen: bool,
}

impl ParamEntry {
    pub fn trainable(&self) -> bool {
        self.kind == ParamKind::Param && !self.frozen
    }
}

#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: ArrayD<f64>, kind: ParamKind) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
            kind,
            frozen: false,
        });
        let id = self.entries.len() - 1;
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn add_param(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        self.insert(name, value, ParamKind::Param)
    }

    pub fn add_buffer(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        self.insert(name, value, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Leases a parameter into a graph as a tagged leaf.
    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        g.leaf_tagged(id.0, self.entries[id.0].value.clone())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Folds leaf gradients of one backward sweep into `grad` accumulators.
    /// Frozen and buffer entries are skipped entirely.
    pub fn accumulate_grads(&mut self, g: &Graph, grads: &Gradients) {
        for &(tag, var) in g.tagged_leaves() {
            let entry = &mut self.entries[tag];
            if !entry.trainable() {
                continue;
            }
            if let Some(gr) = grads.get(var) {
                entry.grad += gr;
            }
        }
    }

    /// Toggles freezing for every entry whose name starts with `prefix`.
    /// Returns how many entries matched.
    pub fn set_frozen_by_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn clear_frozen(&mut self) {
        for e in &mut self.entries {
            e.frozen = false;
        }
    }

    /// All tensors (parameters and buffers) in creation order, for
    /// checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, ndarray::ArrayViewD<'_, f64>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.view()))
            .collect()
    }

    /// Loads values by name. Names present in `tensors` but not in the store
    /// are ignored; returns the list of store entries that were loaded.
    /// Shape mismatches are errors.
    pub fn load_named_tensors(&mut self, tensors: &[(String, ArrayD<f64>)]) -> Result<Vec<String>> {
        let mut loaded = Vec::new();
        for (name, arr) in tensors {
            if let Some(&i) = self.index.get(name) {
                if self.entries[i].value.shape() != arr.shape() {
                    return Err(Error::Shape(format!(
                        "checkpoint tensor {name} has shape {:?}, model wants {:?}",
                        arr.shape(),
                        self.entries[i].value.shape()
                    )));
                }
                self.entries[i].value = arr.clone();
                loaded.push(name.clone());
            }
        }
        Ok(loaded)
    }

    /// Total number of scalar parameters (not buffers).
    pub fn param_scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Param)
            .map(|e| e.value.len())
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Seeded initializer. Values depend only on the seed and the call sequence,
/// so model construction is reproducible.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| (self.rng.gen::<f64>() * 2.0 - 1.0) * bound)
    }

    /// He-style uniform, bound sqrt(6 / fan_in); suits ReLU stacks.
    pub fn kaiming_uniform(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
        self.uniform(shape, (6.0 / fan_in as f64).sqrt())
    }

    /// Glorot uniform, bound sqrt(6 / (fan_in + fan_out)).
    pub fn xavier_uniform(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
        self.uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    pub fn zeros(&mut self, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn ones(&mut self, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(shape), 1.0)
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add_param(
            &format!("{name}.weight"),
            init.xavier_uniform(&[in_dim, out_dim], in_dim, out_dim),
        );
        let b = bias.then(|| ps.add_param(&format!("{name}.bias"), init.zeros(&[out_dim])));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// `x: [N, in_dim] -> [N, out_dim]`
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = ps.bind(g, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = ps.bind(g, b);
                g.add_along(y, bv, 1)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1 * kernel.2;
        let w = ps.add_param(
            &format!("{name}.weight"),
            init.kaiming_uniform(&[out_ch, in_ch, kernel.0, kernel.1, kernel.2], fan_in),
        );
        let b = bias.then(|| ps.add_param(&format!("{name}.bias"), init.zeros(&[out_ch])));
        Conv3d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = ps.bind(g, self.w);
        let b = self.b.map(|b| ps.bind(g, b));
        g.conv3d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add_param(
            &format!("{name}.weight"),
            init.kaiming_uniform(&[out_ch, in_ch, kernel], in_ch * kernel),
        );
        let b = bias.then(|| ps.add_param(&format!("{name}.bias"), init.zeros(&[out_ch])));
        Conv1d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = ps.bind(g, self.w);
        let b = self.b.map(|b| ps.bind(g, b));
        g.conv1d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization over all axes except `feature_axis`, with running
/// statistics. Training mode uses batch statistics and updates the running
/// ones; eval mode uses the running statistics. A frozen host module passes
/// `train = false` so its buffers stay bit-identical.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub feature_axis: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(
        ps: &mut ParamStore,
        init: &mut Init,
        name: &str,
        features: usize,
        feature_axis: usize,
    ) -> Self {
        BatchNorm {
            gamma: ps.add_param(&format!("{name}.gamma"), init.ones(&[features])),
            beta: ps.add_param(&format!("{name}.beta"), init.zeros(&[features])),
            running_mean: ps.add_buffer(&format!("{name}.running_mean"), init.zeros(&[features])),
            running_var: ps.add_buffer(&format!("{name}.running_var"), init.ones(&[features])),
            feature_axis,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &mut ParamStore, x: Var, train: bool) -> Var {
        let normalized = if train {
            let (y, mean, var) = g.batch_norm_train(x, self.feature_axis, self.eps);
            let m = self.momentum;
            {
                let rm = ps.value_mut(self.running_mean);
                for (r, b) in rm.iter_mut().zip(mean.iter()) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
            {
                let rv = ps.value_mut(self.running_var);
                for (r, b) in rv.iter_mut().zip(var.iter()) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
            y
        } else {
            let mean: Vec<f64> = ps.value(self.running_mean).iter().copied().collect();
            let var: Vec<f64> = ps.value(self.running_var).iter().copied().collect();
            g.batch_norm_eval(x, self.feature_axis, &mean, &var, self.eps)
        };
        let gamma = ps.bind(g, self.gamma);
        let beta = ps.bind(g, self.beta);
        let scaled = g.mul_along(normalized, gamma, self.feature_axis);
        g.add_along(scaled, beta, self.feature_axis)
    }
}

/// Layer normalization over the last axis with optional affine part.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, dim: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(ps.add_param(&format!("{name}.gamma"), init.ones(&[dim]))),
                Some(ps.add_param(&format!("{name}.beta"), init.zeros(&[dim]))),
            )
        } else {
            (None, None)
        };
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let axis = g.shape(x).len() - 1;
        let mut y = g.layer_norm(x, self.eps);
        if let Some(gamma) = self.gamma {
            let gv = ps.bind(g, gamma);
            y = g.mul_along(y, gv, axis);
        }
        if let Some(beta) = self.beta {
            let bv = ps.bind(g, beta);
            y = g.add_along(y, bv, axis);
        }
        y
    }
}

// ---------------------------------------------------------------------------
// Model-level gradient checking
// ---------------------------------------------------------------------------

/// One compared gradient sample.
#[derive(Debug, Clone)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl GradSample {
    /// Relative error within `tol`, or both sides numerically zero (central
    /// differences resolve to ~1e-10 absolute, so exact-zero gradients show
    /// up as noise at that scale).
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol || (self.analytic - self.numeric).abs() < 1e-8
    }
}

/// Compares backpropagated gradients against central differences at the given
/// `(param, flat index)` samples. `build` must construct the loss
/// deterministically for a fixed store state (stochastic ops disabled or
/// seeded identically); buffer mutations (running statistics) are snapshotted
/// and restored. Returns the samples sorted by descending relative error.
pub fn grad_check_params<F>(
    ps: &mut ParamStore,
    mut build: F,
    samples: &[(ParamId, usize)],
) -> Vec<GradSample>
where
    F: FnMut(&mut Graph, &mut ParamStore) -> Var,
{
    let buffers: Vec<(usize, ArrayD<f64>)> = ps
        .entries()
        .filter(|(_, e)| e.kind == ParamKind::Buffer)
        .map(|(id, e)| (id.0, e.value.clone()))
        .collect();

    ps.zero_grads();
    let mut g = Graph::new(true, 0x6ead);
    let loss = build(&mut g, ps);
    let grads = g.backward(loss);
    ps.accumulate_grads(&g, &grads);
    let analytic: Vec<f64> = samples
        .iter()
        .map(|&(pid, idx)| ps.entry(pid).grad.as_slice().unwrap()[idx])
        .collect();

    let mut out = Vec::with_capacity(samples.len());
    for (&(pid, idx), &a) in samples.iter().zip(analytic.iter()) {
        let x0 = ps.value(pid).as_slice().unwrap()[idx];
        let eps = crate::autodiff::gradcheck::step_for(x0);
        let mut eval = |x: f64| -> f64 {
            ps.value_mut(pid).as_slice_mut().unwrap()[idx] = x;
            let mut g = Graph::new(true, 0x6ead);
            let loss = build(&mut g, ps);
            let v = g.value(loss)[0];
            ps.value_mut(pid).as_slice_mut().unwrap()[idx] = x0;
            v
        };
        let numeric = (eval(x0 + eps) - eval(x0 - eps)) / (2.0 * eps);
        out.push(GradSample {
            name: ps.entry(pid).name.clone(),
            index: idx,
            analytic: a,
            numeric,
            rel_err: crate::autodiff::gradcheck::relative_error(a, numeric),
        });
    }

    for (i, buf) in buffers {
        ps.entries[i].value = buf;
    }
    out.sort_by(|a, b| b.rel_err.partial_cmp(&a.rel_err).unwrap());
    out
}

/// Deterministically samples up to `count` trainable `(param, index)` pairs.
pub fn sample_param_indices(ps: &ParamStore, count: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trainable: Vec<(ParamId, usize)> = ps
        .entries()
        .filter(|(_, e)| e.trainable())
        .map(|(id, e)| (id, e.value.len()))
        .collect();
    let total: usize = trainable.iter().map(|(_, n)| n).sum();
    let count = count.min(total);
    let mut picked = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut flat = rng.gen_range(0..total);
        for &(pid, n) in &trainable {
            if flat < n {
                if picked.insert((pid.0, flat)) {
                    out.push((pid, flat));
                }
                break;
            }
            flat -= n;
        }
    }
    out
}
