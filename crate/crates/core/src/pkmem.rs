//! Product-key memory layer.
//!
//! Keys are the implicit Cartesian product of two sub-key halves: the score
//! of full key `(i, j)` against query `q = (q1, q2)` is
//! `dot(q1, sub1[i]) + dot(q2, sub2[j])`, and its flat index is `i*n + j`.
//! Exact top-k search takes the top-k of each half, scores the k*k candidate
//! grid, and takes the top-k of that; any global top-k key's halves appear in
//! their half's top-k, so the grid contains the global winners. Ties break
//! toward the smaller flat index, making selection deterministic.
//!
//! Each head owns its query network (projection with batch normalization)
//! and sub-keys but shares one value table. A read softmaxes the k selected
//! scores per head, takes the weighted sum of the selected value rows, sums
//! heads, applies value dropout (train only) and a final layer norm.
//! Selection itself is non-differentiable; gradients flow through the
//! selected scores into queries and sub-keys, and through the weighted sum
//! into exactly the selected value rows.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Init, LayerNorm, Linear, ParamId, ParamStore};

/// Output layer-norm mode. `Plain` normalizes without learned scale/shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LnMode {
    Off,
    Plain,
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PkMemConfig {
    pub heads: usize,
    /// Query dimension; split in half across the two sub-key tables.
    pub key_dim: usize,
    /// Sub-keys per half; the value table has `n_keys^2` rows.
    pub n_keys: usize,
    /// Neighbors kept per head.
    pub k: usize,
    pub input_dim: usize,
    pub value_dim: usize,
    pub value_dropout: f64,
    pub layernorm: LnMode,
}

impl PkMemConfig {
    /// Reference-scale memory for the windowed pathway: 4 heads, 128-d
    /// queries, 168^2 values, 32 neighbors.
    pub fn paper_spot(input_dim: usize, value_dim: usize) -> Self {
        PkMemConfig {
            heads: 4,
            key_dim: 128,
            n_keys: 168,
            k: 32,
            input_dim,
            value_dim,
            value_dropout: 0.1,
            layernorm: LnMode::Affine,
        }
    }

    /// Reference-scale memory for the all-frame pathway: 50^2 values.
    pub fn paper_fast(input_dim: usize, value_dim: usize) -> Self {
        PkMemConfig {
            n_keys: 50,
            ..Self::paper_spot(input_dim, value_dim)
        }
    }

    /// Desk-scale memory: 8^2 values, 32-d queries.
    pub fn desk(input_dim: usize, value_dim: usize) -> Self {
        PkMemConfig {
            heads: 4,
            key_dim: 32,
            n_keys: 8,
            k: 32,
            input_dim,
            value_dim,
            value_dropout: 0.1,
            layernorm: LnMode::Affine,
        }
    }

    pub fn value_rows(&self) -> usize {
        self.n_keys * self.n_keys
    }

    pub fn validate(&self) -> Result<()> {
        if self.key_dim % 2 != 0 {
            return Err(Error::Config("memory key_dim must be even".into()));
        }
        if self.k == 0 || self.k > self.value_rows() {
            return Err(Error::Config(format!(
                "memory k={} outside [1, {}]",
                self.k,
                self.value_rows()
            )));
        }
        if self.heads == 0 {
            return Err(Error::Config("memory needs at least one head".into()));
        }
        Ok(())
    }
}

/// Top-k indices of a score slice under (score desc, index asc) ordering.
fn topk_scores(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must not be NaN")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Exact top-k over the product key set. Returns flat indices (`i*n + j`)
/// and their scores, ordered by (score desc, flat index asc).
pub fn topk_product_keys(
    q: ArrayView1<'_, f64>,
    sub1: ArrayView2<'_, f64>,
    sub2: ArrayView2<'_, f64>,
    k: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = sub1.nrows();
    if sub2.nrows() != n {
        return Err(Error::Shape("sub-key tables must have equal rows".into()));
    }
    if k > n * n {
        return Err(Error::InvalidArgument(format!(
            "top-k {k} exceeds key count {}",
            n * n
        )));
    }
    let half = q.len() / 2;
    if sub1.ncols() != half || sub2.ncols() != half || q.len() % 2 != 0 {
        return Err(Error::Shape(format!(
            "query length {} does not split across sub-key width {}",
            q.len(),
            sub1.ncols()
        )));
    }
    let q1 = q.slice(ndarray::s![..half]);
    let q2 = q.slice(ndarray::s![half..]);
    let s1: Vec<f64> = sub1.rows().into_iter().map(|r| r.dot(&q1)).collect();
    let s2: Vec<f64> = sub2.rows().into_iter().map(|r| r.dot(&q2)).collect();

    let keep = k.min(n);
    let top1 = topk_scores(&s1, keep);
    let top2 = topk_scores(&s2, keep);

    let mut candidates: Vec<(usize, f64)> = Vec::with_capacity(keep * keep);
    for &i in &top1 {
        for &j in &top2 {
            candidates.push((i * n + j, s1[i] + s2[j]));
        }
    }
    candidates.sort_unstable_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores must not be NaN")
            .then(a.0.cmp(&b.0))
    });
    candidates.truncate(k);
    Ok(candidates.into_iter().unzip())
}

pub struct ProductKeyMemory {
    pub cfg: PkMemConfig,
    query_proj: Vec<Linear>,
    query_bn: Vec<BatchNorm>,
    sub_keys_1: Vec<ParamId>,
    sub_keys_2: Vec<ParamId>,
    pub values: ParamId,
    out_ln: Option<LayerNorm>,
}

impl ProductKeyMemory {
    pub fn new(ps: &mut ParamStore, init: &mut Init, prefix: &str, cfg: &PkMemConfig) -> Result<Self> {
        cfg.validate()?;
        let half = cfg.key_dim / 2;
        let bound = 1.0 / (half as f64).sqrt();
        let mut query_proj = Vec::new();
        let mut query_bn = Vec::new();
        let mut sub_keys_1 = Vec::new();
        let mut sub_keys_2 = Vec::new();
        for h in 0..cfg.heads {
            query_proj.push(Linear::new(
                ps,
                init,
                &format!("{prefix}.head{h}.query"),
                cfg.input_dim,
                cfg.key_dim,
                true,
            ));
            query_bn.push(BatchNorm::new(
                ps,
                init,
                &format!("{prefix}.head{h}.query_bn"),
                cfg.key_dim,
                1,
            ));
            sub_keys_1.push(ps.add_param(
                &format!("{prefix}.head{h}.sub_keys_1"),
                init.uniform(&[cfg.n_keys, half], bound),
            ));
            sub_keys_2.push(ps.add_param(
                &format!("{prefix}.head{h}.sub_keys_2"),
                init.uniform(&[cfg.n_keys, half], bound),
            ));
        }
        let values = ps.add_param(
            &format!("{prefix}.values"),
            init.uniform(
                &[cfg.value_rows(), cfg.value_dim],
                1.0 / (cfg.value_dim as f64).sqrt(),
            ),
        );
        let out_ln = match cfg.layernorm {
            LnMode::Off => None,
            LnMode::Plain => Some(LayerNorm::new(
                ps,
                init,
                &format!("{prefix}.out_ln"),
                cfg.value_dim,
                false,
            )),
            LnMode::Affine => Some(LayerNorm::new(
                ps,
                init,
                &format!("{prefix}.out_ln"),
                cfg.value_dim,
                true,
            )),
        };
        Ok(ProductKeyMemory {
            cfg: cfg.clone(),
            query_proj,
            query_bn,
            sub_keys_1,
            sub_keys_2,
            values,
            out_ln,
        })
    }

    /// Sparse read: `x [B, input_dim] -> [B, value_dim]`.
    pub fn read(&self, g: &mut Graph, ps: &mut ParamStore, x: Var, train: bool) -> Result<Var> {
        self.read_recorded(g, ps, x, train).map(|(out, _)| out)
    }

    /// [`Self::read`] that also returns the selected flat value-row indices,
    /// per head in batch order, for sparsity diagnostics.
    pub fn read_recorded(
        &self,
        g: &mut Graph,
        ps: &mut ParamStore,
        x: Var,
        train: bool,
    ) -> Result<(Var, Vec<Vec<usize>>)> {
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "memory read wants [B, {}], got {:?}",
                self.cfg.input_dim, xs
            )));
        }
        let batch = xs[0];
        let half = self.cfg.key_dim / 2;
        let k = self.cfg.k;
        let values_var = ps.bind(g, self.values);

        let mut recorded = Vec::with_capacity(self.cfg.heads);
        let mut total: Option<Var> = None;
        for h in 0..self.cfg.heads {
            let q = self.query_proj[h].forward(g, ps, x);
            let q = self.query_bn[h].forward(g, ps, q, train);

            // concrete queries drive the (non-differentiable) selection
            let q_vals = g.value(q).clone();
            let q2d = q_vals.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let sub1_arr = ps.value(self.sub_keys_1[h]).clone();
            let sub2_arr = ps.value(self.sub_keys_2[h]).clone();
            let sub1_view = sub1_arr.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let sub2_view = sub2_arr.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut flat_ids = Vec::with_capacity(batch * k);
            for b in 0..batch {
                let (ids, _) = topk_product_keys(q2d.row(b), sub1_view, sub2_view, k)?;
                flat_ids.extend(ids);
            }
            let row_ids_1: Vec<usize> = flat_ids.iter().map(|f| f / self.cfg.n_keys).collect();
            let row_ids_2: Vec<usize> = flat_ids.iter().map(|f| f % self.cfg.n_keys).collect();

            let sub1_var = ps.bind(g, self.sub_keys_1[h]);
            let sub2_var = ps.bind(g, self.sub_keys_2[h]);
            let picked1 = g.gather_rows(sub1_var, &row_ids_1);
            let picked1 = g.reshape(picked1, &[batch, k, half]);
            let picked2 = g.gather_rows(sub2_var, &row_ids_2);
            let picked2 = g.reshape(picked2, &[batch, k, half]);

            let q1 = g.narrow(q, 1, 0, half);
            let q2 = g.narrow(q, 1, half, half);
            let s1 = g.batched_dot(picked1, q1);
            let s2 = g.batched_dot(picked2, q2);
            let scores = g.add(s1, s2);
            let weights = g.softmax_last(scores);

            let picked_vals = g.gather_rows(values_var, &flat_ids);
            let picked_vals = g.reshape(picked_vals, &[batch, k, self.cfg.value_dim]);
            let head_out = g.batched_weighted_sum(weights, picked_vals);
            recorded.push(flat_ids);
            total = Some(match total {
                Some(t) => g.add(t, head_out),
                None => head_out,
            });
        }
        let mut out = total.expect("at least one head");
        if train {
            out = g.dropout(out, self.cfg.value_dropout);
        }
        if let Some(ln) = &self.out_ln {
            out = ln.forward(g, ps, out);
        }
        Ok((out, recorded))
    }

    /// Per-head batch-normalized queries, eval mode, outside any graph.
    pub fn project_queries(&self, ps: &mut ParamStore, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut out = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let mut g = Graph::new(false, 0);
            let xv = g.leaf(x.clone().into_dyn());
            let q = self.query_proj[h].forward(&mut g, ps, xv);
            let q = self.query_bn[h].forward(&mut g, ps, q, false);
            out.push(
                g.value(q)
                    .clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap(),
            );
        }
        out
    }

    /// Histogram over value rows of how often each is selected for `x`,
    /// eval-mode queries. Total count is `B * heads * k`.
    pub fn usage_stats(&self, ps: &mut ParamStore, x: &Array2<f64>) -> Result<Vec<u64>> {
        let mut hist = vec![0u64; self.cfg.value_rows()];
        let queries = self.project_queries(ps, x);
        for (h, q) in queries.iter().enumerate() {
            let sub1_arr = ps.value(self.sub_keys_1[h]).clone();
            let sub2_arr = ps.value(self.sub_keys_2[h]).clone();
            let sub1 = sub1_arr.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let sub2 = sub2_arr.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            for b in 0..q.nrows() {
                let (ids, _) = topk_product_keys(q.row(b), sub1, sub2, self.cfg.k)?;
                for id in ids {
                    hist[id] += 1;
                }
            }
        }
        Ok(hist)
    }

    /// Zeroes and freezes the value table (the memory-ablation switch).
    pub fn ablate_values(&self, ps: &mut ParamStore) {
        ps.value_mut(self.values).fill(0.0);
        let name = ps.entry(self.values).name.clone();
        ps.set_frozen_by_prefix(&name, true);
    }
}

/// Brute-force reference: scores every full key explicitly. Test oracle and
/// documentation of the selection order.
pub fn brute_force_topk(
    q: ArrayView1<'_, f64>,
    sub1: ArrayView2<'_, f64>,
    sub2: ArrayView2<'_, f64>,
    k: usize,
) -> (Vec<usize>, Vec<f64>) {
    let n = sub1.nrows();
    let half = q.len() / 2;
    let q1 = q.slice(ndarray::s![..half]);
    let q2 = q.slice(ndarray::s![half..]);
    let mut all: Vec<(usize, f64)> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let score = sub1.row(i).dot(&q1) + sub2.row(j).dot(&q2);
            all.push((i * n + j, score));
        }
    }
    all.sort_unstable_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all.into_iter().unzip()
}
