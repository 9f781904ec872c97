//! Reverse-mode automatic differentiation on dynamically shaped `f64` arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value plus a backward closure that routes the incoming gradient to the
//! node's parents. Creation order is a topological order, so
//! [`Graph::backward`] is a single reverse sweep.
//!
//! The engine is deliberately small: only the operations the model needs
//! exist, each with a hand-written backward. Everything runs in `f64` so
//! finite-difference checks are meaningful.

mod conv;
pub mod gradcheck;

pub use conv::{adaptive_bin, conv_out_len, pool_out_len};

use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type Value = Rc<ArrayD<f64>>;

/// Accumulates gradients for nodes below the one currently being processed.
pub struct GradSink<'a> {
    grads: &'a mut [Option<ArrayD<f64>>],
}

impl GradSink<'_> {
    pub fn add(&mut self, node: usize, contribution: ArrayD<f64>) {
        match &mut self.grads[node] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(to_standard(contribution)),
        }
    }
}

fn to_standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &mut GradSink)>;

struct Node {
    value: Value,
    backward: Option<BackwardFn>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(usize, Var)>,
    train: bool,
    rng: ChaCha8Rng,
}

impl Graph {
    /// `train` enables stochastic ops (dropout) and batch statistics; `seed`
    /// drives them deterministically.
    pub fn new(train: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<f64>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(to_standard(value)),
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn rc(&self, v: Var) -> Value {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Leaf node. Gradients accumulate for leaves like any other node; read
    /// them from the [`Gradients`] returned by [`Graph::backward`].
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// Leaf carrying an external tag (a parameter id). The same tag may be
    /// bound more than once per graph; gradient collection sums over all of
    /// its leaves.
    pub fn leaf_tagged(&mut self, tag: usize, value: ArrayD<f64>) -> Var {
        let v = self.push(value, None);
        self.bindings.push((tag, v));
        v
    }

    pub fn tagged_leaves(&self) -> &[(usize, Var)] {
        &self.bindings
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward wants a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(f) = &self.nodes[i].backward {
                let (lower, _) = grads.split_at_mut(i);
                f(&g, &mut GradSink { grads: lower });
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = &*self.nodes[a.0].value + &*self.nodes[b.0].value;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.0, g.clone());
                sink.add(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let out = &*self.nodes[a.0].value - &*self.nodes[b.0].value;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.0, g.clone());
                sink.add(b.0, -g);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let av = self.rc(a);
        let bv = self.rc(b);
        let out = &*av * &*bv;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.0, g * &*bv);
                sink.add(b.0, g * &*av);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = &*self.nodes[a.0].value * c;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.0, g * c);
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| x.max(0.0));
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                dx.zip_mut_with(&av, |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                sink.add(a.0, dx);
            })),
        )
    }

    /// Broadcast add of a vector along `axis` (per-channel bias and the like).
    pub fn add_along(&mut self, x: Var, v: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis];
        assert_eq!(self.shape(v), [n], "add_along: vector length mismatch");
        let vv = self.rc(v);
        let mut out = (*self.nodes[x.0].value).clone();
        for (i, mut lane) in out.axis_iter_mut(Axis(axis)).enumerate() {
            lane += vv[i];
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(x.0, g.clone());
                let mut dv = ArrayD::zeros(IxDyn(&[g.shape()[axis]]));
                for (i, lane) in g.axis_iter(Axis(axis)).enumerate() {
                    dv[i] = lane.sum();
                }
                sink.add(v.0, dv);
            })),
        )
    }

    /// Broadcast multiply by a vector along `axis` (per-feature affine scale).
    pub fn mul_along(&mut self, x: Var, v: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis];
        assert_eq!(self.shape(v), [n], "mul_along: vector length mismatch");
        let vv = self.rc(v);
        let xv = self.rc(x);
        let mut out = (*xv).clone();
        for (i, mut lane) in out.axis_iter_mut(Axis(axis)).enumerate() {
            lane *= vv[i];
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                for (i, mut lane) in dx.axis_iter_mut(Axis(axis)).enumerate() {
                    lane *= vv[i];
                }
                sink.add(x.0, dx);
                let mut dv = ArrayD::zeros(IxDyn(&[g.shape()[axis]]));
                for (i, (glane, xlane)) in g
                    .axis_iter(Axis(axis))
                    .zip(xv.axis_iter(Axis(axis)))
                    .enumerate()
                {
                    dv[i] = (&glane * &xlane).sum();
                }
                sink.add(v.0, dv);
            })),
        )
    }

    // -- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.shape(a).to_vec();
        assert_eq!(
            old.iter().product::<usize>(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let out = self.nodes[a.0]
            .value
            .to_shape(IxDyn(shape))
            .expect("reshape of standard-layout array")
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.0, g.to_shape(IxDyn(&old)).unwrap().to_owned());
            })),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_fwd = axes.to_vec();
        let mut axes_inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            axes_inv[ax] = i;
        }
        let out = self.nodes[a.0]
            .value
            .view()
            .permuted_axes(IxDyn(&axes_fwd))
            .as_standard_layout()
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(
                    a.0,
                    g.view()
                        .permuted_axes(IxDyn(&axes_inv))
                        .as_standard_layout()
                        .to_owned(),
                );
            })),
        )
    }

    /// Contiguous slice along one axis.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let in_shape: Vec<usize> = self.shape(a).to_vec();
        assert!(start + len <= in_shape[axis], "narrow out of range");
        let out = self.nodes[a.0]
            .value
            .slice_axis(
                Axis(axis),
                ndarray::Slice::from(start as isize..(start + len) as isize),
            )
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::zeros(IxDyn(&in_shape));
                dx.slice_axis_mut(
                    Axis(axis),
                    ndarray::Slice::from(start as isize..(start + len) as isize),
                )
                .assign(g);
                sink.add(a.0, dx);
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, a: Var, b: Var) -> Var {
        let na = self.shape(a)[axis];
        let out = ndarray::concatenate(
            Axis(axis),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .expect("concat: incompatible shapes");
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let ga = g
                    .slice_axis(Axis(axis), ndarray::Slice::from(0..na as isize))
                    .to_owned();
                let gb = g
                    .slice_axis(Axis(axis), ndarray::Slice::from(na as isize..))
                    .to_owned();
                sink.add(a.0, ga);
                sink.add(b.0, gb);
            })),
        )
    }

    // -- reductions ---------------------------------------------------------

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let shape: Vec<usize> = self.shape(a).to_vec();
        let out = ArrayD::from_elem(IxDyn(&[1]), self.nodes[a.0].value.sum() / n);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.0, ArrayD::from_elem(IxDyn(&shape), g[0] / n));
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape: Vec<usize> = self.shape(a).to_vec();
        let out = ArrayD::from_elem(IxDyn(&[1]), self.nodes[a.0].value.sum());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.0, ArrayD::from_elem(IxDyn(&shape), g[0]));
            })),
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis] as f64;
        let out = self.nodes[a.0].value.mean_axis(Axis(axis)).unwrap();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let scaled = g / n;
                let mut gshape: Vec<usize> = g.shape().to_vec();
                gshape.insert(axis, 1);
                let expanded = scaled.to_shape(IxDyn(&gshape)).unwrap().to_owned();
                let reps = {
                    let mut r = vec![1usize; gshape.len()];
                    r[axis] = n as usize;
                    r
                };
                sink.add(a.0, tile(&expanded, &reps));
            })),
        )
    }

    // -- nonlinear row ops ---------------------------------------------------

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let x = self.rc(a);
        let mut out = (*x).clone();
        for mut row in out.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let y = Rc::new(out);
        let yc = Rc::clone(&y);
        self.push_shared(
            y,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(yc.rows()) {
                    let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
                    for (d, y) in drow.iter_mut().zip(yrow.iter()) {
                        *d = (*d - dot) * y;
                    }
                }
                sink.add(a.0, dx);
            })),
        )
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let x = self.rc(a);
        let mut out = (*x).clone();
        for mut row in out.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            row.mapv_inplace(|v| v - lse);
        }
        let y = Rc::new(out);
        let yc = Rc::clone(&y);
        self.push_shared(
            y,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                for (mut drow, lrow) in dx.rows_mut().into_iter().zip(yc.rows()) {
                    let gsum: f64 = drow.sum();
                    for (d, l) in drow.iter_mut().zip(lrow.iter()) {
                        *d -= gsum * l.exp();
                    }
                }
                sink.add(a.0, dx);
            })),
        )
    }

    /// Layer normalization over the last axis, no affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.rc(a);
        let d = *x.shape().last().expect("layer_norm on empty shape") as f64;
        let mut out = (*x).clone();
        let mut inv_std = Vec::with_capacity(out.len() / d as usize);
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            row.mapv_inplace(|v| (v - mean) * is);
        }
        let y = Rc::new(out);
        let yc = Rc::clone(&y);
        self.push_shared(
            y,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                for ((mut drow, yrow), &is) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(yc.rows())
                    .zip(inv_std.iter())
                {
                    let gmean: f64 = drow.sum() / d;
                    let gydot: f64 =
                        drow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum::<f64>() / d;
                    for (dv, y) in drow.iter_mut().zip(yrow.iter()) {
                        *dv = (*dv - gmean - y * gydot) * is;
                    }
                }
                sink.add(a.0, dx);
            })),
        )
    }

    /// Batch normalization (training): normalize each slice of `feature_axis`
    /// over every other axis with population statistics. Returns the
    /// normalized node plus the batch mean/variance for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        a: Var,
        feature_axis: usize,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let x = self.rc(a);
        let c = x.shape()[feature_axis];
        let m = (x.len() / c) as f64;
        let mut means = Vec::with_capacity(c);
        let mut vars = Vec::with_capacity(c);
        let mut out = (*x).clone();
        for mut lane in out.axis_iter_mut(Axis(feature_axis)) {
            let mean = lane.sum() / m;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let is = 1.0 / (var + eps).sqrt();
            lane.mapv_inplace(|v| (v - mean) * is);
            means.push(mean);
            vars.push(var);
        }
        let inv_std: Vec<f64> = vars.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let y = Rc::new(out);
        let yc = Rc::clone(&y);
        let node = self.push_shared(
            y,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                for ((mut glane, ylane), &is) in dx
                    .axis_iter_mut(Axis(feature_axis))
                    .zip(yc.axis_iter(Axis(feature_axis)))
                    .zip(inv_std.iter())
                {
                    let gmean: f64 = glane.sum() / m;
                    let gydot: f64 = glane
                        .iter()
                        .zip(ylane.iter())
                        .map(|(g, y)| g * y)
                        .sum::<f64>()
                        / m;
                    let ylane = ylane.to_owned();
                    for (gv, yv) in glane.iter_mut().zip(ylane.iter()) {
                        *gv = (*gv - gmean - yv * gydot) * is;
                    }
                }
                sink.add(a.0, dx);
            })),
        );
        (node, means, vars)
    }

    /// Batch normalization (inference): per-feature affine from running stats.
    pub fn batch_norm_eval(
        &mut self,
        a: Var,
        feature_axis: usize,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Var {
        let c = self.shape(a)[feature_axis];
        assert_eq!(running_mean.len(), c);
        let scale: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let shift: Vec<f64> = running_mean
            .iter()
            .zip(scale.iter())
            .map(|(&m, &s)| -m * s)
            .collect();
        let mut out = (*self.nodes[a.0].value).clone();
        for (i, mut lane) in out.axis_iter_mut(Axis(feature_axis)).enumerate() {
            lane.mapv_inplace(|v| v * scale[i] + shift[i]);
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                for (i, mut lane) in dx.axis_iter_mut(Axis(feature_axis)).enumerate() {
                    lane *= scale[i];
                }
                sink.add(a.0, dx);
            })),
        )
    }

    /// Inverted dropout; identity when the graph is in eval mode or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        assert!(p < 1.0, "dropout rate must be < 1");
        let keep = 1.0 - p;
        let shape: Vec<usize> = self.shape(a).to_vec();
        let mut mask = ArrayD::zeros(IxDyn(&shape));
        for v in mask.iter_mut() {
            if self.rng.gen::<f64>() >= p {
                *v = 1.0 / keep;
            }
        }
        let mask = Rc::new(mask);
        let mc = Rc::clone(&mask);
        let out = &*self.nodes[a.0].value * &*mask;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.0, g * &*mc);
            })),
        )
    }

    // -- linear algebra -------------------------------------------------------

    /// 2-D matrix product `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.rc(a);
        let bv = self.rc(b);
        let a2 = as2(&av);
        let b2 = as2(&bv);
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dim mismatch");
        let out = a2.dot(&b2).into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                let a2 = as2(&av);
                let b2 = as2(&bv);
                sink.add(a.0, g2.dot(&b2.t()).into_dyn());
                sink.add(b.0, a2.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// Batched matrix product `[L,M,K] x [L,K,N] -> [L,M,N]`.
    pub fn matmul_batched(&mut self, a: Var, b: Var) -> Var {
        let av = self.rc(a);
        let bv = self.rc(b);
        let (l, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (lb, kb, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert_eq!((l, k), (lb, kb), "matmul_batched: shape mismatch");
        let mut out = ArrayD::zeros(IxDyn(&[l, m, n]));
        for i in 0..l {
            let ai = slice2(&av, i);
            let bi = slice2(&bv, i);
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = ArrayD::zeros(av.raw_dim());
                let mut db = ArrayD::zeros(bv.raw_dim());
                for i in 0..l {
                    let gi = slice2(g, i);
                    let ai = slice2(&av, i);
                    let bi = slice2(&bv, i);
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                sink.add(a.0, da);
                sink.add(b.0, db);
            })),
        )
    }

    // -- sparse lookup (memory layers) -----------------------------------------

    /// Row gather: `table[idx[i], :] -> out[i, :]`. Backward scatter-adds into
    /// the table, so rows that were never selected get exactly zero gradient.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.rc(table);
        assert_eq!(tv.ndim(), 2, "gather_rows wants a 2-D table");
        let (n, d) = (tv.shape()[0], tv.shape()[1]);
        let idx: Vec<usize> = idx.to_vec();
        for &i in &idx {
            assert!(i < n, "gather_rows: index {i} out of range {n}");
        }
        let mut out = ArrayD::zeros(IxDyn(&[idx.len(), d]));
        for (r, &i) in idx.iter().enumerate() {
            out.index_axis_mut(Axis(0), r)
                .assign(&tv.index_axis(Axis(0), i));
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dt = ArrayD::zeros(IxDyn(&[n, d]));
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = dt.index_axis_mut(Axis(0), i);
                    row += &g.index_axis(Axis(0), r);
                }
                sink.add(table.0, dt);
            })),
        )
    }

    /// `out[b,j] = dot(a[b,j,:], q[b,:])` for `a: [B,J,D]`, `q: [B,D]`.
    pub fn batched_dot(&mut self, a: Var, q: Var) -> Var {
        let av = self.rc(a);
        let qv = self.rc(q);
        let (b, j, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(qv.shape(), [b, d], "batched_dot: query shape mismatch");
        let mut out = ArrayD::zeros(IxDyn(&[b, j]));
        for bi in 0..b {
            for ji in 0..j {
                let mut s = 0.0;
                for di in 0..d {
                    s += av[[bi, ji, di]] * qv[[bi, di]];
                }
                out[[bi, ji]] = s;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = ArrayD::zeros(av.raw_dim());
                let mut dq = ArrayD::zeros(qv.raw_dim());
                for bi in 0..b {
                    for ji in 0..j {
                        let gv = g[[bi, ji]];
                        for di in 0..d {
                            da[[bi, ji, di]] += gv * qv[[bi, di]];
                            dq[[bi, di]] += gv * av[[bi, ji, di]];
                        }
                    }
                }
                sink.add(a.0, da);
                sink.add(q.0, dq);
            })),
        )
    }

    /// `out[b,:] = sum_j w[b,j] * v[b,j,:]` for `w: [B,J]`, `v: [B,J,D]`.
    pub fn batched_weighted_sum(&mut self, w: Var, v: Var) -> Var {
        let wv = self.rc(w);
        let vv = self.rc(v);
        let (b, j, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
        assert_eq!(wv.shape(), [b, j], "batched_weighted_sum: weight shape");
        let mut out = ArrayD::zeros(IxDyn(&[b, d]));
        for bi in 0..b {
            for ji in 0..j {
                let wij = wv[[bi, ji]];
                for di in 0..d {
                    out[[bi, di]] += wij * vv[[bi, ji, di]];
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dw = ArrayD::zeros(wv.raw_dim());
                let mut dv = ArrayD::zeros(vv.raw_dim());
                for bi in 0..b {
                    for ji in 0..j {
                        let mut s = 0.0;
                        let wij = wv[[bi, ji]];
                        for di in 0..d {
                            s += g[[bi, di]] * vv[[bi, ji, di]];
                            dv[[bi, ji, di]] += wij * g[[bi, di]];
                        }
                        dw[[bi, ji]] = s;
                    }
                }
                sink.add(w.0, dw);
                sink.add(v.0, dv);
            })),
        )
    }

    fn push_shared(&mut self, value: Value, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value, backward });
        Var(self.nodes.len() - 1)
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().unwrap()
}

fn slice2(a: &ArrayD<f64>, i: usize) -> ndarray::ArrayView2<'_, f64> {
    a.index_axis(Axis(0), i)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

fn tile(a: &ArrayD<f64>, reps: &[usize]) -> ArrayD<f64> {
    let mut out = a.clone();
    for (axis, &r) in reps.iter().enumerate() {
        if r > 1 {
            let views: Vec<_> = std::iter::repeat(out.view()).take(r).collect();
            out = ndarray::concatenate(Axis(axis), &views).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check_op;
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[3, 4], &mut rng);
        check_op(&[a.clone(), b.clone()], |g, vars| {
            let x = g.add(vars[0], vars[1]);
            let y = g.mul(x, vars[0]);
            let z = g.relu(y);
            let s = g.scale(z, 1.7);
            g.mean_all(s)
        });
        check_op(&[a, b], |g, vars| {
            let x = g.sub(vars[0], vars[1]);
            g.sum_all(x)
        });
    }

    #[test]
    fn broadcast_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[2, 3, 4], &mut rng);
        let v = randn(&[3], &mut rng);
        check_op(&[x.clone(), v.clone()], |g, vars| {
            let y = g.add_along(vars[0], vars[1], 1);
            g.mean_all(y)
        });
        check_op(&[x, v], |g, vars| {
            let y = g.mul_along(vars[0], vars[1], 1);
            g.mean_all(y)
        });
    }

    #[test]
    fn matmul_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[4, 2], &mut rng);
        check_op(&[a, b], |g, vars| {
            let y = g.matmul(vars[0], vars[1]);
            g.mean_all(y)
        });
        let a = randn(&[2, 3, 4], &mut rng);
        let b = randn(&[2, 4, 2], &mut rng);
        check_op(&[a, b], |g, vars| {
            let y = g.matmul_batched(vars[0], vars[1]);
            g.mean_all(y)
        });
    }

    #[test]
    fn softmax_family_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&[3, 5], &mut rng);
        check_op(&[a.clone()], |g, vars| {
            let y = g.softmax_last(vars[0]);
            let z = g.mul(y, y);
            g.mean_all(z)
        });
        check_op(&[a], |g, vars| {
            let y = g.log_softmax_last(vars[0]);
            g.mean_all(y)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new(false, 0);
        let a = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap());
        let y = g.softmax_last(a);
        for row in g.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&[4, 6], &mut rng);
        check_op(&[x.clone()], |g, vars| {
            let y = g.layer_norm(vars[0], 1e-5);
            let z = g.mul(y, y);
            g.mean_all(z)
        });
        check_op(&[x.clone()], |g, vars| {
            let (y, _, _) = g.batch_norm_train(vars[0], 1, 1e-5);
            let z = g.mul(y, y);
            g.mean_all(z)
        });
        check_op(&[x], |g, vars| {
            let y = g.batch_norm_eval(vars[0], 1, &[0.1; 6], &[0.9; 6], 1e-5);
            g.mean_all(y)
        });
    }

    #[test]
    fn shape_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&[2, 3, 4], &mut rng);
        let y = randn(&[2, 5, 4], &mut rng);
        check_op(&[x.clone()], |g, vars| {
            let a = g.reshape(vars[0], &[6, 4]);
            let b = g.permute(a, &[1, 0]);
            g.mean_all(b)
        });
        check_op(&[x.clone(), y], |g, vars| {
            let c = g.concat(1, vars[0], vars[1]);
            let m = g.mean_axis(c, 1);
            g.mean_all(m)
        });
        check_op(&[x], |g, vars| {
            let m = g.mean_axis(vars[0], 2);
            g.sum_all(m)
        });
        let x = randn(&[3, 6], &mut rng);
        check_op(&[x], |g, vars| {
            let s = g.narrow(vars[0], 1, 2, 3);
            let z = g.mul(s, s);
            g.mean_all(z)
        });
    }

    #[test]
    fn gather_and_batched_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = randn(&[5, 3], &mut rng);
        check_op(&[table], |g, vars| {
            let rows = g.gather_rows(vars[0], &[0, 2, 2, 4]);
            g.mean_all(rows)
        });
        let a = randn(&[2, 4, 3], &mut rng);
        let q = randn(&[2, 3], &mut rng);
        check_op(&[a, q], |g, vars| {
            let s = g.batched_dot(vars[0], vars[1]);
            g.mean_all(s)
        });
        let w = randn(&[2, 4], &mut rng);
        let v = randn(&[2, 4, 3], &mut rng);
        check_op(&[w, v], |g, vars| {
            let o = g.batched_weighted_sum(vars[0], vars[1]);
            g.mean_all(o)
        });
    }

    #[test]
    fn gather_rows_leaves_unselected_rows_at_zero_gradient() {
        let mut g = Graph::new(false, 0);
        let table = g.leaf(ArrayD::from_shape_fn(IxDyn(&[4, 2]), |ix| (ix[0] * 2 + ix[1]) as f64));
        let rows = g.gather_rows(table, &[1, 3]);
        let loss = g.sum_all(rows);
        let grads = g.backward(loss);
        let dt = grads.get(table).unwrap();
        assert_eq!(dt.index_axis(Axis(0), 0).sum(), 0.0);
        assert_eq!(dt.index_axis(Axis(0), 2).sum(), 0.0);
        assert_eq!(dt.index_axis(Axis(0), 1).sum(), 2.0);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_masked_in_train() {
        let x = ArrayD::from_elem(IxDyn(&[1000]), 1.0);
        let mut g = Graph::new(false, 9);
        let a = g.leaf(x.clone());
        let y = g.dropout(a, 0.4);
        assert_eq!(g.value(y), &x);

        let mut g = Graph::new(true, 9);
        let a = g.leaf(x);
        let y = g.dropout(a, 0.4);
        let kept = g.value(y).iter().filter(|&&v| v > 0.0).count();
        assert!(kept > 500 && kept < 700, "kept {kept} of 1000 at p=0.4");
        let scale = 1.0 / 0.6;
        assert!(g
            .value(y)
            .iter()
            .all(|&v| v == 0.0 || (v - scale).abs() < 1e-12));
    }

    #[test]
    fn dropout_is_deterministic_under_seed() {
        let x = ArrayD::from_elem(IxDyn(&[64]), 1.0);
        let run = |seed| {
            let mut g = Graph::new(true, seed);
            let a = g.leaf(x.clone());
            let y = g.dropout(a, 0.5);
            g.value(y).clone()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
