//! Convolution and pooling nodes: 3-D and 1-D convolution via im2col + GEMM,
//! max/average pooling, and adaptive average pooling along one axis.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rayon::prelude::*;
use std::rc::Rc;

use super::{GradSink, Graph, Var};

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "conv: input {input} (+pad {pad}) shorter than kernel {kernel}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Pool output length, floor mode. A single partial window is emitted when
/// the input is shorter than the kernel so short sequences stay usable.
pub fn pool_out_len(input: usize, kernel: usize, stride: usize) -> usize {
    if input >= kernel {
        (input - kernel) / stride + 1
    } else {
        1
    }
}

/// Bin boundaries for adaptive average pooling:
/// `[floor(t*n/target), ceil((t+1)*n/target))`.
pub fn adaptive_bin(t: usize, n: usize, target: usize) -> (usize, usize) {
    let start = t * n / target;
    let end = ((t + 1) * n).div_ceil(target);
    (start, end)
}

#[derive(Clone, Copy)]
struct Dims3 {
    ci: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    st: usize,
    sh: usize,
    sw: usize,
    pt: usize,
    ph: usize,
    pw: usize,
    to: usize,
    ho: usize,
    wo: usize,
}

impl Dims3 {
    fn k(&self) -> usize {
        self.ci * self.kt * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.to * self.ho * self.wo
    }
}

fn im2col3(x: &ArrayD<f64>, b: usize, d: &Dims3) -> Array2<f64> {
    let mut col = Array2::zeros((d.k(), d.p()));
    let mut row = 0usize;
    for ci in 0..d.ci {
        for dt in 0..d.kt {
            for dh in 0..d.kh {
                for dw in 0..d.kw {
                    let mut cslot = 0usize;
                    for to in 0..d.to {
                        let ti = (to * d.st + dt) as isize - d.pt as isize;
                        for ho in 0..d.ho {
                            let hi = (ho * d.sh + dh) as isize - d.ph as isize;
                            for wo in 0..d.wo {
                                let wi = (wo * d.sw + dw) as isize - d.pw as isize;
                                if ti >= 0
                                    && (ti as usize) < d.t
                                    && hi >= 0
                                    && (hi as usize) < d.h
                                    && wi >= 0
                                    && (wi as usize) < d.w
                                {
                                    col[[row, cslot]] =
                                        x[[b, ci, ti as usize, hi as usize, wi as usize]];
                                }
                                cslot += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

fn col2im3(dcol: &Array2<f64>, d: &Dims3) -> ArrayD<f64> {
    let mut dx = ArrayD::zeros(IxDyn(&[d.ci, d.t, d.h, d.w]));
    let mut row = 0usize;
    for ci in 0..d.ci {
        for dt in 0..d.kt {
            for dh in 0..d.kh {
                for dw in 0..d.kw {
                    let mut cslot = 0usize;
                    for to in 0..d.to {
                        let ti = (to * d.st + dt) as isize - d.pt as isize;
                        for ho in 0..d.ho {
                            let hi = (ho * d.sh + dh) as isize - d.ph as isize;
                            for wo in 0..d.wo {
                                let wi = (wo * d.sw + dw) as isize - d.pw as isize;
                                if ti >= 0
                                    && (ti as usize) < d.t
                                    && hi >= 0
                                    && (hi as usize) < d.h
                                    && wi >= 0
                                    && (wi as usize) < d.w
                                {
                                    dx[[ci, ti as usize, hi as usize, wi as usize]] +=
                                        dcol[[row, cslot]];
                                }
                                cslot += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    dx
}

impl Graph {
    /// 3-D convolution: `x [B,Ci,T,H,W]`, `w [Co,Ci,kt,kh,kw]`, optional
    /// per-channel bias. Stride and padding are `(t, h, w)` triples.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Var {
        let xv = self.rc(x);
        let wv = self.rc(w);
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        assert_eq!(xs.len(), 5, "conv3d input must be 5-D");
        assert_eq!(ws.len(), 5, "conv3d weight must be 5-D");
        assert_eq!(xs[1], ws[1], "conv3d: channel mismatch");
        let batch = xs[0];
        let co = ws[0];
        let d = Dims3 {
            ci: xs[1],
            t: xs[2],
            h: xs[3],
            w: xs[4],
            kt: ws[2],
            kh: ws[3],
            kw: ws[4],
            st: stride.0,
            sh: stride.1,
            sw: stride.2,
            pt: pad.0,
            ph: pad.1,
            pw: pad.2,
            to: conv_out_len(xs[2], ws[2], stride.0, pad.0),
            ho: conv_out_len(xs[3], ws[3], stride.1, pad.1),
            wo: conv_out_len(xs[4], ws[4], stride.2, pad.2),
        };
        let w2 = flatten2(&wv, co);
        let per_item: Vec<Array2<f64>> = {
            let x: &ArrayD<f64> = &xv;
            (0..batch)
                .into_par_iter()
                .map(|b| {
                    let col = im2col3(x, b, &d);
                    w2.dot(&col)
                })
                .collect()
        };
        let mut out = ArrayD::zeros(IxDyn(&[batch, co, d.to, d.ho, d.wo]));
        for (b, y2) in per_item.iter().enumerate() {
            let flat = y2.as_slice().unwrap();
            out.index_axis_mut(Axis(0), b)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(flat);
        }
        let node = {
            let xv = Rc::clone(&xv);
            let wv = Rc::clone(&wv);
            self.push_conv(
                out,
                Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                    let w2 = flatten2(&wv, co);
                    let xarr: &ArrayD<f64> = &xv;
                    let results: Vec<(ArrayD<f64>, Array2<f64>)> = (0..batch)
                        .into_par_iter()
                        .map(|b| {
                            let g2 = item2(g, b, co, d.p());
                            let col = im2col3(xarr, b, &d);
                            let dcol = w2.t().dot(&g2);
                            let dxb = col2im3(&dcol, &d);
                            let dwb = g2.dot(&col.t());
                            (dxb, dwb)
                        })
                        .collect();
                    let mut dx = ArrayD::zeros(xv.raw_dim());
                    let mut dw2 = Array2::zeros((co, d.k()));
                    for (b, (dxb, dwb)) in results.into_iter().enumerate() {
                        dx.index_axis_mut(Axis(0), b).assign(&dxb);
                        dw2 += &dwb;
                    }
                    sink.add(x.0, dx);
                    sink.add(
                        w.0,
                        dw2.into_shape_with_order(IxDyn(wv.shape())).unwrap(),
                    );
                }),
            )
        };
        match bias {
            Some(b) => self.add_along(node, b, 1),
            None => node,
        }
    }

    /// 1-D convolution over time: `x [B,Ci,T]`, `w [Co,Ci,k]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xv = self.rc(x);
        let wv = self.rc(w);
        let (batch, ci, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (co, ciw, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(ci, ciw, "conv1d: channel mismatch");
        let to = conv_out_len(t, k, stride, pad);
        let kdim = ci * k;
        let w2 = flatten2(&wv, co);
        let im2col1 = move |xv: &ArrayD<f64>, b: usize| -> Array2<f64> {
            let mut col = Array2::zeros((kdim, to));
            for c in 0..ci {
                for dk in 0..k {
                    for o in 0..to {
                        let ti = (o * stride + dk) as isize - pad as isize;
                        if ti >= 0 && (ti as usize) < t {
                            col[[c * k + dk, o]] = xv[[b, c, ti as usize]];
                        }
                    }
                }
            }
            col
        };
        let mut out = ArrayD::zeros(IxDyn(&[batch, co, to]));
        for b in 0..batch {
            let y2 = w2.dot(&im2col1(&xv, b));
            out.index_axis_mut(Axis(0), b)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(y2.as_slice().unwrap());
        }
        let node = {
            let xv = Rc::clone(&xv);
            let wv = Rc::clone(&wv);
            self.push_conv(
                out,
                Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                    let w2 = flatten2(&wv, co);
                    let mut dx = ArrayD::zeros(xv.raw_dim());
                    let mut dw2 = Array2::zeros((co, kdim));
                    for b in 0..batch {
                        let g2 = item2(g, b, co, to);
                        let col = im2col1(&xv, b);
                        dw2 += &g2.dot(&col.t());
                        let dcol = w2.t().dot(&g2);
                        for c in 0..ci {
                            for dk in 0..k {
                                for o in 0..to {
                                    let ti = (o * stride + dk) as isize - pad as isize;
                                    if ti >= 0 && (ti as usize) < t {
                                        dx[[b, c, ti as usize]] += dcol[[c * k + dk, o]];
                                    }
                                }
                            }
                        }
                    }
                    sink.add(x.0, dx);
                    sink.add(
                        w.0,
                        dw2.into_shape_with_order(IxDyn(wv.shape())).unwrap(),
                    );
                }),
            )
        };
        match bias {
            Some(b) => self.add_along(node, b, 1),
            None => node,
        }
    }

    /// Max pooling over the last axis of `x [B,C,T]`, floor mode; ties go to
    /// the earliest element. Emits one partial window when `T < kernel`.
    pub fn maxpool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let xv = self.rc(x);
        let (batch, c, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let to = pool_out_len(t, kernel, stride);
        let mut out = ArrayD::zeros(IxDyn(&[batch, c, to]));
        let mut argmax = vec![0usize; batch * c * to];
        for b in 0..batch {
            for ci in 0..c {
                for o in 0..to {
                    let start = o * stride;
                    let end = (start + kernel).min(t);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = start;
                    for i in start..end {
                        let v = xv[[b, ci, i]];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                    out[[b, ci, o]] = best;
                    argmax[(b * c + ci) * to + o] = best_i;
                }
            }
        }
        self.push_conv(
            out,
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let mut dx = ArrayD::zeros(IxDyn(&[batch, c, t]));
                for b in 0..batch {
                    for ci in 0..c {
                        for o in 0..to {
                            dx[[b, ci, argmax[(b * c + ci) * to + o]]] += g[[b, ci, o]];
                        }
                    }
                }
                sink.add(x.0, dx);
            }),
        )
    }

    /// Average pooling with kernel `(1, kh, kw)` and stride 1 over
    /// `x [B,C,T,H,W]`; time is untouched.
    pub fn avgpool_spatial(&mut self, x: Var, kh: usize, kw: usize) -> Var {
        let xv = self.rc(x);
        let s = xv.shape().to_vec();
        let (batch, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        assert!(h >= kh && w >= kw, "avgpool_spatial: input smaller than kernel");
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let norm = 1.0 / (kh * kw) as f64;
        let mut out = ArrayD::zeros(IxDyn(&[batch, c, t, ho, wo]));
        for b in 0..batch {
            for ci in 0..c {
                for ti in 0..t {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut acc = 0.0;
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    acc += xv[[b, ci, ti, oh + dh, ow + dw]];
                                }
                            }
                            out[[b, ci, ti, oh, ow]] = acc * norm;
                        }
                    }
                }
            }
        }
        self.push_conv(
            out,
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let mut dx = ArrayD::zeros(IxDyn(&[batch, c, t, h, w]));
                for b in 0..batch {
                    for ci in 0..c {
                        for ti in 0..t {
                            for oh in 0..ho {
                                for ow in 0..wo {
                                    let gv = g[[b, ci, ti, oh, ow]] * norm;
                                    for dh in 0..kh {
                                        for dw in 0..kw {
                                            dx[[b, ci, ti, oh + dh, ow + dw]] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                sink.add(x.0, dx);
            }),
        )
    }

    /// Adaptive average pooling along `axis` to `target` slots. Slot `t`
    /// averages input indices `[floor(t*n/target), ceil((t+1)*n/target))`.
    pub fn adaptive_avg_pool_axis(&mut self, x: Var, axis: usize, target: usize) -> Var {
        assert!(target >= 1, "adaptive pool target must be >= 1");
        let xv = self.rc(x);
        let n = xv.shape()[axis];
        let mut out_shape = xv.shape().to_vec();
        out_shape[axis] = target;
        let mut out = ArrayD::zeros(IxDyn(&out_shape));
        for t in 0..target {
            let (start, end) = adaptive_bin(t, n, target);
            let slice = xv.slice_axis(
                Axis(axis),
                ndarray::Slice::from(start as isize..end as isize),
            );
            let mean = slice.mean_axis(Axis(axis)).unwrap();
            out.index_axis_mut(Axis(axis), t).assign(&mean);
        }
        self.push_conv(
            out,
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let mut dx = ArrayD::zeros(xv.raw_dim());
                for t in 0..target {
                    let (start, end) = adaptive_bin(t, n, target);
                    let len = (end - start) as f64;
                    let gslice = g.index_axis(Axis(axis), t);
                    for j in start..end {
                        let mut lane = dx.index_axis_mut(Axis(axis), j);
                        lane.zip_mut_with(&gslice, |d, &gv| *d += gv / len);
                    }
                }
                sink.add(x.0, dx);
            }),
        )
    }

    fn push_conv(
        &mut self,
        value: ArrayD<f64>,
        backward: Box<dyn Fn(&ArrayD<f64>, &mut GradSink)>,
    ) -> Var {
        self.push(value, Some(backward))
    }
}

fn flatten2(w: &ArrayD<f64>, rows: usize) -> Array2<f64> {
    let cols = w.len() / rows;
    w.to_shape((rows, cols))
        .expect("weight is standard layout")
        .to_owned()
}

fn item2(g: &ArrayD<f64>, b: usize, rows: usize, cols: usize) -> Array2<f64> {
    g.index_axis(Axis(0), b)
        .to_shape((rows, cols))
        .unwrap()
        .to_owned()
}
