//! Dual 1-D temporal convolution back-end.
//!
//! Each pathway is aggregated by two conv blocks, `conv(k, stride 2, pad
//! k/2) -> batchnorm -> ReLU -> maxpool(2, 2)`, doubling channels per block
//! (so 4x overall). The windowed pathway uses kernel 3, the all-frame pathway
//! kernel 5. Remaining time steps are averaged, both vectors concatenated,
//! and one linear layer emits unnormalized word-class logits.
//!
//! Pooling is floor mode, except that a single partial window is emitted when
//! fewer than two steps remain; without that, short windows (length 7 spot
//! stacks) would collapse to zero length. Convolutions carry `k/2` padding:
//! the stated kernels and strides annihilate the 29-step pathway without it.

use crate::autodiff::{conv_out_len, pool_out_len, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv1d, Init, Linear, ParamStore};

/// Symbolic length trace through the stack:
/// `[input, conv1, pool1, conv2, pool2]`. Errors when the input is shorter
/// than the kernel.
pub fn stack_length_trace(t: usize, kernel: usize) -> Result<Vec<usize>> {
    if t < kernel {
        return Err(Error::Shape(format!(
            "temporal stack input length {t} shorter than kernel {kernel}"
        )));
    }
    let c1 = conv_out_len(t, kernel, 2, kernel / 2);
    let p1 = pool_out_len(c1, 2, 2);
    let c2 = conv_out_len(p1, kernel, 2, kernel / 2);
    let p2 = pool_out_len(c2, 2, 2);
    Ok(vec![t, c1, p1, c2, p2])
}

/// Output length of [`TemporalConvStack::forward`] for an input of length `t`.
pub fn stack_out_len(t: usize, kernel: usize) -> Result<usize> {
    Ok(*stack_length_trace(t, kernel)?.last().unwrap())
}

/// Width of the fused classifier input for given pathway feature sizes.
pub fn fused_width(c_spot: usize, c_fast: usize) -> usize {
    4 * c_spot + 4 * c_fast
}

pub struct TemporalConvStack {
    pub kernel: usize,
    in_channels: usize,
    conv1: Conv1d,
    bn1: BatchNorm,
    conv2: Conv1d,
    bn2: BatchNorm,
}

impl TemporalConvStack {
    pub fn new(
        ps: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        kernel: usize,
    ) -> Self {
        let conv1 = Conv1d::new(
            ps,
            init,
            &format!("{name}.conv1"),
            in_channels,
            2 * in_channels,
            kernel,
            2,
            kernel / 2,
            true,
        );
        let bn1 = BatchNorm::new(ps, init, &format!("{name}.bn1"), 2 * in_channels, 1);
        let conv2 = Conv1d::new(
            ps,
            init,
            &format!("{name}.conv2"),
            2 * in_channels,
            4 * in_channels,
            kernel,
            2,
            kernel / 2,
            true,
        );
        let bn2 = BatchNorm::new(ps, init, &format!("{name}.bn2"), 4 * in_channels, 1);
        TemporalConvStack {
            kernel,
            in_channels,
            conv1,
            bn1,
            conv2,
            bn2,
        }
    }

    /// `x [B, C, T] -> [B, 4C, T']`.
    pub fn forward(&self, g: &mut Graph, ps: &mut ParamStore, x: Var, train: bool) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "temporal stack wants [B, {}, T], got {s:?}",
                self.in_channels
            )));
        }
        stack_length_trace(s[2], self.kernel)?;
        let y = self.conv1.forward(g, ps, x);
        let y = self.bn1.forward(g, ps, y, train);
        let y = g.relu(y);
        let y = g.maxpool1d(y, 2, 2);
        let y = self.conv2.forward(g, ps, y);
        let y = self.bn2.forward(g, ps, y, train);
        let y = g.relu(y);
        Ok(g.maxpool1d(y, 2, 2))
    }

    /// Stack then average over remaining time: `[B, C, T] -> [B, 4C]`.
    pub fn forward_pooled(
        &self,
        g: &mut Graph,
        ps: &mut ParamStore,
        x: Var,
        train: bool,
    ) -> Result<Var> {
        let y = self.forward(g, ps, x, train)?;
        Ok(g.mean_axis(y, 2))
    }
}

/// Concatenation of both pooled pathway vectors followed by the single
/// classification layer.
pub struct FusedClassifier {
    pub linear: Linear,
    pub num_classes: usize,
}

impl FusedClassifier {
    pub fn new(
        ps: &mut ParamStore,
        init: &mut Init,
        name: &str,
        c_spot: usize,
        c_fast: usize,
        num_classes: usize,
    ) -> Self {
        FusedClassifier {
            linear: Linear::new(
                ps,
                init,
                &format!("{name}.linear"),
                fused_width(c_spot, c_fast),
                num_classes,
                true,
            ),
            num_classes,
        }
    }

    /// `(spot [B, 4*C_s], fast [B, 4*C_f]) -> logits [B, num_classes]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        spot_vec: Var,
        fast_vec: Var,
    ) -> Result<Var> {
        let fused = g.concat(1, spot_vec, fast_vec);
        if g.shape(fused)[1] != self.linear.in_dim {
            return Err(Error::Shape(format!(
                "classifier wants fused width {}, got {}",
                self.linear.in_dim,
                g.shape(fused)[1]
            )));
        }
        Ok(self.linear.forward(g, ps, fused))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() - 0.5)
    }

    #[test]
    fn length_traces_match_conv_arithmetic() {
        assert_eq!(stack_length_trace(23, 3).unwrap(), vec![23, 12, 6, 3, 1]);
        assert_eq!(stack_length_trace(29, 5).unwrap(), vec![29, 15, 7, 4, 2]);
        assert_eq!(stack_length_trace(15, 3).unwrap(), vec![15, 8, 4, 2, 1]);
        assert_eq!(stack_length_trace(19, 3).unwrap(), vec![19, 10, 5, 3, 1]);
        // the desk window goes through the partial-window pool at the end
        assert_eq!(stack_length_trace(7, 3).unwrap(), vec![7, 4, 2, 1, 1]);
    }

    #[test]
    fn too_short_input_is_rejected() {
        assert!(stack_length_trace(2, 3).is_err());
        assert!(stack_length_trace(4, 5).is_err());
    }

    #[test]
    fn paper_widths_are_quadrupled_and_fused_to_9216() {
        assert_eq!(4 * 2048, 8192);
        assert_eq!(fused_width(2048, 256), 9216);
        assert_eq!(fused_width(64, 16), 320);
    }

    #[test]
    fn forward_quadruples_channels() {
        let mut ps = ParamStore::new();
        let mut init = Init::new(0);
        let stack = TemporalConvStack::new(&mut ps, &mut init, "tc", 6, 3);
        let mut g = Graph::new(false, 0);
        let x = g.leaf(randn(&[2, 6, 23], 1));
        let y = stack.forward(&mut g, &mut ps, x, false).unwrap();
        assert_eq!(g.shape(y), &[2, 24, 1]);
        let pooled = stack.forward_pooled(&mut g, &mut ps, x, false).unwrap();
        assert_eq!(g.shape(pooled), &[2, 24]);
    }

    proptest! {
        #[test]
        fn channel_contract_holds_for_any_width(c in 1usize..8, t in 5usize..32) {
            let mut ps = ParamStore::new();
            let mut init = Init::new(9);
            let stack = TemporalConvStack::new(&mut ps, &mut init, "tc", c, 3);
            let mut g = Graph::new(false, 0);
            let x = g.leaf(randn(&[1, c, t], t as u64));
            let y = stack.forward(&mut g, &mut ps, x, false).unwrap();
            prop_assert_eq!(g.shape(y)[1], 4 * c);
            prop_assert_eq!(g.shape(y)[2], stack_out_len(t, 3).unwrap());
        }
    }

    #[test]
    fn zero_initialized_classifier_emits_uniform_logits() {
        let mut ps = ParamStore::new();
        let mut init = Init::new(2);
        let clf = FusedClassifier::new(&mut ps, &mut init, "head", 4, 2, 10);
        ps.value_mut(clf.linear.w).fill(0.0);
        let mut g = Graph::new(false, 0);
        let spot = g.leaf(randn(&[3, 16], 4));
        let fast = g.leaf(randn(&[3, 8], 5));
        let logits = clf.forward(&mut g, &ps, spot, fast).unwrap();
        assert_eq!(g.shape(logits), &[3, 10]);
        assert!(g.value(logits).iter().all(|&v| v == 0.0));
        let probs = g.softmax_last(logits);
        assert!(g.value(probs).iter().all(|&p| (p - 0.1).abs() < 1e-12));
    }

    #[test]
    fn one_frame_shift_changes_pooled_output_boundedly() {
        let mut ps = ParamStore::new();
        let mut init = Init::new(3);
        let stack = TemporalConvStack::new(&mut ps, &mut init, "tc", 3, 5);
        let base = randn(&[1, 3, 29], 6);
        let mut shifted = base.clone();
        for c in 0..3 {
            for t in (1..29).rev() {
                shifted[[0, c, t]] = base[[0, c, t - 1]];
            }
        }
        let run = |ps: &mut ParamStore, x: &ArrayD<f64>| {
            let mut g = Graph::new(false, 0);
            let xv = g.leaf(x.clone());
            let y = stack.forward_pooled(&mut g, ps, xv, false).unwrap();
            g.value(y).clone()
        };
        let a = run(&mut ps, &base);
        let b = run(&mut ps, &shifted);
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff.is_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut ps = ParamStore::new();
        let mut init = Init::new(4);
        let stack = TemporalConvStack::new(&mut ps, &mut init, "tc", 3, 3);
        let clf = FusedClassifier::new(&mut ps, &mut init, "head", 3, 3, 4);
        let x = randn(&[2, 3, 9], 7);
        let samples = crate::nn::sample_param_indices(&ps, 40, 5);
        let report = crate::nn::grad_check_params(
            &mut ps,
            |g, ps| {
                let xv = g.leaf(x.clone());
                let a = stack.forward_pooled(g, ps, xv, true).unwrap();
                let logits = clf.forward(g, ps, a, a).unwrap();
                let sq = g.mul(logits, logits);
                g.mean_all(sq)
            },
            &samples,
        );
        assert!(
            report.iter().all(|s| s.passes(1e-3)),
            "worst: {:?}",
            report[0]
        );
    }
}
