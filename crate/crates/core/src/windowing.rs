//! Word-boundary statistics, candidate temporal-window sizes, and centered
//! window extraction.
//!
//! Candidate windows come from the 68-95-99.7 rule applied to the boundary
//! duration distribution: round the mean half-up, take the ceiling of the
//! standard deviation, and form `{mean + k*std | k = 1,2,3}`. Even results
//! are bumped to the next odd number so a centered window is well defined,
//! and everything is clamped to the clip length.

use ndarray::{ArrayBase, Axis, Data, Dimension, OwnedRepr, Slice};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryStats {
    /// Arithmetic mean duration in frames.
    pub mean: f64,
    /// Population standard deviation in frames.
    pub std: f64,
    pub count: usize,
}

/// Mean and population standard deviation of word-boundary durations.
pub fn boundary_stats(durations: &[usize]) -> Result<BoundaryStats> {
    if durations.is_empty() {
        return Err(Error::InvalidArgument(
            "boundary_stats: empty duration list".into(),
        ));
    }
    if durations.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(
            "boundary_stats: durations must be positive".into(),
        ));
    }
    let n = durations.len() as f64;
    let mean = durations.iter().map(|&d| d as f64).sum::<f64>() / n;
    let var = durations
        .iter()
        .map(|&d| {
            let diff = d as f64 - mean;
            diff * diff
        })
        .sum::<f64>()
        / n;
    Ok(BoundaryStats {
        mean,
        std: var.sqrt(),
        count: durations.len(),
    })
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// The three candidate window sizes `{mean + std, mean + 2*std, mean + 3*std}`
/// after rounding (mean half-up, std by ceiling), bumped to odd, sorted, and
/// clamped to `max_len`.
pub fn candidate_windows(stats: &BoundaryStats, max_len: usize) -> [usize; 3] {
    let mu = round_half_up(stats.mean).max(0) as usize;
    let sigma = stats.std.ceil() as usize;
    let mut out = [0usize; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut w = mu + (i + 1) * sigma;
        if w % 2 == 0 {
            w += 1;
        }
        if w > max_len {
            w = if max_len % 2 == 1 { max_len } else { max_len - 1 };
        }
        *slot = w;
    }
    out.sort_unstable();
    out
}

/// Start index of the odd-length window of size `w` centered at frame
/// `floor(len/2)`.
pub fn window_start(len: usize, w: usize) -> usize {
    len / 2 - (w - 1) / 2
}

/// Extracts the centered temporal window of odd length `w` along axis 0.
pub fn extract_window<T, D>(
    frames: &ArrayBase<OwnedRepr<T>, D>,
    w: usize,
) -> Result<ArrayBase<OwnedRepr<T>, D>>
where
    T: Clone,
    D: Dimension,
{
    let len = frames.len_of(Axis(0));
    if w % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "window size {w} is even; centered windows must be odd"
        )));
    }
    if w > len {
        return Err(Error::InvalidArgument(format!(
            "window size {w} exceeds clip length {len}"
        )));
    }
    let start = window_start(len, w);
    Ok(frames
        .slice_axis(Axis(0), Slice::from(start as isize..(start + w) as isize))
        .to_owned())
}

/// Like [`extract_window`] for borrowed data.
pub fn extract_window_view<'a, T, S, D>(
    frames: &'a ArrayBase<S, D>,
    w: usize,
) -> Result<ndarray::ArrayView<'a, T, D>>
where
    S: Data<Elem = T>,
    D: Dimension,
{
    let len = frames.len_of(Axis(0));
    if w % 2 == 0 || w > len {
        return Err(Error::InvalidArgument(format!(
            "bad window size {w} for clip length {len}"
        )));
    }
    let start = window_start(len, w);
    Ok(frames.slice_axis(Axis(0), Slice::from(start as isize..(start + w) as isize)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;

    #[test]
    fn stats_match_hand_arithmetic() {
        let s = boundary_stats(&[10, 11, 11]).unwrap();
        assert!((s.mean - 10.666666666666666).abs() < 1e-12);
        // population std of [10,11,11] = sqrt(2)/3
        assert!((s.std - 0.47140452079103173).abs() < 1e-12);
        assert_eq!(s.count, 3);
    }

    #[test]
    fn constant_durations_have_zero_std() {
        let s = boundary_stats(&[7, 7, 7, 7]).unwrap();
        assert_eq!(s.mean, 7.0);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn empty_duration_list_is_an_error() {
        assert!(boundary_stats(&[]).is_err());
    }

    #[test]
    fn reference_boundary_distribution_yields_15_19_23() {
        let stats = BoundaryStats {
            mean: 10.59,
            std: 3.2,
            count: 488_766,
        };
        assert_eq!(candidate_windows(&stats, 29), [15, 19, 23]);
    }

    #[test]
    fn degenerate_std_yields_three_equal_odd_windows() {
        let stats = BoundaryStats {
            mean: 10.0,
            std: 0.0,
            count: 5,
        };
        assert_eq!(candidate_windows(&stats, 29), [11, 11, 11]);
    }

    #[test]
    fn even_candidates_are_bumped_to_odd() {
        let stats = BoundaryStats {
            mean: 8.2,
            std: 2.6,
            count: 10,
        };
        // mu=8, sigma=3 -> {11, 14->15, 17}
        assert_eq!(candidate_windows(&stats, 29), [11, 15, 17]);
    }

    #[test]
    fn windows_are_clamped_to_clip_length() {
        let stats = BoundaryStats {
            mean: 20.0,
            std: 6.0,
            count: 10,
        };
        let ws = candidate_windows(&stats, 29);
        assert!(ws.iter().all(|&w| w <= 29 && w % 2 == 1));
        assert_eq!(ws[2], 29);
    }

    #[test]
    fn window_extraction_matches_index_arithmetic() {
        let frames = Array1::from_iter(0..29);
        let w = extract_window(&frames, 23).unwrap();
        assert_eq!(w.len(), 23);
        assert_eq!(w[0], 3);
        assert_eq!(w[22], 25);

        let full = extract_window(&frames, 29).unwrap();
        assert_eq!(full, frames);

        let single = extract_window(&frames, 1).unwrap();
        assert_eq!(single.to_vec(), vec![14]);
    }

    #[test]
    fn even_or_oversized_windows_are_rejected() {
        let frames = Array1::from_iter(0..29);
        assert!(extract_window(&frames, 22).is_err());
        assert!(extract_window(&frames, 31).is_err());
    }

    proptest! {
        #[test]
        fn candidate_windows_are_odd_bounded_and_monotone_in_sigma(
            mean in 1.0f64..40.0,
            std in 0.0f64..12.0,
            bump in 0.1f64..4.0,
        ) {
            let len = 41;
            let a = candidate_windows(&BoundaryStats { mean, std, count: 1 }, len);
            let b = candidate_windows(&BoundaryStats { mean, std: std + bump, count: 1 }, len);
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!(x % 2 == 1 && *x <= len);
                prop_assert!(y >= x, "larger sigma must not shrink windows");
            }
            prop_assert!(a[0] <= a[1] && a[1] <= a[2]);
        }

        #[test]
        fn removed_prefix_and_suffix_reconstruct_the_clip(
            len_half in 2usize..20,
            w_half in 0usize..20,
        ) {
            let len = 2 * len_half + 1;
            let w = (2 * w_half + 1).min(len);
            let frames = Array1::from_iter(0..len as i64);
            let window = extract_window(&frames, w).unwrap();
            let start = window_start(len, w);
            let mut rebuilt: Vec<i64> = frames.iter().take(start).copied().collect();
            rebuilt.extend(window.iter().copied());
            rebuilt.extend(frames.iter().skip(start + w).copied());
            prop_assert_eq!(rebuilt, frames.to_vec());
        }
    }
}
