//! Preprocessing and augmentation.
//!
//! Pipeline order: fixed-coordinate mouth crop, normalization to
//! `(x - 0.45) / 0.225` on the unit intensity scale, then either the seeded
//! train-time transform (random square upsample, random crop, random
//! horizontal flip, one draw per clip applied to every frame) or the
//! deterministic eval transform (fixed upsample, center crop).
//!
//! Upsampling is bilinear with corner-aligned sampling disabled
//! (`src = (dst + 0.5) * in/out - 0.5`), which makes same-size resizing an
//! exact identity.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Clip, Pixels};
use crate::error::{Error, Result};

pub const NORM_CENTER: f32 = 0.45;
pub const NORM_SCALE: f32 = 0.225;

/// Crop box, `(top, left, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Crops every frame to the same box. Fails when the box leaves the frame.
pub fn crop_mouth(clip: &Clip, cbox: CropBox) -> Result<Clip> {
    let (_, h, w, _) = clip.dims();
    if cbox.height == 0 || cbox.width == 0 {
        return Err(Error::InvalidArgument("empty crop box".into()));
    }
    if cbox.top + cbox.height > h || cbox.left + cbox.width > w {
        return Err(Error::InvalidArgument(format!(
            "crop box ({},{},{},{}) outside {}x{} frame",
            cbox.top, cbox.left, cbox.height, cbox.width, h, w
        )));
    }
    let rows = cbox.top..cbox.top + cbox.height;
    let cols = cbox.left..cbox.left + cbox.width;
    let pixels = match &clip.pixels {
        Pixels::U8(a) => Pixels::U8(a.slice(ndarray::s![.., rows, cols, ..]).to_owned()),
        Pixels::F32(a) => Pixels::F32(a.slice(ndarray::s![.., rows, cols, ..]).to_owned()),
    };
    Ok(Clip {
        pixels,
        ..clip.clone()
    })
}

/// Normalizes to `(x - 0.45) / 0.225` with integer input first mapped to
/// `[0, 1]`. Total on valid clips.
pub fn normalize(clip: &Clip) -> Clip {
    let unit = clip.pixels.to_f32_unit();
    let normalized = unit.mapv(|v| (v - NORM_CENTER) / NORM_SCALE);
    Clip {
        pixels: Pixels::F32(normalized),
        ..clip.clone()
    }
}

/// Collapses RGB to luma (Rec. 601 weights). Single-channel clips pass
/// through.
pub fn to_grayscale(clip: &Clip) -> Clip {
    let (t, h, w, c) = clip.dims();
    if c == 1 {
        return clip.clone();
    }
    let unit = clip.pixels.to_f32_unit();
    let mut out = Array4::<f32>::zeros((t, h, w, 1));
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                out[[ti, y, x, 0]] = 0.299 * unit[[ti, y, x, 0]]
                    + 0.587 * unit[[ti, y, x, 1]]
                    + 0.114 * unit[[ti, y, x, 2]];
            }
        }
    }
    Clip {
        pixels: Pixels::F32(out),
        ..clip.clone()
    }
}

/// Bilinear resize of every frame to `(out_h, out_w)`, corner alignment
/// disabled.
pub fn resize_bilinear(frames: &Array4<f32>, out_h: usize, out_w: usize) -> Array4<f32> {
    let (t, h, w, c) = frames.dim();
    if out_h == h && out_w == w {
        return frames.clone();
    }
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let mut out = Array4::<f32>::zeros((t, out_h, out_w, c));
    for ti in 0..t {
        for oy in 0..out_h {
            let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = (sy - y0 as f64) as f32;
            for ox in 0..out_w {
                let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = (sx - x0 as f64) as f32;
                for ch in 0..c {
                    let p00 = frames[[ti, y0, x0, ch]];
                    let p01 = frames[[ti, y0, x1, ch]];
                    let p10 = frames[[ti, y1, x0, ch]];
                    let p11 = frames[[ti, y1, x1, ch]];
                    let top = p00 + (p01 - p00) * fx;
                    let bottom = p10 + (p11 - p10) * fx;
                    out[[ti, oy, ox, ch]] = top + (bottom - top) * fy;
                }
            }
        }
    }
    out
}

/// Augmentation geometry, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Inclusive range of the random square upsample size.
    pub upsample_min: usize,
    pub upsample_max: usize,
    /// Output crop, applied after upsampling.
    pub crop: usize,
    /// Deterministic upsample size used by the eval transform.
    pub eval_upsample: usize,
}

impl AugmentConfig {
    /// Reference-scale geometry: upsample to `[122, 146]`, crop `112`, eval
    /// upsample `122`.
    pub fn paper() -> Self {
        AugmentConfig {
            upsample_min: 122,
            upsample_max: 146,
            crop: 112,
            eval_upsample: 122,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.upsample_min > self.upsample_max
            || self.crop > self.upsample_min
            || self.crop > self.eval_upsample
        {
            return Err(Error::Config(format!(
                "augment geometry inconsistent: upsample [{}..{}], crop {}, eval {}",
                self.upsample_min, self.upsample_max, self.crop, self.eval_upsample
            )));
        }
        Ok(())
    }
}

/// One clip's drawn augmentation parameters, shared by every frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub upsample: usize,
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

/// Draws the per-clip parameters. Draw order is fixed: size, top, left, flip.
pub fn sample_augment(rng: &mut impl Rng, cfg: &AugmentConfig) -> AugmentParams {
    let upsample = rng.gen_range(cfg.upsample_min..=cfg.upsample_max);
    let top = rng.gen_range(0..=upsample - cfg.crop);
    let left = rng.gen_range(0..=upsample - cfg.crop);
    let flip = rng.gen::<f64>() < 0.5;
    AugmentParams {
        upsample,
        top,
        left,
        flip,
    }
}

fn flip_horizontal(frames: &Array4<f32>) -> Array4<f32> {
    let mut out = frames.clone();
    out.invert_axis(ndarray::Axis(2));
    out
}

/// Applies drawn parameters to every frame identically.
pub fn apply_augment(clip: &Clip, params: AugmentParams, cfg: &AugmentConfig) -> Clip {
    let frames = clip.pixels.to_f32_unit();
    let resized = resize_bilinear(&frames, params.upsample, params.upsample);
    let rows = params.top..params.top + cfg.crop;
    let cols = params.left..params.left + cfg.crop;
    let mut cropped = resized.slice(ndarray::s![.., rows, cols, ..]).to_owned();
    if params.flip {
        cropped = flip_horizontal(&cropped);
    }
    Clip {
        pixels: Pixels::F32(cropped),
        ..clip.clone()
    }
}

/// Train-time transform: one upsample size, crop offset and flip decision per
/// clip, applied to all frames. Returns the drawn parameters for logging.
pub fn train_augment(clip: &Clip, rng: &mut impl Rng, cfg: &AugmentConfig) -> (Clip, AugmentParams) {
    let params = sample_augment(rng, cfg);
    (apply_augment(clip, params, cfg), params)
}

/// Eval transform: deterministic upsample and center crop, no flip.
pub fn eval_transform(clip: &Clip, cfg: &AugmentConfig) -> Clip {
    let margin = (cfg.eval_upsample - cfg.crop) / 2;
    apply_augment(
        clip,
        AugmentParams {
            upsample: cfg.eval_upsample,
            top: margin,
            left: margin,
            flip: false,
        },
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::clip_rng;
    use ndarray::Array4;
    use proptest::prelude::*;

    fn clip_from(frames: Array4<f32>) -> Clip {
        Clip {
            pixels: Pixels::F32(frames),
            label: 0,
            clip_id: "fixture".into(),
            boundary: None,
        }
    }

    fn clip_u8(frames: Array4<u8>) -> Clip {
        Clip {
            pixels: Pixels::U8(frames),
            label: 0,
            clip_id: "fixture".into(),
            boundary: None,
        }
    }

    #[test]
    fn full_frame_crop_is_identity() {
        let frames = Array4::from_shape_fn((2, 96, 96, 1), |(t, y, x, _)| {
            (t * 10_000 + y * 100 + x) as f32
        });
        let clip = clip_from(frames.clone());
        let out = crop_mouth(
            &clip,
            CropBox {
                top: 0,
                left: 0,
                height: 96,
                width: 96,
            },
        )
        .unwrap();
        let Pixels::F32(p) = &out.pixels else { panic!() };
        assert_eq!(p, &frames);
    }

    #[test]
    fn crop_maps_indices_exactly() {
        // labeled-pixel fixture: value encodes (row, col)
        let frames = Array4::from_shape_fn((1, 256, 256, 1), |(_, y, x, _)| (y * 256 + x) as f32);
        let clip = clip_from(frames);
        let out = crop_mouth(
            &clip,
            CropBox {
                top: 96,
                left: 80,
                height: 96,
                width: 96,
            },
        )
        .unwrap();
        let (_, h, w, _) = out.dims();
        assert_eq!((h, w), (96, 96));
        let Pixels::F32(p) = &out.pixels else { panic!() };
        for i in [0usize, 17, 95] {
            for j in [0usize, 40, 95] {
                assert_eq!(p[[0, i, j, 0]], ((96 + i) * 256 + (80 + j)) as f32);
            }
        }
    }

    #[test]
    fn out_of_bounds_crop_is_rejected() {
        let clip = clip_from(Array4::zeros((1, 32, 32, 1)));
        assert!(crop_mouth(
            &clip,
            CropBox {
                top: 1,
                left: 0,
                height: 32,
                width: 32
            }
        )
        .is_err());
    }

    #[test]
    fn normalize_hits_closed_form_values() {
        let mut raw = Array4::<u8>::zeros((1, 16, 16, 1));
        raw[[0, 0, 0, 0]] = 0;
        raw[[0, 0, 1, 0]] = 255;
        let out = normalize(&clip_u8(raw));
        let Pixels::F32(p) = &out.pixels else { panic!() };
        assert_eq!(p[[0, 0, 0, 0]], -2.0); // (0 - 0.45) / 0.225, exact
        let expect = (1.0f32 - NORM_CENTER) / NORM_SCALE;
        assert!((p[[0, 0, 1, 0]] - expect).abs() < 1e-6);
        assert!((p[[0, 0, 1, 0]] - 2.444_444_4).abs() < 1e-6);
    }

    #[test]
    fn normalize_centers_float_input() {
        let mut raw = Array4::<f32>::zeros((1, 16, 16, 1));
        raw[[0, 3, 3, 0]] = 0.45;
        let out = normalize(&clip_from(raw));
        let Pixels::F32(p) = &out.pixels else { panic!() };
        assert_eq!(p[[0, 3, 3, 0]], 0.0);
    }

    proptest! {
        #[test]
        fn normalize_is_affine(a in 0.0f32..1.0, b in 0.0f32..1.0) {
            let na = (a - NORM_CENTER) / NORM_SCALE;
            let nb = (b - NORM_CENTER) / NORM_SCALE;
            prop_assert!((na - nb - (a - b) / NORM_SCALE).abs() < 1e-6);
        }

        #[test]
        fn train_augment_output_size_is_fixed(seed in 0u64..500) {
            let cfg = AugmentConfig { upsample_min: 34, upsample_max: 40, crop: 32, eval_upsample: 34 };
            let clip = clip_from(Array4::zeros((3, 28, 28, 1)));
            let mut rng = clip_rng(seed, "any", 0);
            let (out, params) = train_augment(&clip, &mut rng, &cfg);
            let (t, h, w, c) = out.dims();
            prop_assert_eq!((t, h, w, c), (3, 32, 32, 1));
            prop_assert!(params.upsample >= 34 && params.upsample <= 40);
        }
    }

    #[test]
    fn train_augment_is_deterministic_under_seed() {
        let cfg = AugmentConfig::paper();
        let frames = Array4::from_shape_fn((2, 96, 96, 3), |(t, y, x, c)| {
            ((t + y * 3 + x * 7 + c) % 97) as f32 / 97.0
        });
        let clip = clip_from(frames);
        let run = |seed: u64| {
            let mut rng = clip_rng(seed, &clip.clip_id, 0);
            train_augment(&clip, &mut rng, &cfg)
        };
        let (a, pa) = run(11);
        let (b, pb) = run(11);
        assert_eq!(pa, pb);
        let (Pixels::F32(fa), Pixels::F32(fb)) = (&a.pixels, &b.pixels) else {
            panic!()
        };
        assert_eq!(fa, fb);
    }

    #[test]
    fn augment_applies_identically_to_every_frame() {
        let cfg = AugmentConfig {
            upsample_min: 34,
            upsample_max: 40,
            crop: 32,
            eval_upsample: 34,
        };
        let frames = Array4::from_shape_fn((4, 28, 28, 1), |(t, y, x, _)| {
            ((t * 31 + y * 3 + x) % 53) as f32
        });
        let clip = clip_from(frames.clone());
        let params = AugmentParams {
            upsample: 37,
            top: 2,
            left: 3,
            flip: true,
        };
        let stacked = apply_augment(&clip, params, &cfg);
        let Pixels::F32(sp) = &stacked.pixels else { panic!() };
        // frame-by-frame with the same params equals the stacked transform
        for t in 0..4 {
            let one = frames.slice(ndarray::s![t..t + 1, .., .., ..]).to_owned();
            let single = apply_augment(&clip_from(one), params, &cfg);
            let Pixels::F32(fp) = &single.pixels else { panic!() };
            assert_eq!(
                fp.index_axis(ndarray::Axis(0), 0),
                sp.index_axis(ndarray::Axis(0), t)
            );
        }
    }

    #[test]
    fn forced_flip_reverses_columns() {
        let cfg = AugmentConfig {
            upsample_min: 34,
            upsample_max: 40,
            crop: 32,
            eval_upsample: 34,
        };
        let frames = Array4::from_shape_fn((2, 28, 28, 1), |(t, y, x, _)| {
            (t * 1000 + y * 28 + x) as f32
        });
        let clip = clip_from(frames);
        let base = AugmentParams {
            upsample: 36,
            top: 1,
            left: 2,
            flip: false,
        };
        let flipped = AugmentParams { flip: true, ..base };
        let plain = apply_augment(&clip, base, &cfg);
        let mirrored = apply_augment(&clip, flipped, &cfg);
        let (Pixels::F32(p), Pixels::F32(m)) = (&plain.pixels, &mirrored.pixels) else {
            panic!()
        };
        for t in 0..2 {
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(m[[t, y, x, 0]], p[[t, y, 31 - x, 0]]);
                }
            }
        }
    }

    #[test]
    fn eval_transform_is_deterministic_and_correctly_shaped() {
        let cfg = AugmentConfig::paper();
        let frames = Array4::from_shape_fn((3, 96, 96, 3), |(t, y, x, c)| {
            ((t + y + x + c) % 11) as f32 / 11.0
        });
        let clip = clip_from(frames);
        let a = eval_transform(&clip, &cfg);
        let b = eval_transform(&clip, &cfg);
        assert_eq!(a.dims(), (3, 112, 112, 3));
        let (Pixels::F32(fa), Pixels::F32(fb)) = (&a.pixels, &b.pixels) else {
            panic!()
        };
        assert_eq!(fa, fb);
    }

    #[test]
    fn eval_transform_at_native_size_is_a_center_slice() {
        let cfg = AugmentConfig::paper();
        // input already 122x122: upsample is an exact identity, so the
        // result must equal the direct center 112x112 window
        let frames =
            Array4::from_shape_fn((2, 122, 122, 1), |(t, y, x, _)| (t * 14884 + y * 122 + x) as f32);
        let clip = clip_from(frames.clone());
        let out = eval_transform(&clip, &cfg);
        let Pixels::F32(p) = &out.pixels else { panic!() };
        let direct = frames.slice(ndarray::s![.., 5..117, 5..117, ..]);
        assert_eq!(p, &direct.to_owned());
    }
}
