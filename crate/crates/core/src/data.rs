//! Synthetic lip-motion proxy datasets and ingestion of datasets stored in
//! the word/split directory layout.
//!
//! Layout: `root/<WORD>/<split>/<WORD>_<nnnnn>.sft`, one binary tensor
//! container per clip (see [`crate::tensorio`]). Labels are assigned by
//! sorted word-directory order, so label assignment is reproducible without
//! any sidecar index. Clips whose frame count does not match the expected
//! length are skipped with a counted warning rather than padded.
//!
//! Synthetic clips give each class a distinct spatiotemporal signature: an
//! elliptical blob orbiting the frame center with class-specific angular
//! speed, phase, orbit radius and aspect ratio, plus seeded pixel noise and
//! per-clip size jitter. A linear probe on mean-frame features separates
//! classes, and so does a small model trained on the clips. Generation is a
//! pure function of the spec, so regeneration is byte-identical.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{self, Dtype, TensorData, TensorHeader};

pub const CLIP_EXTENSION: &str = "sft";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Val, Split::Test]
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?}, expected train|val|test"
            ))),
        }
    }
}

/// Frame stack of one clip, `[T, H, W, C]`.
#[derive(Debug, Clone)]
pub enum Pixels {
    /// Raw intensities in `[0, 255]`.
    U8(Array4<u8>),
    /// Float intensities; in `[0, 1]` as stored, unbounded after
    /// normalization.
    F32(Array4<f32>),
}

impl Pixels {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = match self {
            Pixels::U8(a) => a.dim(),
            Pixels::F32(a) => a.dim(),
        };
        (d.0, d.1, d.2, d.3)
    }

    /// Float view of the raw intensity scale: `u8` data converted to `[0,1]`.
    pub fn to_f32_unit(&self) -> Array4<f32> {
        match self {
            Pixels::U8(a) => a.mapv(|v| v as f32 / 255.0),
            Pixels::F32(a) => a.clone(),
        }
    }
}

/// One video sample: the unit flowing through the pipeline.
#[derive(Debug, Clone)]
pub struct Clip {
    pub pixels: Pixels,
    /// Class index in `[0, num_classes)`.
    pub label: usize,
    pub clip_id: String,
    /// Optional word boundary `(start_frame, end_frame)`, inclusive.
    pub boundary: Option<(usize, usize)>,
}

impl Clip {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.pixels.dims()
    }

    pub fn frames(&self) -> usize {
        self.dims().0
    }

    /// Checks the clip invariants against a class count.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (t, _, _, _) = self.dims();
        if self.label >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "clip {} label {} out of range {num_classes}",
                self.clip_id, self.label
            )));
        }
        if let Some((start, end)) = self.boundary {
            if start > end || end >= t {
                return Err(Error::InvalidArgument(format!(
                    "clip {} boundary ({start},{end}) invalid for {t} frames",
                    self.clip_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub num_classes: usize,
    pub clip_count: usize,
    pub class_names: Vec<String>,
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Clips per class in the train split; val and test each get a fifth
    /// (rounded up).
    pub clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(
                "synthetic spec needs at least 2 classes".into(),
            ));
        }
        if self.frames < 5 {
            return Err(Error::InvalidArgument(
                "synthetic spec needs at least 5 frames".into(),
            ));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidArgument(
                "synthetic frames must be at least 16x16".into(),
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(
                "synthetic channels must be 1 or 3".into(),
            ));
        }
        Ok(())
    }

    pub fn clips_for(&self, split: Split) -> usize {
        match split {
            Split::Train => self.clips_per_class,
            Split::Val | Split::Test => self.clips_per_class.div_ceil(5),
        }
    }

    pub fn class_name(&self, class: usize) -> String {
        format!("CLASS{class:04}")
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct GenerateStats {
    pub written: usize,
    pub unchanged: usize,
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts; stable across runs and platforms
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        state ^= state >> 31;
        state = state.wrapping_mul(0x94d0_49bb_1331_11eb);
        state ^= state >> 29;
    }
    state
}

/// Per-clip RNG derivation; also used by the training pipeline so parallel
/// data loading cannot change results.
pub fn clip_rng(global_seed: u64, clip_id: &str, stream: u64) -> ChaCha8Rng {
    let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a over the id
    for b in clip_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(mix_seed(&[global_seed, h, stream]))
}

/// Class motion signature: angular speed, phase, orbit radius fraction and
/// blob aspect. Distinct per class so clips are separable.
fn class_signature(class: usize, num_classes: usize) -> (f64, f64, f64, f64) {
    let spread = if num_classes > 1 {
        class as f64 / (num_classes - 1) as f64
    } else {
        0.0
    };
    let omega = 0.35 + 0.12 * class as f64;
    let phase = std::f64::consts::TAU * class as f64 / num_classes as f64;
    let orbit = 0.14 + 0.12 * spread;
    let aspect = 0.75 + 0.5 * spread;
    (omega, phase, orbit, aspect)
}

fn render_clip(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> Array4<u8> {
    let (t_len, h, w, c) = (spec.frames, spec.height, spec.width, spec.channels);
    let (omega, phase, orbit, aspect) = class_signature(class, spec.num_classes);
    let size_jitter = 0.9 + 0.2 * rng.gen::<f64>();
    let amp_jitter = 0.92 + 0.16 * rng.gen::<f64>();
    let min_dim = h.min(w) as f64;
    let rx = (0.16 * min_dim * size_jitter * aspect).max(1.5);
    let ry = (0.16 * min_dim * size_jitter / aspect).max(1.5);
    let ax = orbit * w as f64 * amp_jitter;
    let ay = orbit * h as f64 * amp_jitter;
    let channel_gain = [1.0, 0.8, 0.6];

    let mut out = Array4::<u8>::zeros((t_len, h, w, c));
    for t in 0..t_len {
        let angle = omega * t as f64 + phase;
        let cx = w as f64 / 2.0 + ax * angle.cos();
        let cy = h as f64 / 2.0 + ay * angle.sin();
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let body = 230.0 * (-(dx * dx + dy * dy)).exp();
                for ch in 0..c {
                    let noise = rng.gen_range(-12.0..12.0);
                    let v = 16.0 + body * channel_gain[ch] + noise;
                    out[[t, y, x, ch]] = v.clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    out
}

/// Draws a word-boundary duration approximating a normal distribution via the
/// sum of twelve uniforms.
fn draw_boundary(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let z: f64 = (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
    let dur = (10.59 + 3.2 * z).round().clamp(3.0, spec.frames as f64) as usize;
    let center = spec.frames / 2;
    let start = center.saturating_sub(dur / 2);
    let end = (start + dur - 1).min(spec.frames - 1);
    (start, end)
}

/// Writes the synthetic dataset in the word/split layout and returns the
/// train-split manifest. Existing byte-identical files are left untouched
/// and counted in `stats.unchanged`.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSpec,
    root: &Path,
) -> Result<(DatasetManifest, GenerateStats)> {
    spec.validate()?;
    let mut stats = GenerateStats::default();
    let class_names: Vec<String> = (0..spec.num_classes).map(|c| spec.class_name(c)).collect();

    for (class, name) in class_names.iter().enumerate() {
        for (split_idx, split) in Split::all().into_iter().enumerate() {
            let dir = root.join(name).join(split.dir_name());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for idx in 0..spec.clips_for(split) {
                let clip_id = format!("{name}_{:05}", idx + 1);
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                    spec.seed,
                    class as u64,
                    split_idx as u64,
                    idx as u64,
                ]));
                let frames = render_clip(spec, class, &mut rng);
                let boundary = draw_boundary(spec, &mut rng);
                let header = TensorHeader {
                    shape: vec![spec.frames, spec.height, spec.width, spec.channels],
                    dtype: Dtype::U8,
                    order: "THWC".to_string(),
                    boundary: Some(boundary),
                };
                let data = TensorData::U8(frames.into_raw_vec_and_offset().0);
                let bytes = tensorio::tensor_to_bytes(&header, &data)?;
                let path = dir.join(format!("{clip_id}.{CLIP_EXTENSION}"));
                match fs::read(&path) {
                    Ok(existing) if existing == bytes => stats.unchanged += 1,
                    _ => {
                        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                        stats.written += 1;
                    }
                }
            }
        }
    }

    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        split: Split::Train,
        num_classes: spec.num_classes,
        clip_count: spec.num_classes * spec.clips_for(Split::Train),
        class_names,
    };
    let manifest_path = root.join("manifest.json");
    let doc = serde_json::json!({
        "spec": spec,
        "class_names": manifest.class_names,
        "splits": {
            "train": spec.clips_for(Split::Train) * spec.num_classes,
            "val": spec.clips_for(Split::Val) * spec.num_classes,
            "test": spec.clips_for(Split::Test) * spec.num_classes,
        },
    });
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&doc).unwrap(),
    )
    .map_err(|e| Error::io(&manifest_path, e))?;
    Ok((manifest, stats))
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// An opened dataset split: enumerated clip files with stable ordering and
/// label assignment.
#[derive(Debug, Clone)]
pub struct LrwDataset {
    pub root: PathBuf,
    pub split: Split,
    pub class_names: Vec<String>,
    /// Expected frame count; clips that disagree are skipped at read time.
    pub expected_frames: Option<usize>,
    files: Vec<(PathBuf, usize)>,
}

impl LrwDataset {
    /// Enumerates `root/<WORD>/<split>` deterministically: word directories
    /// sorted by name define the labels, clip files sorted by name define
    /// the order.
    pub fn open(root: &Path, split: Split, expected_frames: Option<usize>) -> Result<Self> {
        let mut class_names = Vec::new();
        let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            if entry.path().is_dir() {
                class_names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        class_names.sort();
        if class_names.is_empty() {
            return Err(Error::Prerequisite(format!(
                "no classes found under {}",
                root.display()
            )));
        }
        let mut files = Vec::new();
        for (label, name) in class_names.iter().enumerate() {
            let dir = root.join(name).join(split.dir_name());
            if !dir.is_dir() {
                return Err(Error::Prerequisite(format!(
                    "missing split directory {}",
                    dir.display()
                )));
            }
            let mut clips: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.extension()
                        .map(|x| x == CLIP_EXTENSION)
                        .unwrap_or(false)
                })
                .collect();
            clips.sort();
            files.extend(clips.into_iter().map(|p| (p, label)));
        }
        Ok(LrwDataset {
            root: root.to_path_buf(),
            split,
            class_names,
            expected_frames,
            files,
        })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            split: self.split,
            num_classes: self.class_names.len(),
            clip_count: self.files.len(),
            class_names: self.class_names.clone(),
        }
    }

    /// Reads the clip at `index`. Returns `Ok(None)` when the clip is
    /// well-formed but has the wrong frame count (the skip case).
    pub fn load(&self, index: usize) -> Result<Option<Clip>> {
        let (path, label) = &self.files[index];
        let (header, data) = tensorio::read_tensor_file(path)?;
        if header.order != "THWC" {
            return Err(Error::format(
                path,
                format!("clip axis order {:?}, want THWC", header.order),
            ));
        }
        if header.shape.len() != 4 {
            return Err(Error::format(
                path,
                format!("clip rank {} != 4", header.shape.len()),
            ));
        }
        if let Some(expected) = self.expected_frames {
            if header.shape[0] != expected {
                return Ok(None);
            }
        }
        let dims = (
            header.shape[0],
            header.shape[1],
            header.shape[2],
            header.shape[3],
        );
        let pixels = match data {
            TensorData::U8(v) => Pixels::U8(
                Array4::from_shape_vec(dims, v)
                    .map_err(|e| Error::format(path, e.to_string()))?,
            ),
            TensorData::F32(v) => {
                if v.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                    return Err(Error::format(
                        path,
                        "float clip has values outside [0,1]",
                    ));
                }
                Pixels::F32(
                    Array4::from_shape_vec(dims, v)
                        .map_err(|e| Error::format(path, e.to_string()))?,
                )
            }
            TensorData::F64(_) => {
                return Err(Error::format(path, "clip dtype f64 unsupported"))
            }
        };
        let clip_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Some(Clip {
            pixels,
            label: *label,
            clip_id,
            boundary: header.boundary,
        }))
    }

    pub fn iter(&self) -> ClipIter<'_> {
        ClipIter {
            dataset: self,
            next: 0,
            skipped: 0,
        }
    }

    /// Loads every clip eagerly; returns the clips plus the skip count.
    pub fn load_all(&self) -> Result<(Vec<Clip>, usize)> {
        let mut clips = Vec::with_capacity(self.len());
        let mut skipped = 0usize;
        for i in 0..self.len() {
            match self.load(i)? {
                Some(c) => clips.push(c),
                None => skipped += 1,
            }
        }
        Ok((clips, skipped))
    }

    /// Boundary durations (frames) across the split, for window statistics.
    pub fn boundary_durations(&self) -> Result<Vec<usize>> {
        let mut durations = Vec::new();
        for i in 0..self.len() {
            if let Some(clip) = self.load(i)? {
                if let Some((s, e)) = clip.boundary {
                    durations.push(e - s + 1);
                }
            }
        }
        Ok(durations)
    }
}

/// Deterministic single-consumer clip iterator. Clips with the wrong frame
/// count are skipped and counted, read failures surface as errors.
pub struct ClipIter<'a> {
    dataset: &'a LrwDataset,
    next: usize,
    pub skipped: usize,
}

impl Iterator for ClipIter<'_> {
    type Item = Result<Clip>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.next < self.dataset.len() {
            let idx = self.next;
            self.next += 1;
            match self.dataset.load(idx) {
                Ok(Some(clip)) => return Some(Ok(clip)),
                Ok(None) => {
                    self.skipped += 1;
                    eprintln!(
                        "warning: skipping clip with unexpected frame count: {}",
                        self.dataset.files[idx].0.display()
                    );
                }
                Err(e) => return Some(Err(e)),
            }
        }
        None
    }
}

/// Mean frame over time, flattened to `[H*W*C]` in unit scale. The feature
/// the separability probe runs on.
pub fn mean_frame_features(clip: &Clip) -> Vec<f64> {
    let unit = clip.pixels.to_f32_unit();
    let mean = unit.mean_axis(Axis(0)).unwrap();
    mean.iter().map(|&v| v as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 2,
            clips_per_class: 3,
            frames: 8,
            height: 16,
            width: 16,
            channels: 1,
            seed,
        }
    }

    #[test]
    fn manifest_counts_are_classes_times_clips() {
        let dir = tempdir().unwrap();
        let (manifest, stats) = generate_synthetic_dataset(&tiny_spec(7), dir.path()).unwrap();
        assert_eq!(manifest.clip_count, 6);
        assert_eq!(manifest.num_classes, 2);
        assert_eq!(stats.written, 6 + 2 * 2); // train + val + test files
        assert_eq!(stats.unchanged, 0);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir = tempdir().unwrap();
        let (_, first) = generate_synthetic_dataset(&tiny_spec(7), dir.path()).unwrap();
        let (_, second) = generate_synthetic_dataset(&tiny_spec(7), dir.path()).unwrap();
        assert_eq!(second.written, 0);
        assert_eq!(second.unchanged, first.written);
    }

    #[test]
    fn distinct_seeds_produce_distinct_content() {
        let a = tempdir().unwrap();
        let b = tempdir().unwrap();
        generate_synthetic_dataset(&tiny_spec(1), a.path()).unwrap();
        generate_synthetic_dataset(&tiny_spec(2), b.path()).unwrap();
        let load = |root: &Path| {
            let ds = LrwDataset::open(root, Split::Train, Some(8)).unwrap();
            ds.load(0).unwrap().unwrap()
        };
        let (ca, cb) = (load(a.path()), load(b.path()));
        let (Pixels::U8(pa), Pixels::U8(pb)) = (&ca.pixels, &cb.pixels) else {
            panic!("u8 clips expected")
        };
        assert_ne!(pa, pb);
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut s = tiny_spec(0);
        s.height = 8;
        assert!(generate_synthetic_dataset(&s, Path::new("/nonexistent")).is_err());
        let mut s = tiny_spec(0);
        s.num_classes = 1;
        assert!(s.validate().is_err());
        let mut s = tiny_spec(0);
        s.frames = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn loader_yields_every_clip_in_lexicographic_order() {
        let dir = tempdir().unwrap();
        let (manifest, _) = generate_synthetic_dataset(&tiny_spec(3), dir.path()).unwrap();
        let ds = LrwDataset::open(dir.path(), Split::Train, Some(8)).unwrap();
        assert_eq!(ds.len(), manifest.clip_count);
        let clips: Vec<Clip> = ds.iter().map(|c| c.unwrap()).collect();
        assert_eq!(clips.len(), manifest.clip_count);
        let ids: Vec<&str> = clips.iter().map(|c| c.clip_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        // labels follow sorted class-directory order
        assert!(clips.iter().take(3).all(|c| c.label == 0));
        assert!(clips.iter().skip(3).all(|c| c.label == 1));
        // invariant sweep
        for clip in &clips {
            clip.validate(2).unwrap();
            assert_eq!(clip.frames(), 8);
        }
    }

    #[test]
    fn empty_root_reports_no_classes() {
        let dir = tempdir().unwrap();
        let err = LrwDataset::open(dir.path(), Split::Train, None).unwrap_err();
        assert!(err.to_string().contains("no classes found"));
    }

    #[test]
    fn single_class_fixture_labels_and_order() {
        let dir = tempdir().unwrap();
        let clip_dir = dir.path().join("HELLO").join("train");
        fs::create_dir_all(&clip_dir).unwrap();
        for name in ["HELLO_00003", "HELLO_00001", "HELLO_00002"] {
            let header = TensorHeader {
                shape: vec![5, 16, 16, 1],
                dtype: Dtype::U8,
                order: "THWC".into(),
                boundary: None,
            };
            let data = TensorData::U8(vec![0u8; 5 * 16 * 16]);
            tensorio::write_tensor_file(
                &clip_dir.join(format!("{name}.sft")),
                &header,
                &data,
            )
            .unwrap();
        }
        let ds = LrwDataset::open(dir.path(), Split::Train, Some(5)).unwrap();
        let clips: Vec<Clip> = ds.iter().map(|c| c.unwrap()).collect();
        assert_eq!(clips.len(), 3);
        assert!(clips.iter().all(|c| c.label == 0));
        assert_eq!(
            clips.iter().map(|c| c.clip_id.as_str()).collect::<Vec<_>>(),
            vec!["HELLO_00001", "HELLO_00002", "HELLO_00003"]
        );
    }

    #[test]
    fn wrong_frame_count_is_skipped_and_counted() {
        let dir = tempdir().unwrap();
        generate_synthetic_dataset(&tiny_spec(5), dir.path()).unwrap();
        // plant one clip with the wrong length
        let bad = dir
            .path()
            .join("CLASS0000")
            .join("train")
            .join("CLASS0000_99999.sft");
        let header = TensorHeader {
            shape: vec![4, 16, 16, 1],
            dtype: Dtype::U8,
            order: "THWC".into(),
            boundary: None,
        };
        tensorio::write_tensor_file(&bad, &header, &TensorData::U8(vec![0; 4 * 16 * 16])).unwrap();

        let ds = LrwDataset::open(dir.path(), Split::Train, Some(8)).unwrap();
        let mut iter = ds.iter();
        let clips: Vec<_> = iter.by_ref().map(|c| c.unwrap()).collect();
        assert_eq!(clips.len(), 6);
        assert_eq!(iter.skipped, 1);
    }

    #[test]
    fn missing_split_directory_is_an_error() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("WORD").join("train")).unwrap();
        let err = LrwDataset::open(dir.path(), Split::Val, None).unwrap_err();
        assert!(err.to_string().contains("missing split directory"));
    }

    /// The separability oracle: a logistic probe on mean-frame features must
    /// separate two synthetic classes with accuracy above 0.9.
    #[test]
    fn linear_probe_separates_two_classes() {
        let dir = tempdir().unwrap();
        let spec = SyntheticSpec {
            num_classes: 2,
            clips_per_class: 5,
            frames: 29,
            height: 28,
            width: 28,
            channels: 1,
            seed: 7,
        };
        generate_synthetic_dataset(&spec, dir.path()).unwrap();

        let mut features = Vec::new();
        let mut labels = Vec::new();
        for split in Split::all() {
            let ds = LrwDataset::open(dir.path(), split, Some(29)).unwrap();
            for clip in ds.iter() {
                let clip = clip.unwrap();
                features.push(mean_frame_features(&clip));
                labels.push(clip.label as f64);
            }
        }
        let dim = features[0].len();
        let n = features.len();
        assert_eq!(n, 14); // 10 train + 2 val + 2 test

        // logistic regression by plain gradient descent
        let mut w = vec![0.0f64; dim];
        let mut b = 0.0f64;
        for _ in 0..400 {
            let mut gw = vec![0.0f64; dim];
            let mut gb = 0.0f64;
            for (x, &y) in features.iter().zip(labels.iter()) {
                let z: f64 = x.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>() + b;
                let p = 1.0 / (1.0 + (-z).exp());
                let err = p - y;
                for (g, xi) in gw.iter_mut().zip(x.iter()) {
                    *g += err * xi;
                }
                gb += err;
            }
            for (wi, g) in w.iter_mut().zip(gw.iter()) {
                *wi -= 0.5 * g / n as f64;
            }
            b -= 0.5 * gb / n as f64;
        }
        let correct = features
            .iter()
            .zip(labels.iter())
            .filter(|(x, &y)| {
                let z: f64 = x.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>() + b;
                (z > 0.0) == (y > 0.5)
            })
            .count();
        let acc = correct as f64 / n as f64;
        assert!(acc > 0.9, "probe accuracy {acc} <= 0.9");
    }
}
