//! Dataset assembly, the on-disk format, and the sealed-label discipline for
//! unlabeled target training data.
//!
//! A dataset is four splits of generated scenes: labeled source training
//! data, unlabeled target training data, and labeled target validation and
//! test data.  On disk it is one JSON manifest plus one flat binary file per
//! split; the target-train split's labels live in a separate sealed file that
//! the public split file never contains.
//!
//! Binary layout: every split file concatenates sample records.  All values
//! are little-endian.  A labeled record holds, in order, `m: u32` (the
//! sample's point count — scenes own variable-size clouds because point
//! density is a generation parameter), `image: f64[h*w*3]` (row, column,
//! channel), `image_labels: u16[h*w]`, `points: f64[m*3]` (x, y, z per
//! point), `point_labels: u16[m]`, `proj: f64[m*2]` (u, v per point),
//! `valid: u8[m]`.  Unlabeled records omit both label arrays.  The sealed
//! file concatenates `m: u32`, `image_labels: u16[h*w]`, `point_labels:
//! u16[m]` records in split order.
//!
//! In memory, the withheld labels sit behind [`SealedLabels`], whose accessor
//! counts every read.  Training code never touches it, and the counter makes
//! that checkable: it must still be zero when a training run finishes.

use std::fs;
use std::path::Path;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    class_name, generate_scene, Domain, DomainShiftConfig, SceneDims, SceneSample,
};
use crate::rng::stream;
use crate::{Error, Result};

const FORMAT_TAG: &str = "cmlab-dataset-v1";

/// Names of the four splits in their canonical order.
pub const SPLIT_NAMES: [&str; 4] = ["source-train", "target-train", "target-val", "target-test"];

/// Everything needed to generate a dataset deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    /// Point budget per scene at density factor 1; actual clouds vary with
    /// the shift's density factor and per-point visibility.
    pub n_points: usize,
    pub classes: usize,
    /// Master seed for scene layout, rendering and sampling streams.
    pub seed: u64,
    /// Shift preset applied to source scenes (usually "none").
    pub source_shift: String,
    /// Shift preset applied to every target scene.
    pub target_shift: String,
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub target_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 48,
            width: 64,
            n_points: 2048,
            classes: 6,
            seed: 17,
            source_shift: "none".to_string(),
            target_shift: "day-night".to_string(),
            source_train: 400,
            target_train: 400,
            target_val: 100,
            target_test: 100,
        }
    }
}

impl DataConfig {
    pub fn dims(&self) -> SceneDims {
        SceneDims {
            height: self.height,
            width: self.width,
            n_points: self.n_points,
            classes: self.classes,
        }
    }

    /// Resolved shift parameters; source and target shifts draw from
    /// distinct noise streams.
    pub fn shifts(&self) -> Result<(DomainShiftConfig, DomainShiftConfig)> {
        Ok((
            DomainShiftConfig::preset(&self.source_shift, 0)?,
            DomainShiftConfig::preset(&self.target_shift, 1)?,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        self.shifts()?;
        for (what, count) in [
            ("source_train", self.source_train),
            ("target_train", self.target_train),
            ("target_val", self.target_val),
            ("target_test", self.target_test),
        ] {
            if count == 0 {
                return Err(Error::Config(format!("{what} split must hold at least 1 scene")));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(class_name).collect()
    }
}

/// Withheld target-train labels.  Every access increments the read counter;
/// a clean training run leaves it at zero.
pub struct SealedLabels {
    image_labels: Vec<Vec<u16>>,
    point_labels: Vec<Vec<u16>>,
    reads: AtomicU64,
}

impl SealedLabels {
    fn new(image_labels: Vec<Vec<u16>>, point_labels: Vec<Vec<u16>>) -> Self {
        SealedLabels { image_labels, point_labels, reads: AtomicU64::new(0) }
    }

    pub fn len(&self) -> usize {
        self.point_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_labels.is_empty()
    }

    /// True point labels of target-train sample `idx`.  Counted.
    pub fn point_labels(&self, idx: usize) -> &[u16] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.point_labels[idx]
    }

    /// True image labels of target-train sample `idx`.  Counted.
    pub fn image_labels(&self, idx: usize) -> &[u16] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.image_labels[idx]
    }

    /// Number of label reads so far.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }
}

/// A complete dataset in memory.  `target_train` samples carry empty label
/// arrays; their labels are only reachable through [`Dataset::sealed`].
pub struct Dataset {
    pub config: DataConfig,
    pub class_names: Vec<String>,
    pub source_train: Vec<SceneSample>,
    pub target_train: Vec<SceneSample>,
    pub target_val: Vec<SceneSample>,
    pub target_test: Vec<SceneSample>,
    pub sealed: SealedLabels,
}

impl Dataset {
    /// Generates all four splits from the config.  Deterministic: each scene
    /// draws from streams named by split and index.
    pub fn generate(cfg: &DataConfig) -> Result<Dataset> {
        cfg.validate()?;
        let (source_shift, target_shift) = cfg.shifts()?;
        let dims = cfg.dims();
        let gen_split = |split: &str, count: usize| -> Result<Vec<SceneSample>> {
            let (shift, domain) = if split == "source-train" {
                (&source_shift, Domain::Source)
            } else {
                (&target_shift, Domain::Target)
            };
            (0..count)
                .map(|i| {
                    let seed = stream(cfg.seed, &format!("scene-seed/{split}/{i}")).random::<u64>();
                    generate_scene(seed, &dims, shift, domain)
                })
                .collect()
        };
        let source_train = gen_split("source-train", cfg.source_train)?;
        let mut target_train = gen_split("target-train", cfg.target_train)?;
        let target_val = gen_split("target-val", cfg.target_val)?;
        let target_test = gen_split("target-test", cfg.target_test)?;

        // Withhold the target-train labels behind the sealed accessor.
        let mut image_labels = Vec::with_capacity(target_train.len());
        let mut point_labels = Vec::with_capacity(target_train.len());
        for s in &mut target_train {
            image_labels.push(std::mem::take(&mut s.image_labels));
            point_labels.push(std::mem::take(&mut s.point_labels));
        }

        Ok(Dataset {
            config: cfg.clone(),
            class_names: cfg.class_names(),
            source_train,
            target_train,
            target_val,
            target_test,
            sealed: SealedLabels::new(image_labels, point_labels),
        })
    }

    pub fn split(&self, name: &str) -> &[SceneSample] {
        match name {
            "source-train" => &self.source_train,
            "target-train" => &self.target_train,
            "target-val" => &self.target_val,
            "target-test" => &self.target_test,
            other => panic!("unknown split '{other}'"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestSplit {
    name: String,
    count: usize,
    file: String,
    labeled: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    sealed_labels_file: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    height: usize,
    width: usize,
    n_points: usize,
    classes: usize,
    class_names: Vec<String>,
    seed: u64,
    byte_order: String,
    record_arrays: Vec<String>,
    source_shift: DomainShiftConfig,
    target_shift: DomainShiftConfig,
    splits: Vec<ManifestSplit>,
}

fn push_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_u16s(buf: &mut Vec<u8>, vals: &[u16]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl Cursor<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Dataset(format!(
                "{} is truncated: wanted {} bytes at offset {}, file holds {}",
                self.path,
                len,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u16s(&mut self, count: usize) -> Result<Vec<u16>> {
        let raw = self.take(count * 2)?;
        Ok(raw.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u8s(&mut self, count: usize) -> Result<Vec<u8>> {
        Ok(self.take(count)?.to_vec())
    }

    fn u32(&mut self) -> Result<usize> {
        let raw = self.take(4)?;
        Ok(u32::from_le_bytes(raw.try_into().unwrap()) as usize)
    }

    fn finished(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Dataset(format!(
                "{} holds {} trailing bytes past the last record",
                self.path,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn encode_sample(s: &SceneSample, labeled: bool) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&u32::try_from(s.n_points()).expect("point count fits u32").to_le_bytes());
    push_f64s(&mut buf, &s.image);
    if labeled {
        push_u16s(&mut buf, &s.image_labels);
    }
    push_f64s(&mut buf, &s.points);
    if labeled {
        push_u16s(&mut buf, &s.point_labels);
    }
    push_f64s(&mut buf, &s.proj);
    buf.extend(s.valid.iter().map(|&v| v as u8));
    buf
}

/// Generates the dataset and writes it under `dir`: `manifest.json`, one
/// `<split>.bin` per split, and `target-train.labels.bin` holding the sealed
/// labels.  Byte-identical on every invocation with the same config.
pub fn write_dataset(cfg: &DataConfig, dir: &Path) -> Result<()> {
    let ds = Dataset::generate(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (source_shift, target_shift) = cfg.shifts()?;

    let mut splits = Vec::new();
    for name in SPLIT_NAMES {
        let labeled = name != "target-train";
        let samples = ds.split(name);
        let mut buf = Vec::new();
        for s in samples {
            buf.extend(encode_sample(s, labeled));
        }
        let file = format!("{name}.bin");
        let path = dir.join(&file);
        fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
        splits.push(ManifestSplit {
            name: name.to_string(),
            count: samples.len(),
            file,
            labeled,
            sealed_labels_file: (!labeled).then(|| format!("{name}.labels.bin")),
        });
    }

    // Sealed labels, written directly from the generator's private copy.
    let mut buf = Vec::new();
    for i in 0..ds.target_train.len() {
        let m = ds.sealed.point_labels[i].len() as u32;
        buf.extend_from_slice(&m.to_le_bytes());
        push_u16s(&mut buf, &ds.sealed.image_labels[i]);
        push_u16s(&mut buf, &ds.sealed.point_labels[i]);
    }
    let sealed_path = dir.join("target-train.labels.bin");
    fs::write(&sealed_path, &buf).map_err(|e| Error::io(&sealed_path, e))?;

    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        height: cfg.height,
        width: cfg.width,
        n_points: cfg.n_points,
        classes: cfg.classes,
        class_names: cfg.class_names(),
        seed: cfg.seed,
        byte_order: "little-endian".to_string(),
        record_arrays: vec![
            "m: u32 (point count of this sample)".to_string(),
            "image: f64[h*w*3] row-major (row, column, channel)".to_string(),
            "image_labels: u16[h*w] (labeled splits only)".to_string(),
            "points: f64[m*3] (x, y, z per point)".to_string(),
            "point_labels: u16[m] (labeled splits only)".to_string(),
            "proj: f64[m*2] (u, v per point)".to_string(),
            "valid: u8[m]".to_string(),
        ],
        source_shift,
        target_shift,
        splits,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .expect("manifest serialization cannot fail") + "\n";
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Loads a dataset written by [`write_dataset`].  Target-train labels load
/// into the sealed store, never into the public samples.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let raw = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&raw)
        .map_err(|e| Error::Dataset(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Dataset(format!(
            "{}: format '{}' is not supported (expected '{FORMAT_TAG}')",
            mpath.display(),
            manifest.format
        )));
    }
    let (h, w, n) = (manifest.height, manifest.width, manifest.n_points);
    let mut by_name: std::collections::HashMap<&str, &ManifestSplit> = Default::default();
    for s in &manifest.splits {
        by_name.insert(s.name.as_str(), s);
    }
    for name in SPLIT_NAMES {
        if !by_name.contains_key(name) {
            return Err(Error::Dataset(format!("manifest lacks the '{name}' split")));
        }
    }

    let source_preset = preset_name(&manifest.source_shift);
    let target_preset = preset_name(&manifest.target_shift);
    let mut config = DataConfig {
        height: h,
        width: w,
        n_points: n,
        classes: manifest.classes,
        seed: manifest.seed,
        source_shift: source_preset,
        target_shift: target_preset,
        ..DataConfig::default()
    };

    let mut loaded: Vec<Vec<SceneSample>> = Vec::new();
    for name in SPLIT_NAMES {
        let split = by_name[name];
        let path = dir.join(&split.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0, path: path.display().to_string() };
        let domain = if name == "source-train" { Domain::Source } else { Domain::Target };
        let mut samples = Vec::with_capacity(split.count);
        for _ in 0..split.count {
            let m = cur.u32()?;
            let image = cur.f64s(h * w * 3)?;
            let image_labels = if split.labeled { cur.u16s(h * w)? } else { Vec::new() };
            let points = cur.f64s(m * 3)?;
            let point_labels = if split.labeled { cur.u16s(m)? } else { Vec::new() };
            let proj = cur.f64s(m * 2)?;
            let valid = cur.u8s(m)?.into_iter().map(|v| v != 0).collect();
            samples.push(SceneSample {
                height: h,
                width: w,
                classes: manifest.classes,
                domain,
                image,
                image_labels,
                points,
                point_labels,
                proj,
                valid,
            });
        }
        cur.finished()?;
        match name {
            "source-train" => config.source_train = samples.len(),
            "target-train" => config.target_train = samples.len(),
            "target-val" => config.target_val = samples.len(),
            _ => config.target_test = samples.len(),
        }
        loaded.push(samples);
    }
    let mut it = loaded.into_iter();
    let (source_train, target_train) = (it.next().unwrap(), it.next().unwrap());
    let (target_val, target_test) = (it.next().unwrap(), it.next().unwrap());

    let sealed_file = by_name["target-train"]
        .sealed_labels_file
        .as_ref()
        .ok_or_else(|| Error::Dataset("manifest lacks the sealed label file".to_string()))?;
    let spath = dir.join(sealed_file);
    let bytes = fs::read(&spath).map_err(|e| Error::io(&spath, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path: spath.display().to_string() };
    let mut image_labels = Vec::with_capacity(target_train.len());
    let mut point_labels = Vec::with_capacity(target_train.len());
    for i in 0..target_train.len() {
        let m = cur.u32()?;
        if m != target_train[i].n_points() {
            return Err(Error::Dataset(format!(
                "sealed labels for sample {i} cover {m} points, split file holds {}",
                target_train[i].n_points()
            )));
        }
        image_labels.push(cur.u16s(h * w)?);
        point_labels.push(cur.u16s(m)?);
    }
    cur.finished()?;

    Ok(Dataset {
        config,
        class_names: manifest.class_names,
        source_train,
        target_train,
        target_val,
        target_test,
        sealed: SealedLabels::new(image_labels, point_labels),
    })
}

/// Best-effort inverse of [`DomainShiftConfig::preset`] for round-tripping
/// the config through a manifest.
fn preset_name(shift: &DomainShiftConfig) -> String {
    for name in ["none", "day-night", "dataset"] {
        if let Ok(p) = DomainShiftConfig::preset(name, shift.seed) {
            if p == *shift {
                return name.to_string();
            }
        }
    }
    "none".to_string()
}

/// Valid-point views used throughout training: the indices of a sample's
/// valid points, their stored projections as (u, v) pairs, and the nearest
/// pixel of each projection as (px, py).
pub struct ValidPoints {
    pub indices: Rc<[u32]>,
    pub proj: Vec<(f64, f64)>,
    pub pixels: Vec<(usize, usize)>,
}

impl ValidPoints {
    pub fn of(sample: &SceneSample) -> ValidPoints {
        let mut indices = Vec::new();
        let mut proj = Vec::new();
        let mut pixels = Vec::new();
        for (i, &ok) in sample.valid.iter().enumerate() {
            if ok {
                let (u, v) = (sample.proj[i * 2], sample.proj[i * 2 + 1]);
                indices.push(i as u32);
                proj.push((u, v));
                pixels.push((
                    crate::geometry::nearest_pixel(u, sample.width),
                    crate::geometry::nearest_pixel(v, sample.height),
                ));
            }
        }
        ValidPoints { indices: indices.into(), proj, pixels }
    }

    pub fn len(&self) -> usize {
        self.proj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proj.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_cfg() -> DataConfig {
        DataConfig {
            height: 12,
            width: 16,
            n_points: 64,
            classes: 4,
            seed: 5,
            source_train: 3,
            target_train: 3,
            target_val: 2,
            target_test: 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn roundtrip_preserves_every_sample() {
        let cfg = tiny_cfg();
        let dir = tempdir().unwrap();
        write_dataset(&cfg, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let generated = Dataset::generate(&cfg).unwrap();

        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.class_names, cfg.class_names());
        assert_eq!(loaded.source_train, generated.source_train);
        assert_eq!(loaded.target_train, generated.target_train);
        assert_eq!(loaded.target_val, generated.target_val);
        assert_eq!(loaded.target_test, generated.target_test);
        for i in 0..cfg.target_train {
            assert_eq!(loaded.sealed.point_labels(i), generated.sealed.point_labels(i));
            assert_eq!(loaded.sealed.image_labels(i), generated.sealed.image_labels(i));
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = tiny_cfg();
        let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
        write_dataset(&cfg, a.path()).unwrap();
        write_dataset(&cfg, b.path()).unwrap();
        for file in [
            "manifest.json",
            "source-train.bin",
            "target-train.bin",
            "target-val.bin",
            "target-test.bin",
            "target-train.labels.bin",
        ] {
            let fa = fs::read(a.path().join(file)).unwrap();
            let fb = fs::read(b.path().join(file)).unwrap();
            assert_eq!(fa, fb, "{file} differs between two generations");
        }
    }

    #[test]
    fn target_train_public_data_has_no_labels() {
        let cfg = tiny_cfg();
        let dir = tempdir().unwrap();
        write_dataset(&cfg, dir.path()).unwrap();

        // On disk: the public record is exactly the count prefix + image +
        // points + proj + valid — no room for a label array.
        let bytes = fs::read(dir.path().join("target-train.bin")).unwrap();
        let (h, w) = (cfg.height, cfg.width);
        let ds = load_dataset(dir.path()).unwrap();
        let expected: usize = ds
            .target_train
            .iter()
            .map(|s| 4 + h * w * 3 * 8 + s.n_points() * (3 * 8 + 2 * 8 + 1))
            .sum();
        assert_eq!(bytes.len(), expected);

        // In memory: the public samples carry empty label arrays.
        for s in &ds.target_train {
            assert!(s.image_labels.is_empty() && s.point_labels.is_empty());
            assert!(s.n_points() >= 1);
            assert_eq!(s.domain, Domain::Target);
        }
        for s in &ds.source_train {
            assert_eq!(s.image_labels.len(), h * w);
            assert_eq!(s.domain, Domain::Source);
        }
    }

    #[test]
    fn sealed_accessor_counts_every_read() {
        let ds = Dataset::generate(&tiny_cfg()).unwrap();
        assert_eq!(ds.sealed.reads(), 0);
        let labels = ds.sealed.point_labels(0);
        assert_eq!(labels.len(), ds.target_train[0].n_points());
        assert!(labels.iter().all(|&c| (c as usize) < 4));
        assert_eq!(ds.sealed.reads(), 1);
        ds.sealed.image_labels(1);
        ds.sealed.point_labels(2);
        assert_eq!(ds.sealed.reads(), 3);
    }

    #[test]
    fn scenes_differ_across_indices_and_splits() {
        let ds = Dataset::generate(&tiny_cfg()).unwrap();
        assert_ne!(ds.source_train[0].points, ds.source_train[1].points);
        assert_ne!(ds.source_train[0].points, ds.target_train[0].points);
        // The day-night shift is photometric only, so target images are
        // darker on average than source images.
        let mean = |s: &SceneSample| s.image.iter().sum::<f64>() / s.image.len() as f64;
        let src: f64 =
            ds.source_train.iter().map(|s| mean(s)).sum::<f64>() / ds.source_train.len() as f64;
        let trg: f64 =
            ds.target_train.iter().map(|s| mean(s)).sum::<f64>() / ds.target_train.len() as f64;
        assert!(trg < src, "target mean {trg} should be darker than source {src}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_cfg();
        cfg.target_val = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.target_shift = "noon".to_string();
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.classes = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn valid_point_views_match_the_stored_flags() {
        let ds = Dataset::generate(&tiny_cfg()).unwrap();
        let s = &ds.source_train[0];
        let vp = ValidPoints::of(s);
        assert_eq!(vp.len(), s.valid.iter().filter(|&&v| v).count());
        for (k, &idx) in vp.indices.iter().enumerate() {
            assert!(s.valid[idx as usize]);
            assert_eq!(vp.proj[k].0, s.proj[idx as usize * 2]);
            let (px, py) = vp.pixels[k];
            assert!(px < s.width && py < s.height);
        }
    }
}
