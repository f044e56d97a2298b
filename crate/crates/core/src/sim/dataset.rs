//! Seeded dataset generation and the manifest + frame-blob file format.
//!
//! Files: `<name>.manifest.json` (UTF-8 JSON) and `<name>.frames.bin`. The
//! blob holds, for every sequence in split order (train, val, test), its
//! `frames_u` followed by its `frames_v_true`; each frame is channel-major,
//! row-major, 32-bit IEEE-754 little-endian. Frames are rounded to `f32`
//! when generated so a save/load cycle is lossless.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::source::SourceSpec;
use super::{simulate_sequence, Sequence, SimOptions};
use crate::error::{config_err, Error, Result, Shape};
use crate::field::{BoundaryRule, Field};
use crate::pde::{PdeModel, SystemKind};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub system: SystemKind,
    pub grid: GridSpec,
    /// Frames per sequence, `T + 1`.
    pub frames_per_seq: usize,
    pub counts: Counts,
    pub seed: u64,
    /// True physical scalar in lattice units.
    pub theta: f64,
    pub source: SourceSpec,
    #[serde(default)]
    pub boundary: Option<BoundaryRule>,
}

impl DatasetConfig {
    pub fn default_theta(system: SystemKind) -> f64 {
        match system {
            SystemKind::Heat => 0.1,
            SystemKind::Wave => 0.25,
            SystemKind::Burgers => 0.1,
        }
    }

    pub fn default_source(system: SystemKind) -> SourceSpec {
        match system {
            SystemKind::Heat => SourceSpec::default_blocks(),
            SystemKind::Wave => SourceSpec::default_oscillators(),
            SystemKind::Burgers => SourceSpec::default_pressure(),
        }
    }

    /// 16x16 grid, 60 transitions, 12/4/4 sequences.
    pub fn desk(system: SystemKind, seed: u64) -> Self {
        Self {
            name: format!("{}_desk", system.name()),
            system,
            grid: GridSpec { x: 16, y: 16 },
            frames_per_seq: 61,
            counts: Counts { train: 12, val: 4, test: 4 },
            seed,
            theta: Self::default_theta(system),
            source: Self::default_source(system),
            boundary: None,
        }
    }

    /// 64x64 grid, 200 frames; 100 (heat) or 300 (wave, Burgers) training
    /// sequences of which 20% validate, and 50 test sequences.
    pub fn paper_scale(system: SystemKind, seed: u64) -> Self {
        let pool = if system == SystemKind::Heat { 100 } else { 300 };
        let val = pool / 5;
        let mut source = Self::default_source(system);
        if let SourceSpec::OrbitingPressure { spread_min, spread_max, radius_min, radius_max, .. } = &mut source {
            *spread_min *= 4.0;
            *spread_max *= 4.0;
            *radius_min *= 4.0;
            *radius_max *= 4.0;
        }
        if let SourceSpec::CoupledOscillators { period, spread, margin, .. } = &mut source {
            *period = 50.0;
            *spread *= 2.0;
            *margin *= 4;
        }
        Self {
            name: format!("{}_paper", system.name()),
            system,
            grid: GridSpec { x: 64, y: 64 },
            frames_per_seq: 200,
            counts: Counts { train: pool - val, val, test: 50 },
            seed,
            theta: Self::default_theta(system),
            source,
            boundary: None,
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.system.channels(), self.grid.y, self.grid.x)
    }

    pub fn model(&self) -> PdeModel {
        PdeModel::with_boundary(self.system, self.theta, self.boundary.unwrap_or(self.system.default_boundary()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.x < 3 || self.grid.y < 3 {
            return Err(config_err("grid must be at least 3x3"));
        }
        if self.frames_per_seq < 2 {
            return Err(config_err("frames_per_seq must be at least 2"));
        }
        if self.counts.train == 0 {
            return Err(config_err("at least one training sequence is required"));
        }
        let limit = self.system.stability_limit();
        if !(0.0..=limit).contains(&self.theta) {
            return Err(config_err(format!("theta={} outside [0, {limit}]", self.theta)));
        }
        let expected_channels = match self.source {
            SourceSpec::OrbitingPressure { .. } => 2,
            SourceSpec::None => self.system.channels(),
            _ => 1,
        };
        if expected_channels != self.system.channels() {
            return Err(config_err(format!(
                "source `{}` does not fit the {} system",
                self.source.kind_name(),
                self.system.name()
            )));
        }
        Ok(())
    }

    /// Seed of the `index`-th sequence's source process.
    pub fn sequence_seed(&self, index: usize) -> u64 {
        // splitmix64 of (seed, index)
        let mut z = self.seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub x: usize,
    pub y: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub system: SystemKind,
    pub grid: GridManifest,
    pub frames_per_seq: usize,
    pub counts: Counts,
    pub seed: u64,
    pub norm: NormStats,
    pub source_kind: String,
    pub byte_order: String,
    pub theta: f64,
    pub boundary: BoundaryRule,
    pub source: SourceSpec,
    #[serde(default)]
    pub noise_relative_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub manifest: Manifest,
    pub train: Vec<Sequence>,
    pub val: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

fn round_f32(f: &Field) -> Field {
    f.map(|v| v as f32 as f64)
}

fn train_stats(train: &[Sequence]) -> NormStats {
    let mut count = 0usize;
    let mut sum = 0.0;
    for s in train {
        for f in &s.frames_u {
            sum += f.sum();
            count += f.as_slice().len();
        }
    }
    let mean = sum / count as f64;
    let mut var = 0.0;
    for s in train {
        for f in &s.frames_u {
            var += f.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        }
    }
    NormStats { mean, std: (var / count as f64).sqrt() }
}

/// Generates every split of `config`; identical seeds give identical data.
pub fn build_dataset(config: &DatasetConfig) -> Result<SequenceDataset> {
    config.validate()?;
    let model = config.model();
    let shape = config.shape();
    let steps = config.frames_per_seq - 1;
    let sequences: Vec<Sequence> = (0..config.counts.total())
        .into_par_iter()
        .map(|i| {
            let seq = simulate_sequence(&model, &config.source, config.sequence_seed(i), shape, steps, &SimOptions::default())?;
            Ok(Sequence {
                frames_u: seq.frames_u.iter().map(round_f32).collect(),
                frames_v_true: seq.frames_v_true.iter().map(round_f32).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let mut iter = sequences.into_iter();
    let train: Vec<_> = iter.by_ref().take(config.counts.train).collect();
    let val: Vec<_> = iter.by_ref().take(config.counts.val).collect();
    let test: Vec<_> = iter.collect();
    let norm = train_stats(&train);
    if !(norm.std > 0.0) {
        return Err(config_err("training frames have zero variance; nothing to normalize by"));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: config.name.clone(),
        system: config.system,
        grid: GridManifest { x: config.grid.x, y: config.grid.y, channels: config.system.channels() },
        frames_per_seq: config.frames_per_seq,
        counts: config.counts,
        seed: config.seed,
        norm,
        source_kind: config.source.kind_name().to_string(),
        byte_order: "little".into(),
        theta: config.theta,
        boundary: model.boundary(),
        source: config.source.clone(),
        noise_relative_std: 0.0,
    };
    Ok(SequenceDataset { manifest, train, val, test })
}

/// Adds i.i.d. Gaussian noise with standard deviation
/// `relative_std * norm.std` to every observed frame. Hidden source maps
/// are left untouched.
pub fn add_observation_noise(ds: &SequenceDataset, relative_std: f64, seed: u64) -> Result<SequenceDataset> {
    if !(relative_std >= 0.0) {
        return Err(config_err(format!("relative_std must be non-negative, got {relative_std}")));
    }
    if relative_std == 0.0 {
        return Ok(ds.clone());
    }
    let normal = Normal::new(0.0, relative_std * ds.manifest.norm.std)
        .map_err(|e| config_err(format!("noise distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    for seq in out.train.iter_mut().chain(out.val.iter_mut()).chain(out.test.iter_mut()) {
        for f in &mut seq.frames_u {
            for v in f.as_mut_slice() {
                *v = (*v + normal.sample(&mut rng)) as f32 as f64;
            }
        }
    }
    out.manifest.noise_relative_std = relative_std;
    Ok(out)
}

impl SequenceDataset {
    pub fn shape(&self) -> Shape {
        Shape::new(self.manifest.grid.channels, self.manifest.grid.y, self.manifest.grid.x)
    }

    pub fn split(&self, split: Split) -> &[Sequence] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Factor the raw fields are divided by before they reach a model.
    ///
    /// Fields are scaled but not centred: a shifted field would no longer
    /// satisfy the zero Dirichlet edge, and the source bookkeeping relies on
    /// the update staying homogeneous.
    pub fn norm_scale(&self) -> f64 {
        self.manifest.norm.std
    }

    pub fn normalized(&self, split: Split) -> Vec<Sequence> {
        let s = 1.0 / self.norm_scale();
        self.split(split).iter().map(|q| q.scaled(s)).collect()
    }

    pub fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{name}.manifest.json")), dir.join(format!("{name}.frames.bin")))
    }

    /// Writes the manifest and the frame blob into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let (mpath, bpath) = Self::paths(dir, &self.manifest.name);
        fs::write(&mpath, serde_json::to_string_pretty(&self.manifest)?)?;
        let mut w = BufWriter::new(fs::File::create(&bpath)?);
        for seq in self.train.iter().chain(&self.val).chain(&self.test) {
            for f in seq.frames_u.iter().chain(&seq.frames_v_true) {
                for v in f.as_slice() {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok((mpath, bpath))
    }

    /// Loads from a manifest path; the blob is expected next to it.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset format_version {}", manifest.format_version)));
        }
        if manifest.byte_order != "little" {
            return Err(Error::Format(format!("unsupported byte order `{}`", manifest.byte_order)));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let (_, bpath) = Self::paths(dir, &manifest.name);
        let mut bytes = Vec::new();
        fs::File::open(&bpath)?.read_to_end(&mut bytes)?;
        let shape = Shape::new(manifest.grid.channels, manifest.grid.y, manifest.grid.x);
        let frames = manifest.frames_per_seq;
        let expected = manifest.counts.total() * 2 * frames * shape.len() * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!("frame blob has {} bytes, manifest implies {expected}", bytes.len())));
        }
        let mut values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        let mut read_frame = || Field::from_vec(shape, values.by_ref().take(shape.len()).collect());
        let mut sequences = Vec::with_capacity(manifest.counts.total());
        for _ in 0..manifest.counts.total() {
            let frames_u = (0..frames).map(|_| read_frame()).collect::<Result<Vec<_>>>()?;
            let frames_v_true = (0..frames).map(|_| read_frame()).collect::<Result<Vec<_>>>()?;
            sequences.push(Sequence { frames_u, frames_v_true });
        }
        let mut iter = sequences.into_iter();
        let train = iter.by_ref().take(manifest.counts.train).collect();
        let val = iter.by_ref().take(manifest.counts.val).collect();
        let test = iter.collect();
        Ok(Self { manifest, train, val, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(system: SystemKind) -> DatasetConfig {
        let mut c = DatasetConfig::desk(system, 42);
        c.frames_per_seq = 21;
        c.counts = Counts { train: 3, val: 1, test: 1 };
        c
    }

    #[test]
    fn paper_scale_sizes() {
        let heat = DatasetConfig::paper_scale(SystemKind::Heat, 0);
        assert_eq!((heat.counts.train + heat.counts.val, heat.counts.val, heat.counts.test), (100, 20, 50));
        assert_eq!((heat.grid.x, heat.grid.y, heat.frames_per_seq), (64, 64, 200));
        for sys in [SystemKind::Wave, SystemKind::Burgers] {
            let c = DatasetConfig::paper_scale(sys, 0);
            assert_eq!(c.counts.train + c.counts.val, 300);
            assert_eq!(c.counts.test, 50);
            c.validate().unwrap();
        }
    }

    #[test]
    fn same_seed_same_data_and_norm_from_train_only() {
        let c = tiny(SystemKind::Heat);
        let a = build_dataset(&c).unwrap();
        let b = build_dataset(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(train_stats(&a.train), a.manifest.norm);
        let mut other = c.clone();
        other.seed = 43;
        assert_ne!(build_dataset(&other).unwrap().train, a.train);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for sys in [SystemKind::Heat, SystemKind::Burgers] {
            let ds = build_dataset(&tiny(sys)).unwrap();
            let (m, _) = ds.save(dir.path()).unwrap();
            let back = SequenceDataset::load(&m).unwrap();
            assert_eq!(back, ds);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&tiny(SystemKind::Heat)).unwrap();
        let (m, b) = ds.save(dir.path()).unwrap();
        let bytes = std::fs::read(&b).unwrap();
        std::fs::write(&b, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(SequenceDataset::load(&m), Err(Error::Format(_))));
    }

    #[test]
    fn noise_has_requested_std_and_spares_sources() {
        let mut c = tiny(SystemKind::Heat);
        c.counts = Counts { train: 6, val: 2, test: 2 };
        let ds = build_dataset(&c).unwrap();
        assert_eq!(add_observation_noise(&ds, 0.0, 1).unwrap(), ds);
        let noisy = add_observation_noise(&ds, 0.3, 1).unwrap();
        let mut n = 0usize;
        let (mut s1, mut s2) = (0.0, 0.0);
        for (a, b) in noisy.train.iter().zip(&ds.train) {
            assert_eq!(a.frames_v_true, b.frames_v_true);
            for (fa, fb) in a.frames_u.iter().zip(&b.frames_u) {
                for (x, y) in fa.as_slice().iter().zip(fb.as_slice()) {
                    let d = x - y;
                    s1 += d;
                    s2 += d * d;
                    n += 1;
                }
            }
        }
        let mean = s1 / n as f64;
        let std = (s2 / n as f64 - mean * mean).sqrt();
        let target = 0.3 * ds.manifest.norm.std;
        assert!((std - target).abs() < 0.02 * target, "std {std} target {target}");
    }

    #[test]
    fn mismatched_source_is_a_config_error() {
        let mut c = tiny(SystemKind::Heat);
        c.source = SourceSpec::default_pressure();
        assert!(matches!(build_dataset(&c), Err(Error::Config(_))));
    }
}
