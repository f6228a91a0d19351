//! Dataset generation and loading: one 8-bit binary graymap per scene plus
//! a JSON annotation file per split, and a manifest recording the resolved
//! generation config with its hash.

use super::{render, sample_spec, scene_seed, Image, SceneRanges, SynthError};
use crate::geometry::{Ellipse, GeometryError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const MANIFEST_VERSION: u32 = 1;
const SPLIT_IDS: [(&str, u64); 2] = [("train", 0), ("test", 1)];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("malformed graymap {path}: {reason}")]
    BadImage { path: String, reason: String },
    #[error("train fraction {0} outside [0, 1]")]
    BadSplit(f64),
}

/// One loadable training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub objects: Vec<(usize, Ellipse)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    pub train_frac: f64,
    pub seed: u64,
    pub ranges: SceneRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 500,
            train_frac: 0.8,
            seed: 7,
            ranges: SceneRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train: usize,
    pub test: usize,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: DatasetConfig,
    config_hash: String,
    splits: BTreeMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectAnn {
    class: usize,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneAnn {
    image: String,
    objects: Vec<ObjectAnn>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Writes `image` as a binary 8-bit graymap (P5, maxval 255).
pub fn write_pgm(path: &Path, image: &Image) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", image.width(), image.height())?;
    let bytes: Vec<u8> = image
        .pixels()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary 8-bit graymap. Header comments (`#`) are skipped.
pub fn read_pgm(path: &Path) -> Result<Image, DatasetError> {
    let bad = |reason: &str| DatasetError::BadImage {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let raw = fs::read(path)?;
    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // then a single whitespace byte before the pixel payload.
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(bad("not a binary graymap (expected P5)"));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = tokens[3].parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // the single whitespace after maxval
    let expected = width * height;
    if raw.len() < pos + expected {
        return Err(bad("pixel payload truncated"));
    }
    let pixels = raw[pos..pos + expected].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image::from_pixels(width, height, pixels))
}

/// Generates a dataset under `dir`: `train/` and `test/` splits, each with
/// numbered graymaps plus `annotations.json`, and a `manifest.json` with the
/// resolved config and its hash. Pure function of the config.
pub fn gen_dataset(config: &DatasetConfig, dir: &Path) -> Result<DatasetSummary, DatasetError> {
    if !(0.0..=1.0).contains(&config.train_frac) {
        return Err(DatasetError::BadSplit(config.train_frac));
    }
    let n_train = (config.count as f64 * config.train_frac).round() as usize;
    let counts = [n_train, config.count - n_train];

    let mut splits = BTreeMap::new();
    for ((split_name, split_id), count) in SPLIT_IDS.iter().zip(counts) {
        let split_dir = dir.join(split_name);
        fs::create_dir_all(&split_dir)?;
        let mut anns = Vec::with_capacity(count);
        for i in 0..count {
            let seed = scene_seed(config.seed, *split_id, i as u64);
            let spec = sample_spec(seed, &config.ranges)?;
            let scene = render(&spec);
            let name = format!("img_{i:05}.pgm");
            write_pgm(&split_dir.join(&name), &scene.image)?;
            anns.push(SceneAnn {
                image: name,
                objects: scene
                    .annotations
                    .iter()
                    .map(|(c, e)| ObjectAnn {
                        class: *c,
                        cx: e.cx(),
                        cy: e.cy(),
                        a: e.a(),
                        b: e.b(),
                        theta: e.theta(),
                    })
                    .collect(),
            });
        }
        let json = serde_json::to_string_pretty(&anns)?;
        fs::write(split_dir.join("annotations.json"), json)?;
        splits.insert(split_name.to_string(), count);
    }

    let config_hash = format!("{:016x}", fnv1a64(serde_json::to_string(config)?.as_bytes()));
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: *config,
        config_hash: config_hash.clone(),
        splits,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(DatasetSummary { train: counts[0], test: counts[1], config_hash })
}

/// Loads one split directory (`<dataset>/train` or `<dataset>/test`).
pub fn load_split(split_dir: &Path) -> Result<Vec<Sample>, DatasetError> {
    let json = fs::read_to_string(split_dir.join("annotations.json"))?;
    let anns: Vec<SceneAnn> = serde_json::from_str(&json)?;
    let mut samples = Vec::with_capacity(anns.len());
    for ann in anns {
        let image = read_pgm(&split_dir.join(&ann.image))?;
        let mut objects = Vec::with_capacity(ann.objects.len());
        for o in ann.objects {
            objects.push((o.class, Ellipse::new(o.cx, o.cy, o.a, o.b, o.theta)?));
        }
        samples.push(Sample { image, objects });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;
    use std::sync::atomic::{AtomicU64, Ordering};

    static DIR_COUNTER: AtomicU64 = AtomicU64::new(0);

    fn tmpdir(tag: &str) -> PathBuf {
        let n = DIR_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!(
            "ellipsedet-{tag}-{}-{n}",
            std::process::id()
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_config() -> DatasetConfig {
        DatasetConfig { count: 5, train_frac: 0.8, seed: 7, ..DatasetConfig::default() }
    }

    #[test]
    fn pgm_round_trip_preserves_quantized_pixels() {
        let dir = tmpdir("pgm");
        let spec = sample_spec(3, &SceneRanges::default()).unwrap();
        let scene = render(&spec);
        let path = dir.join("x.pgm");
        write_pgm(&path, &scene.image).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.width(), 256);
        assert_eq!(back.height(), 192);
        for (orig, read) in scene.image.pixels().iter().zip(back.pixels()) {
            let q = (orig.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            assert!((q - read).abs() < 1e-12);
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn read_pgm_rejects_other_formats() {
        let dir = tmpdir("badpgm");
        let path = dir.join("x.pgm");
        fs::write(&path, b"P2\n2 2\n255\n0 1 2 3\n").unwrap();
        assert!(matches!(read_pgm(&path), Err(DatasetError::BadImage { .. })));
        fs::write(&path, b"P5\n4 4\n255\nabc").unwrap();
        assert!(matches!(read_pgm(&path), Err(DatasetError::BadImage { .. })));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn generated_dataset_splits_and_loads() {
        let dir = tmpdir("gen");
        let summary = gen_dataset(&small_config(), &dir).unwrap();
        assert_eq!(summary.train, 4);
        assert_eq!(summary.test, 1);
        let train = load_split(&dir.join("train")).unwrap();
        let test = load_split(&dir.join("test")).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 1);
        for s in train.iter().chain(test.iter()) {
            assert_eq!(s.objects.len(), 2);
            assert_eq!(s.objects[0].0, 0);
            assert_eq!(s.objects[1].0, 1);
            assert_eq!(s.image.width(), 256);
        }
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest.version, MANIFEST_VERSION);
        assert_eq!(manifest.config_hash, summary.config_hash);
        assert_eq!(manifest.splits["train"], 4);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let (d1, d2) = (tmpdir("det1"), tmpdir("det2"));
        gen_dataset(&small_config(), &d1).unwrap();
        gen_dataset(&small_config(), &d2).unwrap();
        for split in ["train", "test"] {
            let mut names: Vec<String> = fs::read_dir(d1.join(split))
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .collect();
            names.sort();
            assert!(!names.is_empty());
            for name in names {
                let b1 = fs::read(d1.join(split).join(&name)).unwrap();
                let b2 = fs::read(d2.join(split).join(&name)).unwrap();
                assert_eq!(b1, b2, "{split}/{name} differs between runs");
            }
        }
        // A different master seed changes the content.
        let d3 = tmpdir("det3");
        gen_dataset(&DatasetConfig { seed: 8, ..small_config() }, &d3).unwrap();
        let a = fs::read(d1.join("train/img_00000.pgm")).unwrap();
        let b = fs::read(d3.join("train/img_00000.pgm")).unwrap();
        assert_ne!(a, b);
        for d in [d1, d2, d3] {
            fs::remove_dir_all(&d).unwrap();
        }
    }

    #[test]
    fn annotations_round_trip_exactly_through_json() {
        let dir = tmpdir("annjson");
        gen_dataset(&small_config(), &dir).unwrap();
        let samples = load_split(&dir.join("train")).unwrap();
        // Regenerate the same specs directly and compare parameters.
        for (i, s) in samples.iter().enumerate() {
            let seed = scene_seed(7, 0, i as u64);
            let spec = sample_spec(seed, &SceneRanges::default()).unwrap();
            assert_eq!(s.objects[0].1, spec.thorax);
            assert_eq!(s.objects[1].1, spec.heart);
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn bad_train_fraction_is_rejected() {
        let dir = tmpdir("badfrac");
        let cfg = DatasetConfig { train_frac: 1.5, ..small_config() };
        assert!(matches!(gen_dataset(&cfg, &dir), Err(DatasetError::BadSplit(_))));
        fs::remove_dir_all(&dir).unwrap();
    }
}
