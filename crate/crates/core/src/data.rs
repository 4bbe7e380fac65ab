//! Seeded synthetic datasets, label-noise injection, splits and CSV I/O.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numfmt::f17;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("split {0} would be empty")]
    EmptySplit(&'static str),
    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: field `{field}` is not numeric: {value:?}")]
    NonNumeric {
        line: u64,
        field: String,
        value: String,
    },
    #[error("line {line}: duplicate id {id}")]
    DuplicateId { line: u64, id: u64 },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
    /// True iff the label was flipped by [`inject_label_noise`].
    pub noisy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

/// Fractions of the (train, validation, test) partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

/// JSON sidecar written next to the split CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub seed: u64,
    pub fractions: SplitFractions,
    pub flip_rate: f64,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub train_count: usize,
    pub validation_count: usize,
    pub test_count: usize,
    pub flipped_count: usize,
    pub noisy_ids: Vec<u64>,
}

/// Isotropic Gaussian clusters around standard-normal class centers.
/// Sample `k` belongs to class `k % num_classes`.
pub fn generate_blobs(
    num_classes: usize,
    per_class: usize,
    feature_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if num_classes == 0 || per_class == 0 || feature_dim == 0 {
        return Err(DataError::InvalidParameter(
            "class count, per-class count and feature dimension must be positive".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(DataError::InvalidParameter(format!("spread {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..feature_dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let n = num_classes * per_class;
    Ok((0..n)
        .map(|k| {
            let label = k % num_classes;
            let features = centers[label]
                .iter()
                .map(|&c| c + spread * unit.sample(&mut rng))
                .collect();
            Sample {
                id: k as u64,
                features,
                label,
                noisy: false,
            }
        })
        .collect())
}

/// Flips exactly `⌊flip_rate·n⌋` labels, each to a uniformly drawn other class.
pub fn inject_label_noise(
    mut samples: Vec<Sample>,
    flip_rate: f64,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(DataError::InvalidParameter(format!("flip rate {flip_rate}")));
    }
    let count = (flip_rate * samples.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(samples);
    }
    if num_classes < 2 {
        return Err(DataError::InvalidParameter(
            "label noise needs at least two classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, samples.len(), count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let s = &mut samples[i];
        let shift = rng.random_range(1..num_classes);
        s.label = (s.label + shift) % num_classes;
        s.noisy = true;
    }
    Ok(samples)
}

/// Seeded shuffle, then contiguous partition. Validation and test take
/// `⌊fraction·n⌋` samples each; train takes the rest.
pub fn split(
    samples: Vec<Sample>,
    fractions: SplitFractions,
    num_classes: usize,
    noise_rate: f64,
    seed: u64,
) -> Result<DatasetBundle> {
    let SplitFractions {
        train,
        validation,
        test,
    } = fractions;
    if [train, validation, test].iter().any(|f| !(*f > 0.0)) || ((train + validation + test) - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidParameter(format!(
            "split fractions must be positive and sum to 1, got ({train}, {validation}, {test})"
        )));
    }
    let feature_dim = samples.first().map(|s| s.features.len()).unwrap_or(0);
    let n = samples.len();
    let n_val = (validation * n as f64).floor() as usize;
    let n_test = (test * n as f64).floor() as usize;
    if n_val == 0 {
        return Err(DataError::EmptySplit("validation"));
    }
    if n_test == 0 {
        return Err(DataError::EmptySplit("test"));
    }
    if n_val + n_test >= n {
        return Err(DataError::EmptySplit("train"));
    }
    let mut shuffled = samples;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let test_part = shuffled.split_off(n - n_test);
    let val_part = shuffled.split_off(n - n_test - n_val);
    Ok(DatasetBundle {
        train: shuffled,
        validation: val_part,
        test: test_part,
        num_classes,
        feature_dim,
        noise_rate,
        seed,
    })
}

/// Generates blobs, splits them, and flips labels in the train split only.
pub fn build_blob_bundle(
    num_classes: usize,
    per_class: usize,
    feature_dim: usize,
    spread: f64,
    flip_rate: f64,
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetBundle> {
    let samples = generate_blobs(num_classes, per_class, feature_dim, spread, seed)?;
    let mut bundle = split(samples, fractions, num_classes, flip_rate, seed.wrapping_add(1))?;
    bundle.train = inject_label_noise(bundle.train, flip_rate, num_classes, seed.wrapping_add(2))?;
    Ok(bundle)
}

impl DatasetBundle {
    pub fn manifest(&self, fractions: SplitFractions) -> BundleManifest {
        let noisy_ids: Vec<u64> = self.train.iter().filter(|s| s.noisy).map(|s| s.id).collect();
        BundleManifest {
            seed: self.seed,
            fractions,
            flip_rate: self.noise_rate,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            train_count: self.train.len(),
            validation_count: self.validation.len(),
            test_count: self.test.len(),
            flipped_count: noisy_ids.len(),
            noisy_ids,
        }
    }

    /// Writes `train.csv`, `validation.csv`, `test.csv` and `manifest.json`.
    pub fn write_dir(&self, dir: &Path, fractions: SplitFractions) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("train.csv"), &self.train, self.feature_dim)?;
        write_csv(&dir.join("validation.csv"), &self.validation, self.feature_dim)?;
        write_csv(&dir.join("test.csv"), &self.test, self.feature_dim)?;
        let manifest = serde_json::to_string_pretty(&self.manifest(fractions))?;
        fs::write(dir.join("manifest.json"), manifest + "\n")?;
        Ok(())
    }

    /// Reads a directory written by [`DatasetBundle::write_dir`], restoring
    /// noise flags from the manifest.
    pub fn read_dir(dir: &Path) -> Result<(Self, BundleManifest)> {
        let manifest: BundleManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let noisy: HashSet<u64> = manifest.noisy_ids.iter().copied().collect();
        let mut train = load_csv(&dir.join("train.csv"))?;
        for s in &mut train {
            s.noisy = noisy.contains(&s.id);
        }
        let bundle = DatasetBundle {
            train,
            validation: load_csv(&dir.join("validation.csv"))?,
            test: load_csv(&dir.join("test.csv"))?,
            num_classes: manifest.num_classes,
            feature_dim: manifest.feature_dim,
            noise_rate: manifest.flip_rate,
            seed: manifest.seed,
        };
        Ok((bundle, manifest))
    }
}

/// Rows `id,f1,…,fd,label` with 17-significant-digit features, LF endings.
pub fn write_csv(path: &Path, samples: &[Sample], feature_dim: usize) -> Result<()> {
    let mut out = Vec::new();
    let header: Vec<String> = std::iter::once("id".to_string())
        .chain((1..=feature_dim).map(|i| format!("f{i}")))
        .chain(std::iter::once("label".to_string()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for s in samples {
        let mut row = vec![s.id.to_string()];
        row.extend(s.features.iter().map(|&v| f17(v)));
        row.push(s.label.to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path)?;
    read_csv(file)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Vec<Sample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 2 || cols[0] != "id" || cols[cols.len() - 1] != "label" {
        return Err(DataError::BadHeader(format!(
            "expected `id,f1,...,fd,label`, got `{}`",
            cols.join(",")
        )));
    }
    let feature_dim = cols.len() - 2;
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != cols.len() {
            return Err(DataError::RaggedRow {
                line,
                expected: cols.len(),
                found: rec.len(),
            });
        }
        let non_numeric = |idx: usize| DataError::NonNumeric {
            line,
            field: cols[idx].to_string(),
            value: rec[idx].to_string(),
        };
        let id: u64 = rec[0].trim().parse().map_err(|_| non_numeric(0))?;
        let features = (1..=feature_dim)
            .map(|i| {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| non_numeric(i))
            })
            .collect::<Result<Vec<f64>>>()?;
        let label: usize = rec[feature_dim + 1]
            .trim()
            .parse()
            .map_err(|_| non_numeric(feature_dim + 1))?;
        if !seen.insert(id) {
            return Err(DataError::DuplicateId { line, id });
        }
        samples.push(Sample {
            id,
            features,
            label,
            noisy: false,
        });
    }
    Ok(samples)
}
