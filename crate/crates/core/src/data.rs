//! Synthetic non-i.i.d. regression data, libsvm loading, and client partitioning.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::model::{ClientShard, ModelKind};
use crate::rng::{self, Stream};

/// Degrees of freedom of the heavy-tailed block.
pub const STUDENT_T_DOF: f64 = 5.0;
/// Half-width of the uniform block.
pub const UNIFORM_HALF_WIDTH: f64 = 5.0;

/// How labels of the synthetic regression data are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// `(a, b)` drawn jointly, entry by entry, from the block's distribution.
    #[default]
    Joint,
    /// `b = <a, w*> + e`, with `w*` standard normal and `e` from the block's
    /// distribution. Not part of the reference recipe; offered for experiments.
    Planted,
}

/// Parameters of the synthetic regression generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub m: usize,
    pub n: usize,
    pub d_min: usize,
    pub d_max: usize,
    pub seed: u64,
    #[serde(default)]
    pub label_mode: LabelMode,
}

impl GenSpec {
    /// Shard sizes in `[50, 150]`.
    pub fn new(m: usize, n: usize, seed: u64) -> Self {
        Self {
            m,
            n,
            d_min: 50,
            d_max: 150,
            seed,
            label_mode: LabelMode::Joint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(FedError::Config("m and n must be at least 1".into()));
        }
        if self.d_min == 0 || self.d_min > self.d_max {
            return Err(FedError::Config(format!(
                "shard sizes need 1 <= d_min <= d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }
}

/// Which distribution a pooled sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    Normal,
    StudentT,
    Uniform,
}

/// The `m` client shards of one problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    shards: Vec<ClientShard>,
    n: usize,
    kind: ModelKind,
}

impl FederatedDataset {
    pub fn new(shards: Vec<ClientShard>, kind: ModelKind) -> Result<Self> {
        let n = shards
            .first()
            .map(ClientShard::dim)
            .ok_or_else(|| FedError::Config("dataset needs at least one client".into()))?;
        if let Some(bad) = shards.iter().find(|s| s.dim() != n) {
            return Err(FedError::DimensionMismatch {
                expected: n,
                actual: bad.dim(),
            });
        }
        Ok(Self { shards, n, kind })
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// Number of clients.
    pub fn m(&self) -> usize {
        self.shards.len()
    }

    /// Feature dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Total sample count.
    pub fn d(&self) -> usize {
        self.shards.iter().map(ClientShard::size).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(ClientShard::size).collect()
    }
}

/// Block sizes `(normal, student-t, uniform)` for `d` pooled samples.
pub fn block_sizes(d: usize) -> (usize, usize, usize) {
    let third = d.div_ceil(3);
    let normal = third.min(d);
    let student = third.min(d - normal);
    (normal, student, d - normal - student)
}

/// The pooled, unshuffled sample matrix for `d` samples.
///
/// Each row holds `n` feature entries followed by the label.
pub fn pooled_samples(spec: &GenSpec, d: usize) -> Result<(Array2<f64>, Vec<SampleSource>)> {
    spec.validate()?;
    let n = spec.n;
    let (normal, student, _) = block_sizes(d);
    let mut draws = rng::stream(spec.seed, Stream::Samples, 0);
    let t_dist = StudentT::new(STUDENT_T_DOF).expect("valid degrees of freedom");
    let u_dist = Uniform::new_inclusive(-UNIFORM_HALF_WIDTH, UNIFORM_HALF_WIDTH);
    let planted = match spec.label_mode {
        LabelMode::Joint => None,
        LabelMode::Planted => {
            let mut w = rng::stream(spec.seed, Stream::PlantedModel, 0);
            Some(Array1::from_shape_fn(n, |_| StandardNormal.sample(&mut w)))
        }
    };

    let mut rows = Array2::zeros((d, n + 1));
    let mut sources = Vec::with_capacity(d);
    for (t, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
        let source = if t < normal {
            SampleSource::Normal
        } else if t < normal + student {
            SampleSource::StudentT
        } else {
            SampleSource::Uniform
        };
        for entry in row.iter_mut() {
            *entry = match source {
                SampleSource::Normal => StandardNormal.sample(&mut draws),
                SampleSource::StudentT => t_dist.sample(&mut draws),
                SampleSource::Uniform => u_dist.sample(&mut draws),
            };
        }
        if let Some(w) = &planted {
            let noise = row[n];
            row[n] = row.slice(ndarray::s![..n]).dot(w) + noise;
        }
        sources.push(source);
    }
    Ok((rows, sources))
}

/// Shard sizes `d_1, …, d_m` drawn uniformly from `[d_min, d_max]`.
pub fn shard_sizes(spec: &GenSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, Stream::ShardSizes, 0);
    Ok((0..spec.m)
        .map(|_| r.gen_range(spec.d_min..=spec.d_max))
        .collect())
}

/// Synthetic non-i.i.d. least-squares instance.
///
/// A third of the samples are standard normal, a third Student-t with five
/// degrees of freedom and the rest uniform on `[-5, 5]`. After a seeded
/// shuffle they are cut into contiguous shards of the drawn sizes.
pub fn generate_linreg(spec: &GenSpec) -> Result<FederatedDataset> {
    let sizes = shard_sizes(spec)?;
    let d: usize = sizes.iter().sum();
    let (pooled, _) = pooled_samples(spec, d)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng::stream(spec.seed, Stream::Shuffle, 0));

    let n = spec.n;
    let mut shards = Vec::with_capacity(spec.m);
    let mut cursor = 0;
    for &size in &sizes {
        let idx = &order[cursor..cursor + size];
        let block = pooled.select(Axis(0), idx);
        let features = block.slice(ndarray::s![.., ..n]).to_owned();
        let labels = block.column(n).to_owned();
        shards.push(ClientShard::new(features, labels)?);
        cursor += size;
    }
    FederatedDataset::new(shards, ModelKind::LinReg)
}

/// Sparse rows and `{0, 1}` labels read from a libsvm file.
#[derive(Debug, Clone, PartialEq)]
pub struct LibsvmData {
    /// Per row, `(zero-based column, value)` in ascending column order.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub labels: Vec<f64>,
    pub n: usize,
}

impl LibsvmData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.rows.len(), self.n));
        for (t, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                dense[[t, j]] = v;
            }
        }
        dense
    }
}

fn parse_label(token: &str) -> Option<f64> {
    let value: f64 = token.parse().ok()?;
    if value == 1.0 {
        Some(1.0)
    } else if value == 0.0 || value == -1.0 {
        Some(0.0)
    } else {
        None
    }
}

/// Parse libsvm text (`label idx:val idx:val …`, 1-based ascending indices).
///
/// Labels `-1`/`+1` and `0`/`1` are accepted, with `-1` mapped to `0`. Text
/// after `#` is ignored, as are blank lines. When `n_override` is given the
/// feature dimension is fixed to it; otherwise it is the largest index seen.
pub fn parse_libsvm<R: BufRead>(reader: R, path: &Path, n_override: Option<usize>) -> Result<LibsvmData> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut max_index = 0usize;
    let error = |line: usize, message: String| FedError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label_token = tokens.next().expect("non-empty line has a token");
        let label = parse_label(label_token)
            .ok_or_else(|| error(lineno, format!("unsupported label '{label_token}'")))?;
        let mut row = Vec::new();
        let mut previous = 0usize;
        for token in tokens {
            let (idx, val) = token
                .split_once(':')
                .ok_or_else(|| error(lineno, format!("expected idx:val, got '{token}'")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| error(lineno, format!("bad feature index '{idx}'")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| error(lineno, format!("bad feature value '{val}'")))?;
            if idx == 0 {
                return Err(error(lineno, "feature indices are 1-based".into()));
            }
            if idx <= previous {
                return Err(error(
                    lineno,
                    format!("feature index {idx} does not ascend (previous {previous})"),
                ));
            }
            if !val.is_finite() {
                return Err(error(lineno, format!("non-finite value at index {idx}")));
            }
            previous = idx;
            row.push((idx - 1, val));
        }
        max_index = max_index.max(previous);
        if let Some(n) = n_override {
            if previous > n {
                return Err(error(lineno, format!("index {previous} exceeds dimension {n}")));
            }
        }
        rows.push(row);
        labels.push(label);
    }
    Ok(LibsvmData {
        rows,
        labels,
        n: n_override.unwrap_or(max_index),
    })
}

pub fn load_libsvm(path: impl AsRef<Path>, n_override: Option<usize>) -> Result<LibsvmData> {
    let path = path.as_ref();
    let file = File::open(path)?;
    parse_libsvm(BufReader::new(file), path, n_override)
}

/// Write rows in libsvm format; zero entries are skipped.
pub fn write_libsvm(path: impl AsRef<Path>, features: &Array2<f64>, labels: &Array1<f64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (row, label) in features.axis_iter(Axis(0)).zip(labels.iter()) {
        write!(out, "{}", if *label > 0.5 { "+1" } else { "-1" })?;
        for (j, v) in row.iter().enumerate() {
            if *v != 0.0 {
                write!(out, " {}:{}", j + 1, v)?;
            }
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Shuffle samples and cut them into `m` contiguous shards whose sizes
/// differ by at most one (the first `d mod m` shards get the extra sample).
pub fn partition(
    features: &Array2<f64>,
    labels: &Array1<f64>,
    m: usize,
    seed: u64,
    kind: ModelKind,
) -> Result<FederatedDataset> {
    let d = labels.len();
    if features.nrows() != d {
        return Err(FedError::DimensionMismatch {
            expected: d,
            actual: features.nrows(),
        });
    }
    if m == 0 || d < m {
        return Err(FedError::NotEnoughSamples {
            needed: m.max(1),
            available: d,
        });
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Partition, 0));
    let base = d / m;
    let extra = d % m;
    let mut shards = Vec::with_capacity(m);
    let mut cursor = 0;
    for i in 0..m {
        let size = base + usize::from(i < extra);
        let idx = &order[cursor..cursor + size];
        shards.push(ClientShard::new(
            features.select(Axis(0), idx),
            labels.select(Axis(0), idx),
        )?);
        cursor += size;
    }
    FederatedDataset::new(shards, kind)
}

/// Description written next to exported shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub d_i: Vec<usize>,
    pub seed: u64,
    pub kind: ModelKind,
    pub shards: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenSpec>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const SHARD_FORMAT: &str = "csv-shards-v1";

/// Write `shard_NNNN.csv` files (`label,x1,…,xn`, no header) and
/// `manifest.json` into `dir`.
pub fn export_dataset(
    dataset: &FederatedDataset,
    dir: impl AsRef<Path>,
    seed: u64,
    generator: Option<&GenSpec>,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(dataset.m());
    for (i, shard) in dataset.shards().iter().enumerate() {
        let name = format!("shard_{i:04}.csv");
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(dir.join(&name))?;
        for (row, label) in shard.features().axis_iter(Axis(0)).zip(shard.labels()) {
            let mut record = Vec::with_capacity(row.len() + 1);
            record.push(label.to_string());
            record.extend(row.iter().map(f64::to_string));
            writer.write_record(&record)?;
        }
        writer.flush()?;
        names.push(name);
    }
    let manifest = Manifest {
        format: SHARD_FORMAT.into(),
        m: dataset.m(),
        n: dataset.n(),
        d: dataset.d(),
        d_i: dataset.sizes(),
        seed,
        kind: dataset.kind(),
        shards: names,
        generator: generator.cloned(),
    };
    let file = File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)?;
    Ok(manifest)
}

/// Read a dataset written by [`export_dataset`].
pub fn import_dataset(dir: impl AsRef<Path>) -> Result<(FederatedDataset, Manifest)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    if manifest.format != SHARD_FORMAT {
        return Err(FedError::Config(format!("unknown shard format '{}'", manifest.format)));
    }
    let mut shards = Vec::with_capacity(manifest.m);
    for (name, &size) in manifest.shards.iter().zip(&manifest.d_i) {
        let path: PathBuf = dir.join(name);
        let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(&path)?;
        let mut features = Array2::zeros((size, manifest.n));
        let mut labels = Array1::zeros(size);
        let mut count = 0;
        for (t, record) in reader.records().enumerate() {
            let record = record?;
            let parse_error = |message: String| FedError::Parse {
                path: path.clone(),
                line: t + 1,
                message,
            };
            if t >= size || record.len() != manifest.n + 1 {
                return Err(parse_error(format!(
                    "expected {} rows of {} fields",
                    size,
                    manifest.n + 1
                )));
            }
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_error(format!("bad number '{field}'")))?;
                if j == 0 {
                    labels[t] = v;
                } else {
                    features[[t, j - 1]] = v;
                }
            }
            count += 1;
        }
        if count != size {
            return Err(FedError::Parse {
                path,
                line: count,
                message: format!("expected {size} rows, found {count}"),
            });
        }
        shards.push(ClientShard::new(features, labels)?);
    }
    if shards.len() != manifest.m {
        return Err(FedError::Config("manifest shard list does not match m".into()));
    }
    Ok((FederatedDataset::new(shards, manifest.kind)?, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<LibsvmData> {
        parse_libsvm(Cursor::new(text), Path::new("mem"), None)
    }

    #[test]
    fn block_sizes_follow_thirds() {
        assert_eq!(block_sizes(3), (1, 1, 1));
        assert_eq!(block_sizes(300), (100, 100, 100));
        assert_eq!(block_sizes(301), (101, 101, 99));
        assert_eq!(block_sizes(1), (1, 0, 0));
        assert_eq!(block_sizes(4), (2, 2, 0));
    }

    #[test]
    fn single_client_three_samples() {
        let spec = GenSpec {
            m: 1,
            n: 2,
            d_min: 3,
            d_max: 3,
            seed: 4,
            label_mode: LabelMode::Joint,
        };
        let (_, sources) = pooled_samples(&spec, 3).unwrap();
        assert_eq!(sources, vec![SampleSource::Normal, SampleSource::StudentT, SampleSource::Uniform]);
        let data = generate_linreg(&spec).unwrap();
        assert_eq!(data.sizes(), vec![3]);
        assert_eq!(data.n(), 2);
    }

    #[test]
    fn generation_is_deterministic_and_sizes_in_range() {
        let spec = GenSpec::new(20, 5, 77);
        let a = generate_linreg(&spec).unwrap();
        let b = generate_linreg(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.sizes().iter().all(|&s| (50..=150).contains(&s)));
        assert_eq!(a.d(), a.sizes().iter().sum::<usize>());
        let c = generate_linreg(&GenSpec::new(20, 5, 78)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_block_is_bounded() {
        let spec = GenSpec::new(1, 4, 1);
        let (rows, sources) = pooled_samples(&spec, 300).unwrap();
        for (row, src) in rows.axis_iter(Axis(0)).zip(&sources) {
            if *src == SampleSource::Uniform {
                assert!(row.iter().all(|v| v.abs() <= 5.0));
            }
        }
        assert_eq!(sources.iter().filter(|s| **s == SampleSource::Normal).count(), 100);
        assert_eq!(sources.iter().filter(|s| **s == SampleSource::StudentT).count(), 100);
        assert_eq!(sources.iter().filter(|s| **s == SampleSource::Uniform).count(), 100);
    }

    #[test]
    fn planted_labels_follow_the_model() {
        let mut spec = GenSpec::new(2, 3, 5);
        spec.label_mode = LabelMode::Planted;
        let data = generate_linreg(&spec).unwrap();
        assert_eq!(data.m(), 2);
        assert_ne!(generate_linreg(&GenSpec::new(2, 3, 5)).unwrap(), data);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = GenSpec::new(0, 3, 1);
        assert!(generate_linreg(&spec).is_err());
        spec = GenSpec::new(2, 3, 1);
        spec.d_min = 10;
        spec.d_max = 5;
        assert!(generate_linreg(&spec).is_err());
    }

    #[test]
    fn libsvm_lines() {
        let data = parse("1 1:0.5 3:-2\n-1 2:1\n").unwrap();
        assert_eq!(data.labels, vec![1.0, 0.0]);
        assert_eq!(data.n, 3);
        let dense = data.to_dense();
        assert_eq!(dense.row(0).to_vec(), vec![0.5, 0.0, -2.0]);
        assert_eq!(dense.row(1).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn libsvm_accepts_zero_one_labels_comments_and_override() {
        let data = parse_libsvm(Cursor::new("0 1:2 # c\n\n+1 2:3\n"), Path::new("mem"), Some(5)).unwrap();
        assert_eq!(data.labels, vec![0.0, 1.0]);
        assert_eq!(data.n, 5);
    }

    #[test]
    fn libsvm_errors_name_the_line() {
        let err = parse("1 1:1\n1 3:1 2:4\n").unwrap_err();
        match err {
            FedError::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("ascend"));
            }
            other => panic!("{other}"),
        }
        assert!(matches!(parse("1 1:1\n\n2 1:1").unwrap_err(), FedError::Parse { line: 3, .. }));
        assert!(matches!(parse("1 foo\n").unwrap_err(), FedError::Parse { line: 1, .. }));
        assert!(matches!(parse("1 0:1\n").unwrap_err(), FedError::Parse { line: 1, .. }));
        assert!(matches!(parse("1 1:x\n").unwrap_err(), FedError::Parse { line: 1, .. }));
        assert!(parse_libsvm(Cursor::new("1 4:1\n"), Path::new("mem"), Some(3)).is_err());
    }

    #[test]
    fn partition_sizes() {
        let features = Array2::from_shape_fn((10, 2), |(t, j)| (t * 2 + j) as f64);
        let labels = Array1::from_shape_fn(10, |t| t as f64);
        let five = partition(&features, &labels, 5, 1, ModelKind::LinReg).unwrap();
        assert_eq!(five.sizes(), vec![2; 5]);
        let three = partition(&features, &labels, 3, 1, ModelKind::LinReg).unwrap();
        assert_eq!(three.sizes(), vec![4, 3, 3]);
        assert!(partition(&features, &labels, 11, 1, ModelKind::LinReg).is_err());
        assert_eq!(three, partition(&features, &labels, 3, 1, ModelKind::LinReg).unwrap());
    }

    #[test]
    fn partition_preserves_rows() {
        let features = Array2::from_shape_fn((17, 3), |(t, j)| (t * 3 + j) as f64);
        let labels = Array1::from_shape_fn(17, |t| t as f64);
        let data = partition(&features, &labels, 4, 9, ModelKind::LinReg).unwrap();
        let mut seen: Vec<usize> = data
            .shards()
            .iter()
            .flat_map(|s| {
                s.features()
                    .axis_iter(Axis(0))
                    .zip(s.labels())
                    .map(|(row, &b)| {
                        assert_eq!(row[0], 3.0 * b);
                        b as usize
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..17).collect::<Vec<_>>());
    }
}
