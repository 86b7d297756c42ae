//! Dataset manifests, signal ingestion, synthetic generation, windowing,
//! normalization, partition files, and checkpoints.
//!
//! On-disk formats:
//! - manifest: flat `key=value` lines
//! - signals: CSV `t,node,v0..v{d-1}`, dense, sorted by t then node
//! - partition: CSV `node,client`, every node assigned exactly once
//! - checkpoint: text manifest of named shapes followed by one raw
//!   little-endian f64 blob

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tape::ParamMap;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("missing cell (t={t}, node={node})")]
    MissingCell { t: usize, node: usize },
    #[error("duplicate cell (t={t}, node={node})")]
    DuplicateCell { t: usize, node: usize },
    #[error("row ordering violated at line {line}: expected (t={t}, node={node})")]
    OrderingViolation { line: usize, t: usize, node: usize },
    #[error("non-finite value at line {line}")]
    NonFiniteValue { line: usize },
    #[error("unknown manifest key '{0}'")]
    UnknownManifestKey(String),
    #[error("manifest missing key '{0}'")]
    MissingManifestKey(String),
    #[error("split of length {len} too short for t_in={t_in} + t_out={t_out}")]
    SplitTooShort {
        len: usize,
        t_in: usize,
        t_out: usize,
    },
    #[error("node {0} has no client assignment")]
    PartitionUnassigned(usize),
    #[error("node {0} assigned more than once")]
    PartitionDuplicate(usize),
    #[error("client ids not contiguous from 0: missing {0}")]
    PartitionClientGap(usize),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Dataset description; paths are relative to the manifest location.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub steps_per_day: usize,
    pub signal_file: PathBuf,
    pub partition_file: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| DataError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: "expected key=value".into(),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        for key in map.keys() {
            if !matches!(
                key.as_str(),
                "name" | "num_nodes" | "feature_dim" | "steps_per_day" | "signal_file"
                    | "partition_file"
            ) {
                return Err(DataError::UnknownManifestKey(key.clone()));
            }
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| DataError::MissingManifestKey(k.to_string()))
        };
        let parse_usize = |k: &str| -> Result<usize, DataError> {
            get(k)?.parse().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                line: 0,
                detail: format!("bad integer for {k}"),
            })
        };
        let num_nodes = parse_usize("num_nodes")?;
        let feature_dim = parse_usize("feature_dim")?;
        let steps_per_day = parse_usize("steps_per_day")?;
        if num_nodes == 0 || feature_dim == 0 || steps_per_day == 0 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: 0,
                detail: "num_nodes, feature_dim, steps_per_day must be >= 1".into(),
            });
        }
        Ok(DatasetManifest {
            name: get("name")?,
            num_nodes,
            feature_dim,
            steps_per_day,
            signal_file: dir.join(get("signal_file")?),
            partition_file: map.get("partition_file").map(|p| dir.join(p)),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let rel = |p: &Path| {
            p.file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.to_string_lossy().into_owned())
        };
        let mut out = String::new();
        writeln!(out, "name={}", self.name).unwrap();
        writeln!(out, "num_nodes={}", self.num_nodes).unwrap();
        writeln!(out, "feature_dim={}", self.feature_dim).unwrap();
        writeln!(out, "steps_per_day={}", self.steps_per_day).unwrap();
        writeln!(out, "signal_file={}", rel(&self.signal_file)).unwrap();
        if let Some(p) = &self.partition_file {
            writeln!(out, "partition_file={}", rel(p)).unwrap();
        }
        fs::write(path, out).map_err(io_err(path))
    }
}

/// Full signal history: tensor [T, N, d] plus the absolute slot of t=0.
#[derive(Debug, Clone)]
pub struct SignalSeries {
    pub data: Tensor,
    pub start_slot: usize,
}

impl SignalSeries {
    pub fn steps(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn nodes(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn feat(&self) -> usize {
        self.data.dims()[2]
    }

    /// Signal frame at step t as an N x d matrix.
    pub fn frame(&self, t: usize) -> Tensor {
        let (n, d) = (self.nodes(), self.feat());
        let off = t * n * d;
        Tensor::new(vec![n, d], self.data.data()[off..off + n * d].to_vec()).expect("frame")
    }
}

/// Load and validate a dense signal table.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<SignalSeries, DataError> {
    let path = &manifest.signal_file;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let n = manifest.num_nodes;
    let d = manifest.feature_dim;
    let mut lines = text.lines().enumerate();

    let header: String = {
        let mut h = String::from("t,node");
        for f in 0..d {
            write!(h, ",v{f}").unwrap();
        }
        h
    };
    match lines.next() {
        Some((_, first)) if first.trim() == header => {}
        Some((i, _)) => {
            return Err(DataError::Parse {
                path: path.clone(),
                line: i + 1,
                detail: format!("expected header '{header}'"),
            })
        }
        None => {
            return Err(DataError::Parse {
                path: path.clone(),
                line: 1,
                detail: "empty file".into(),
            })
        }
    }

    let mut values = Vec::new();
    let mut expect_t = 0usize;
    let mut expect_n = 0usize;
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let parse_idx = |s: Option<&str>| -> Result<usize, DataError> {
            s.and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| DataError::Parse {
                    path: path.clone(),
                    line: line_no,
                    detail: "bad index field".into(),
                })
        };
        let t = parse_idx(fields.next())?;
        let node = parse_idx(fields.next())?;
        if (t, node) != (expect_t, expect_n) {
            // One step back is a duplicate; anything else broke ordering
            // or skipped a cell.
            let prev = if expect_n == 0 {
                (expect_t.wrapping_sub(1), n - 1)
            } else {
                (expect_t, expect_n - 1)
            };
            if (t, node) == prev {
                return Err(DataError::DuplicateCell { t, node });
            }
            if (t, node) > (expect_t, expect_n) {
                return Err(DataError::MissingCell {
                    t: expect_t,
                    node: expect_n,
                });
            }
            return Err(DataError::OrderingViolation {
                line: line_no,
                t: expect_t,
                node: expect_n,
            });
        }
        for f in 0..d {
            let v: f64 = fields
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| DataError::Parse {
                    path: path.clone(),
                    line: line_no,
                    detail: format!("missing value v{f}"),
                })?;
            if !v.is_finite() {
                return Err(DataError::NonFiniteValue { line: line_no });
            }
            values.push(v);
        }
        if fields.next().is_some() {
            return Err(DataError::Parse {
                path: path.clone(),
                line: line_no,
                detail: "trailing fields".into(),
            });
        }
        expect_n += 1;
        if expect_n == n {
            expect_n = 0;
            expect_t += 1;
        }
    }
    if expect_n != 0 {
        return Err(DataError::MissingCell {
            t: expect_t,
            node: expect_n,
        });
    }
    if expect_t == 0 {
        return Err(DataError::Parse {
            path: path.clone(),
            line: 0,
            detail: "no data rows".into(),
        });
    }
    Ok(SignalSeries {
        data: Tensor::new(vec![expect_t, n, d], values)?,
        start_slot: 0,
    })
}

pub fn write_signals(path: &Path, series: &SignalSeries) -> Result<(), DataError> {
    let (t_len, n, d) = (series.steps(), series.nodes(), series.feat());
    let mut out = String::from("t,node");
    for f in 0..d {
        write!(out, ",v{f}").unwrap();
    }
    out.push('\n');
    for t in 0..t_len {
        for node in 0..n {
            write!(out, "{t},{node}").unwrap();
            for f in 0..d {
                let v = series.data.data()[t * n * d + node * d + f];
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Deterministic counter-based generator (splitmix64 over seed and
/// counter), identical on every platform.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut z = self
            .seed
            .wrapping_add(self.counter.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        self.counter += 1;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1).
    pub fn next_signed(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }
}

/// Synthetic stand-in series: damped ring diffusion driven by a daily
/// sinusoid with per-node-per-feature phases plus uniform noise. The
/// coupling strength varies per node, so the spatial structure is
/// heterogeneous and the noise component is predictable only from
/// neighboring nodes. The linear dynamics contract at rate `DAMP`, so
/// with zero noise the series settles into an exactly daily-periodic
/// orbit.
pub fn synth_diffusion(
    seed: u64,
    n: usize,
    t_len: usize,
    d: usize,
    steps_per_day: usize,
    noise: f64,
) -> SignalSeries {
    const DAMP: f64 = 0.9;
    assert!(n >= 1 && t_len >= 1 && d >= 1 && steps_per_day >= 1);

    let mut rng = CounterRng::new(seed);
    let phases: Vec<f64> = (0..n * d)
        .map(|i| {
            let base = 2.0 * std::f64::consts::PI * (i / d) as f64 / n as f64;
            base + 0.5 * rng.next_signed()
        })
        .collect();
    let amps: Vec<f64> = (0..n * d).map(|_| 1.0 + 0.25 * rng.next_signed()).collect();
    // Per-node neighbor coupling in [0.05, 0.45]; rows stay stochastic.
    let couples: Vec<f64> = (0..n).map(|_| 0.25 + 0.2 * rng.next_signed()).collect();

    let mut state = vec![0.0f64; n * d];
    let mut values = Vec::with_capacity(t_len * n * d);
    for t in 0..t_len {
        let day_angle = 2.0 * std::f64::consts::PI * (t % steps_per_day) as f64
            / steps_per_day as f64;
        let mut next = vec![0.0f64; n * d];
        for node in 0..n {
            let left = (node + n - 1) % n;
            let right = (node + 1) % n;
            let couple = couples[node];
            for f in 0..d {
                let mixed = (1.0 - 2.0 * couple) * state[node * d + f]
                    + couple * state[left * d + f]
                    + couple * state[right * d + f];
                let force = amps[node * d + f] * (day_angle + phases[node * d + f]).sin();
                next[node * d + f] = DAMP * mixed + force + noise * rng.next_signed();
            }
        }
        state = next;
        values.extend_from_slice(&state);
    }
    SignalSeries {
        data: Tensor::new(vec![t_len, n, d], values).expect("synthetic series"),
        start_slot: 0,
    }
}

/// Per-feature z-score statistics, fit on the training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Statistics over `[0, train_steps)` of the series, per feature over
    /// all nodes jointly. Zero-variance features get std 1.
    pub fn fit(series: &SignalSeries, train_steps: usize) -> Normalizer {
        let (n, d) = (series.nodes(), series.feat());
        let count = (train_steps * n) as f64;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        let data = series.data.data();
        for t in 0..train_steps {
            for node in 0..n {
                for f in 0..d {
                    mean[f] += data[t * n * d + node * d + f];
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        for t in 0..train_steps {
            for node in 0..n {
                for f in 0..d {
                    let delta = data[t * n * d + node * d + f] - mean[f];
                    var[f] += delta * delta;
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer { mean, std }
    }

    /// Apply per-feature z-scoring; the last dimension is the feature axis.
    pub fn apply(&self, t: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::new(t.dims().to_vec(), data).expect("normalize")
    }

    pub fn invert(&self, t: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % d] + self.mean[i % d])
            .collect();
        Tensor::new(t.dims().to_vec(), data).expect("denormalize")
    }
}

/// One forecasting sample: normalized inputs/targets plus slot indices.
#[derive(Debug, Clone)]
pub struct Window {
    /// t_in step signals, each N x d, normalized.
    pub x: Vec<Tensor>,
    /// Targets as N x (t_out * d), column tau*d + f, normalized.
    pub y: Tensor,
    /// Absolute series index of the first input step.
    pub start_t: usize,
    pub slots: Vec<usize>,
    pub prev_slots: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SplitWindows {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    pub normalizer: Normalizer,
}

/// Chronological split at the given ratios, windows never straddling a
/// boundary; values are normalized with train-split statistics.
pub fn split_and_window(
    series: &SignalSeries,
    t_in: usize,
    t_out: usize,
    ratios: (usize, usize, usize),
    steps_per_day: usize,
) -> Result<SplitWindows, DataError> {
    let t_total = series.steps();
    let denom = ratios.0 + ratios.1 + ratios.2;
    let l_train = t_total * ratios.0 / denom;
    let l_val = t_total * ratios.1 / denom;
    let l_test = t_total - l_train - l_val;
    for len in [l_train, l_val, l_test] {
        if len < t_in + t_out {
            return Err(DataError::SplitTooShort {
                len,
                t_in,
                t_out,
            });
        }
    }
    let normalizer = Normalizer::fit(series, l_train);
    let build = |offset: usize, len: usize| -> Vec<Window> {
        let count = len - t_in - t_out + 1;
        (0..count)
            .map(|w| {
                let start_t = offset + w;
                let x = (0..t_in)
                    .map(|s| normalizer.apply(&series.frame(start_t + s)))
                    .collect();
                let n = series.nodes();
                let d = series.feat();
                let mut y = vec![0.0; n * t_out * d];
                for tau in 0..t_out {
                    let frame = normalizer.apply(&series.frame(start_t + t_in + tau));
                    for node in 0..n {
                        for f in 0..d {
                            y[node * t_out * d + tau * d + f] = frame.at2(node, f);
                        }
                    }
                }
                let slots = (0..t_in)
                    .map(|s| (series.start_slot + start_t + s) % steps_per_day)
                    .collect();
                let prev_slots = (0..t_in)
                    .map(|s| {
                        (series.start_slot + start_t + s + steps_per_day - 1) % steps_per_day
                    })
                    .collect();
                Window {
                    x,
                    y: Tensor::new(vec![n, t_out * d], y).expect("targets"),
                    start_t,
                    slots,
                    prev_slots,
                }
            })
            .collect()
    };
    Ok(SplitWindows {
        train: build(0, l_train),
        val: build(l_train, l_val),
        test: build(l_train + l_val, l_test),
        normalizer,
    })
}

/// Parse a `node,client` table into per-client node index lists.
pub fn load_partition(path: &Path, n: usize) -> Result<Vec<Vec<usize>>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut assign: Vec<Option<usize>> = vec![None; n];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line == "node,client" {
            continue;
        }
        let (ns, cs) = line.split_once(',').ok_or_else(|| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: "expected node,client".into(),
        })?;
        let node: usize = ns.trim().parse().map_err(|_| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: "bad node id".into(),
        })?;
        let client: usize = cs.trim().parse().map_err(|_| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: "bad client id".into(),
        })?;
        if node >= n {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("node {node} out of range 0..{n}"),
            });
        }
        if assign[node].is_some() {
            return Err(DataError::PartitionDuplicate(node));
        }
        assign[node] = Some(client);
    }
    let mut max_client = 0;
    for (node, a) in assign.iter().enumerate() {
        match a {
            Some(c) => max_client = max_client.max(*c),
            None => return Err(DataError::PartitionUnassigned(node)),
        }
    }
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); max_client + 1];
    for (node, a) in assign.iter().enumerate() {
        lists[a.unwrap()].push(node);
    }
    for (c, list) in lists.iter().enumerate() {
        if list.is_empty() {
            return Err(DataError::PartitionClientGap(c));
        }
    }
    Ok(lists)
}

pub fn write_partition(path: &Path, lists: &[Vec<usize>]) -> Result<(), DataError> {
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for (c, list) in lists.iter().enumerate() {
        for &node in list {
            rows.push((node, c));
        }
    }
    rows.sort_unstable();
    let mut out = String::from("node,client\n");
    for (node, c) in rows {
        writeln!(out, "{node},{c}").unwrap();
    }
    fs::write(path, out).map_err(io_err(path))
}

const CKPT_MAGIC: &str = "FSTGD-CKPT v1";

/// Checkpoint: string metadata, named tensor shapes, then every tensor's
/// values concatenated as one little-endian f64 blob in manifest order.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: ParamMap,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut head = String::new();
        writeln!(head, "{CKPT_MAGIC}").unwrap();
        for (k, v) in &self.meta {
            writeln!(head, "meta {k} {v}").unwrap();
        }
        let mut total = 0usize;
        for (name, t) in &self.tensors {
            write!(head, "tensor {name} {}", t.rank()).unwrap();
            for d in t.dims() {
                write!(head, " {d}").unwrap();
            }
            head.push('\n');
            total += t.len();
        }
        writeln!(head, "blob {total}").unwrap();
        let mut file = fs::File::create(path).map_err(io_err(path))?;
        file.write_all(head.as_bytes()).map_err(io_err(path))?;
        let mut blob = Vec::with_capacity(total * 8);
        for t in self.tensors.values() {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        file.write_all(&blob).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(io_err(path))?
            .read_to_end(&mut bytes)
            .map_err(io_err(path))?;
        let header_end = find_blob_start(&bytes)
            .ok_or_else(|| DataError::BadCheckpoint("no blob marker".into()))?;
        let head = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| DataError::BadCheckpoint("non-utf8 header".into()))?;
        let mut lines = head.lines();
        if lines.next() != Some(CKPT_MAGIC) {
            return Err(DataError::BadCheckpoint("bad magic".into()));
        }
        let mut meta = BTreeMap::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut declared_total = None;
        for line in lines {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("meta") => {
                    let k = parts
                        .next()
                        .ok_or_else(|| DataError::BadCheckpoint("meta without key".into()))?;
                    let v: Vec<&str> = parts.collect();
                    meta.insert(k.to_string(), v.join(" "));
                }
                Some("tensor") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| DataError::BadCheckpoint("tensor without name".into()))?;
                    let rank: usize = parts
                        .next()
                        .and_then(|r| r.parse().ok())
                        .ok_or_else(|| DataError::BadCheckpoint("bad rank".into()))?;
                    let dims: Vec<usize> = parts.filter_map(|p| p.parse().ok()).collect();
                    if dims.len() != rank {
                        return Err(DataError::BadCheckpoint(format!(
                            "tensor {name}: rank {rank} but {} dims",
                            dims.len()
                        )));
                    }
                    shapes.push((name.to_string(), dims));
                }
                Some("blob") => {
                    declared_total = parts.next().and_then(|p| p.parse::<usize>().ok());
                }
                Some(other) => {
                    return Err(DataError::BadCheckpoint(format!("unknown line '{other}'")))
                }
                None => {}
            }
        }
        let total: usize = shapes.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
        if declared_total != Some(total) {
            return Err(DataError::BadCheckpoint(format!(
                "blob count {declared_total:?} != shapes total {total}"
            )));
        }
        let blob = &bytes[header_end..];
        if blob.len() != total * 8 {
            return Err(DataError::BadCheckpoint(format!(
                "blob is {} bytes, expected {}",
                blob.len(),
                total * 8
            )));
        }
        let mut tensors = ParamMap::new();
        let mut off = 0;
        for (name, dims) in shapes {
            let count: usize = dims.iter().product();
            let mut vals = Vec::with_capacity(count);
            for i in 0..count {
                let start = (off + i) * 8;
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&blob[start..start + 8]);
                vals.push(f64::from_le_bytes(buf));
            }
            off += count;
            tensors.insert(name, Tensor::new(dims, vals)?);
        }
        Ok(Checkpoint { meta, tensors })
    }
}

fn find_blob_start(bytes: &[u8]) -> Option<usize> {
    // The header ends at the newline that closes the "blob <n>" line.
    let mut pos = 0;
    while pos < bytes.len() {
        let end = bytes[pos..].iter().position(|&b| b == b'\n')? + pos;
        if bytes[pos..].starts_with(b"blob ") {
            return Some(end + 1);
        }
        pos = end + 1;
    }
    None
}
