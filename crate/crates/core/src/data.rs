//! Datasets: synthetic Gaussian-prototype classification data, CSV
//! persistence, and heterogeneous client partitioning.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Errors from dataset construction, parsing, or partitioning.
#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("line {line}: row has {got} features, expected {want}")]
    Width { line: usize, got: usize, want: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("dataset has {have} samples but {need} clients each need one")]
    TooFewSamples { have: usize, need: usize },
    #[error("{what} must be positive and finite, got {value}")]
    BadParam { what: &'static str, value: f64 },
}

/// A labeled dataset: row-major features [N x width] plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    /// Wrap validated parts. `features` must be [N x width] with N equal to
    /// `labels.len()` and every label below `classes`.
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        if features.rank() != 2 || features.shape()[0] != labels.len() {
            return Err(DataError::Parse {
                line: 0,
                detail: format!(
                    "feature shape {:?} does not match {} labels",
                    features.shape(),
                    labels.len()
                ),
            });
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::Parse {
                line: i + 1,
                detail: format!("label {l} out of range for {classes} classes"),
            });
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Gather rows into a [B x width] batch with matching labels.
    /// Panics on out-of-range indices (caller bug, not input data).
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let w = self.width();
        let mut data = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            assert!(i < self.len(), "sample index {i} out of range");
            data.extend_from_slice(&self.features.data()[i * w..(i + 1) * w]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(&[indices.len(), w], data).expect("gathered batch shape"),
            labels,
        )
    }
}

/// Generate a synthetic classification task. Each class gets a unit-Gaussian
/// prototype vector; samples are the prototype plus `noise`-scaled Gaussian
/// perturbation. Labels cycle 0,1,...,C-1,0,... so every prefix is close to
/// balanced. Draw order is fixed (all prototypes first, then each sample's
/// perturbation), which makes generated sets reproducible from the seed.
pub fn synthetic(
    classes: usize,
    width: usize,
    n: usize,
    noise: f64,
    rng: &mut Rng,
) -> Result<Dataset, DataError> {
    if classes < 2 {
        return Err(DataError::BadParam {
            what: "classes",
            value: classes as f64,
        });
    }
    if width == 0 || n == 0 {
        return Err(DataError::Empty);
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(DataError::BadParam {
            what: "noise",
            value: noise,
        });
    }
    let prototypes = Tensor::from_fn(&[classes, width], || rng.normal());
    let mut data = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..width {
            data.push(prototypes.at(&[c, j]) + noise * rng.normal());
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(&[n, width], data).expect("synthetic shape"), labels, classes)
}

/// Write a dataset as CSV: one row per sample, label first, then features
/// in shortest-roundtrip decimal (re-reading reproduces the exact f64s).
pub fn write_csv(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let mut out = String::new();
    let w = ds.width();
    for (i, &label) in ds.labels.iter().enumerate() {
        write!(out, "{label}").expect("string write");
        for j in 0..w {
            write!(out, ",{}", ds.features.at(&[i, j])).expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a CSV written by [`write_csv`]: label first column, features after.
/// The class count is the largest label + 1 (labels need not all appear).
pub fn read_csv(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path)?;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let n = lineno + 1;
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|e| DataError::Parse {
                line: n,
                detail: format!("bad label: {e}"),
            })?;
        let row: Vec<f64> = fields
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| DataError::Parse {
                    line: n,
                    detail: format!("bad feature {f:?}: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Parse {
                line: n,
                detail: "non-finite feature".into(),
            });
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(DataError::Width {
                    line: n,
                    got: row.len(),
                    want: w,
                })
            }
            _ => {}
        }
        labels.push(label);
        data.extend_from_slice(&row);
    }
    let width = width.ok_or(DataError::Empty)?;
    if width == 0 {
        return Err(DataError::Empty);
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, width], data).expect("csv shape"), labels, classes)
}

/// Split sample indices across `clients` shards with label-skew controlled
/// by a symmetric Dirichlet(alpha). Per class (ascending label), the class's
/// samples are shuffled, client proportions are drawn as normalized
/// Gamma(alpha) variates, converted to counts by largest-remainder
/// rounding, and dealt out contiguously. Afterwards any empty shard takes
/// one sample from the currently largest shard (ties toward the smaller
/// client id) until every client holds at least one sample. Small alpha
/// concentrates each class on few clients; large alpha approaches an even
/// split.
pub fn dirichlet_partition(
    ds: &Dataset,
    clients: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>, DataError> {
    if clients == 0 {
        return Err(DataError::BadParam {
            what: "clients",
            value: 0.0,
        });
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(DataError::BadParam {
            what: "alpha",
            value: alpha,
        });
    }
    if ds.len() < clients {
        return Err(DataError::TooFewSamples {
            have: ds.len(),
            need: clients,
        });
    }
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for class in 0..ds.classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        rng.shuffle(&mut members);
        // Normalized Gamma(alpha) draws are a Dirichlet(alpha) sample.
        let gammas: Vec<f64> = (0..clients).map(|_| rng.gamma(alpha)).collect();
        let total: f64 = gammas.iter().sum();
        let props: Vec<f64> = if total > 0.0 && total.is_finite() {
            gammas.iter().map(|g| g / total).collect()
        } else {
            // All-underflow corner: fall back to an even split.
            vec![1.0 / clients as f64; clients]
        };
        let counts = largest_remainder(&props, members.len());
        let mut cursor = 0;
        for (v, &c) in counts.iter().enumerate() {
            shards[v].extend_from_slice(&members[cursor..cursor + c]);
            cursor += c;
        }
    }
    // Guarantee every client trains on something: repeatedly move one sample
    // from the largest shard to an empty one.
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..clients)
            .max_by_key(|&v| (shards[v].len(), usize::MAX - v))
            .expect("at least one client");
        let moved = shards[largest].pop().expect("largest shard nonempty");
        shards[empty].push(moved);
    }
    Ok(shards)
}

/// Round nonnegative proportions to integer counts summing to `total`:
/// floors first, then one extra to the largest fractional remainders
/// (ties toward the smaller index).
fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = props.iter().map(|p| (p * total as f64).floor() as usize).collect();
    // Floating error can overshoot; trim from the largest counts if so.
    while counts.iter().sum::<usize>() > total {
        let i = (0..counts.len())
            .max_by_key(|&i| (counts[i], usize::MAX - i))
            .unwrap();
        counts[i] -= 1;
    }
    let mut remainders: Vec<(usize, f64)> = props
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * total as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let deficit = total - counts.iter().sum::<usize>();
    for &(i, _) in remainders.iter().take(deficit) {
        counts[i] += 1;
    }
    counts
}
