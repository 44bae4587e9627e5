//! Labeled datasets, synthetic generation and forget/retain splits.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// Distance of every synthetic class mean from the origin.
pub const CLASS_MEAN_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub name: String,
    inputs: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        inputs: Tensor,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(invalid("inputs must be a matrix"));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if class_count < 1 {
            return Err(invalid("class_count must be positive"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: class_count,
            });
        }
        Ok(Self {
            name: name.into(),
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Sample count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, idx: &[usize], name: impl Into<String>) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            name: name.into(),
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }
}

/// Generates `b` Gaussian clusters around seeded means on the sphere of
/// radius [`CLASS_MEAN_RADIUS`]. Samples are emitted class-major.
pub fn gen_gaussian_clusters(
    b: usize,
    n_per_class: usize,
    d_in: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if b < 2 {
        return Err(invalid("gen_gaussian_clusters needs b >= 2"));
    }
    if n_per_class < 1 {
        return Err(invalid("n_per_class must be positive"));
    }
    if d_in < 2 {
        return Err(invalid("d_in must be at least 2"));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(invalid("spread must be a nonnegative finite real"));
    }
    let mut rng = Rng::new(seed);
    let mut means = Vec::with_capacity(b);
    for _ in 0..b {
        let mut m: Vec<f64> = (0..d_in).map(|_| rng.gaussian()).collect();
        let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        m.iter_mut().for_each(|v| *v *= CLASS_MEAN_RADIUS / n);
        means.push(m);
    }
    let mut data = Vec::with_capacity(b * n_per_class * d_in);
    let mut labels = Vec::with_capacity(b * n_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            for &mu in mean {
                data.push(mu + spread * rng.gaussian());
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(
        format!("gaussian-b{b}-n{n_per_class}-d{d_in}-s{seed}"),
        Tensor::matrix(b * n_per_class, d_in, data),
        labels,
        b,
    )
}

/// Seeded held-out split. Returns `(train, test)` where `test` holds
/// `round(fraction * N)` samples.
pub fn holdout(
    data: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let n = data.len();
    let n_test = (fraction * n as f64).round() as usize;
    if !(0.0..1.0).contains(&fraction) || n_test == 0 || n_test >= n {
        return Err(invalid(format!(
            "holdout fraction {fraction} leaves an empty side for N={n}"
        )));
    }
    let perm = Rng::new(seed).permutation(n);
    let mut test_idx = perm[..n_test].to_vec();
    let mut train_idx = perm[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((
        data.subset(&train_idx, format!("{}-train", data.name))?,
        data.subset(&test_idx, format!("{}-test", data.name))?,
    ))
}

/// Retain-set wrapper that counts reads, so runs can prove they never
/// touched the retention data.
#[derive(Debug)]
pub struct RetainSet {
    data: LabeledDataset,
    reads: AtomicUsize,
}

impl Clone for RetainSet {
    fn clone(&self) -> Self {
        Self {
            data: self.data.clone(),
            reads: AtomicUsize::new(self.reads()),
        }
    }
}

impl RetainSet {
    pub fn new(data: LabeledDataset) -> Self {
        Self {
            data,
            reads: AtomicUsize::new(0),
        }
    }

    /// A retain set whose counter resumes from reads recorded elsewhere.
    pub fn with_recorded_reads(data: LabeledDataset, reads: usize) -> Self {
        Self {
            data,
            reads: AtomicUsize::new(reads),
        }
    }

    /// Access for unlearning algorithms. Every call is counted.
    pub fn read(&self) -> &LabeledDataset {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.data
    }

    /// Access for the evaluator after unlearning. Not counted.
    pub fn for_evaluation(&self) -> &LabeledDataset {
        &self.data
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn reset_reads(&self) {
        self.reads.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Instance,
    Class,
}

#[derive(Debug, Clone)]
pub struct ForgetSplit {
    pub forget: LabeledDataset,
    pub retain: RetainSet,
    pub forget_indices: Vec<usize>,
    pub retain_indices: Vec<usize>,
    /// Classes removed in class mode; empty in instance mode.
    pub forgotten_classes: Vec<usize>,
    pub mode: SplitMode,
    pub seed: u64,
}

fn build_split(
    data: &LabeledDataset,
    mut forget_idx: Vec<usize>,
    forgotten_classes: Vec<usize>,
    mode: SplitMode,
    seed: u64,
) -> Result<ForgetSplit> {
    forget_idx.sort_unstable();
    let mut in_forget = vec![false; data.len()];
    for &i in &forget_idx {
        in_forget[i] = true;
    }
    let retain_idx: Vec<usize> = (0..data.len()).filter(|&i| !in_forget[i]).collect();
    Ok(ForgetSplit {
        forget: data.subset(&forget_idx, format!("{}-forget", data.name))?,
        retain: RetainSet::new(data.subset(&retain_idx, format!("{}-retain", data.name))?),
        forget_indices: forget_idx,
        retain_indices: retain_idx,
        forgotten_classes,
        mode,
        seed,
    })
}

/// Uniformly samples `k` instances without replacement as the forget set.
pub fn split_forget(data: &LabeledDataset, k: usize, seed: u64) -> Result<ForgetSplit> {
    if k < 1 || k >= data.len() {
        return Err(invalid(format!(
            "k must satisfy 1 <= k < N (k={k}, N={})",
            data.len()
        )));
    }
    let perm = Rng::new(seed).permutation(data.len());
    build_split(data, perm[..k].to_vec(), vec![], SplitMode::Instance, seed)
}

/// Forgets every sample of `ceil(class_fraction * b)` uniformly chosen classes.
pub fn split_forget_classes(
    data: &LabeledDataset,
    class_fraction: f64,
    seed: u64,
) -> Result<ForgetSplit> {
    let b = data.class_count();
    let chosen = (class_fraction * b as f64).ceil();
    if !(class_fraction > 0.0 && class_fraction < 1.0) || chosen < 1.0 || chosen as usize >= b {
        return Err(invalid(format!(
            "class_fraction {class_fraction} selects {chosen} of {b} classes"
        )));
    }
    let mut classes = Rng::new(seed).permutation(b)[..chosen as usize].to_vec();
    classes.sort_unstable();
    let forget_idx: Vec<usize> = (0..data.len())
        .filter(|&i| classes.contains(&data.labels()[i]))
        .collect();
    if forget_idx.is_empty() || forget_idx.len() == data.len() {
        return Err(invalid("class split leaves an empty side"));
    }
    build_split(data, forget_idx, classes, SplitMode::Class, seed)
}

fn format_row(out: &mut String, label: usize, row: &[f64]) {
    let _ = write!(out, "{label}");
    for v in row {
        let _ = write!(out, ",{v:?}");
    }
}

pub fn dataset_to_csv(data: &LabeledDataset) -> String {
    let mut out = format!(
        "# n={} d={} b={}\n",
        data.len(),
        data.dim(),
        data.class_count()
    );
    for i in 0..data.len() {
        format_row(&mut out, data.labels()[i], data.inputs().row(i));
        out.push('\n');
    }
    out
}

pub fn save_dataset_csv(data: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset_to_csv(data))?;
    Ok(())
}

/// Header values `(n, d, b)` from a `# n=.. d=.. b=..` line.
pub(crate) fn parse_header(line: &str, lineno: usize) -> Result<(usize, usize, usize)> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "expected `# n=<N> d=<d> b=<b>` header".into(),
        })?
        .trim();
    let (mut n, mut d, mut b) = (None, None, None);
    for tok in body.split_whitespace() {
        let (key, val) = tok.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("malformed header token `{tok}`"),
        })?;
        let parsed: usize = val.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("header value `{val}` is not an integer"),
        })?;
        match key {
            "n" => n = Some(parsed),
            "d" => d = Some(parsed),
            "b" => b = Some(parsed),
            _ => {}
        }
    }
    match (n, d, b) {
        (Some(n), Some(d), Some(b)) => Ok((n, d, b)),
        _ => Err(Error::Parse {
            line: lineno,
            msg: "header must define n, d and b".into(),
        }),
    }
}

/// Parsed data row: label, features, and any trailing integer columns.
pub(crate) fn parse_row(
    line: &str,
    lineno: usize,
    d: usize,
    extra: usize,
) -> Result<(usize, Vec<f64>, Vec<usize>)> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 1 + d + extra {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected {} fields, found {}", 1 + d + extra, fields.len()),
        });
    }
    let label = fields[0].parse::<usize>().map_err(|_| Error::Parse {
        line: lineno,
        msg: format!("label `{}` is not a class index", fields[0]),
    })?;
    let mut values = Vec::with_capacity(d);
    for f in &fields[1..=d] {
        let v: f64 = f.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("`{f}` is not a real number"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("non-finite value `{f}`"),
            });
        }
        values.push(v);
    }
    let mut tail = Vec::with_capacity(extra);
    for f in &fields[1 + d..] {
        tail.push(f.parse::<usize>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("`{f}` is not an index"),
        })?);
    }
    Ok((label, values, tail))
}

pub fn dataset_from_csv(text: &str, name: &str) -> Result<LabeledDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let (n, d, b) = parse_header(header, hl + 1)?;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines {
        if line.starts_with('#') {
            continue;
        }
        let (label, values, _) = parse_row(line, i + 1, d, 0)?;
        if label >= b {
            return Err(Error::LabelOutOfRange { label, classes: b });
        }
        labels.push(label);
        data.extend(values);
    }
    if labels.len() != n {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header declares n={n} but file has {} rows", labels.len()),
        });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    LabeledDataset::new(name, Tensor::matrix(n, d, data), labels, b)
}

pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    dataset_from_csv(&text, &name)
}
