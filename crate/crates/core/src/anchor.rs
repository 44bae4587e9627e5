//! The fixed anchor matrix: one unit vector per class.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datakit::LabeledDataset;
use crate::diffcore::Tensor;
use crate::error::{invalid, Error, Result};
use crate::model::{features, Snapshot};
use crate::rng::Rng;

pub const ANCHOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    File,
    Synthetic,
    Prototype,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticMode {
    Orthonormal,
    RandomUnit,
}

/// Immutable `b × d` anchor matrix with unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    rows: Tensor,
    class_names: Option<Vec<String>>,
    attributes: Option<Vec<String>>,
    source: AnchorSource,
    source_note: Option<String>,
}

/// Anchor file layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorFile {
    pub version: u32,
    pub b: usize,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    pub rows: Vec<Vec<f64>>,
    /// Class id per row when a class has several anchor rows; rows of the
    /// same class are averaged and renormalized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_classes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_note: Option<String>,
}

fn normalize_checked(row: &mut [f64], idx: usize) -> Result<()> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroRow(idx));
    }
    row.iter_mut().for_each(|v| *v /= n);
    Ok(())
}

impl AnchorSet {
    /// Builds an anchor set, normalizing every row. Zero rows are rejected.
    pub fn from_rows(rows: &[Vec<f64>], source: AnchorSource) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::DegenerateClasses);
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(invalid("anchor rows must be non-empty"));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::DimensionInconsistency {
                    expected: d,
                    found: r.len(),
                    row: i,
                });
            }
            let mut r = r.clone();
            normalize_checked(&mut r, i)?;
            data.extend(r);
        }
        Ok(Self {
            rows: Tensor::matrix(rows.len(), d, data),
            class_names: None,
            attributes: None,
            source,
            source_note: None,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.b() {
            return Err(invalid("class_names length must equal b"));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn b(&self) -> usize {
        self.rows.rows()
    }

    pub fn d(&self) -> usize {
        self.rows.cols()
    }

    /// The `b × d` matrix.
    pub fn matrix(&self) -> &Tensor {
        &self.rows
    }

    pub fn row(&self, c: usize) -> &[f64] {
        self.rows.row(c)
    }

    pub fn source(&self) -> AnchorSource {
        self.source
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn attributes(&self) -> Option<&[String]> {
        self.attributes.as_deref()
    }

    pub fn source_note(&self) -> Option<&str> {
        self.source_note.as_deref()
    }

    /// SHA-256 over the little-endian bytes of the matrix, hex encoded.
    pub fn checksum(&self) -> String {
        checksum_f64(self.rows.data())
    }

    pub fn to_file(&self) -> AnchorFile {
        AnchorFile {
            version: ANCHOR_FORMAT_VERSION,
            b: self.b(),
            d: self.d(),
            class_names: self.class_names.clone(),
            rows: (0..self.b()).map(|c| self.row(c).to_vec()).collect(),
            row_classes: None,
            attributes: self.attributes.clone(),
            source_note: self.source_note.clone(),
        }
    }

    pub fn from_file(f: AnchorFile) -> Result<Self> {
        if f.version != ANCHOR_FORMAT_VERSION {
            return Err(invalid(format!("unsupported anchor version {}", f.version)));
        }
        for (i, r) in f.rows.iter().enumerate() {
            if r.len() != f.d {
                return Err(Error::DimensionInconsistency {
                    expected: f.d,
                    found: r.len(),
                    row: i,
                });
            }
        }
        let rows = match &f.row_classes {
            None => {
                if f.rows.len() != f.b {
                    return Err(Error::DimensionInconsistency {
                        expected: f.b,
                        found: f.rows.len(),
                        row: f.rows.len(),
                    });
                }
                f.rows.clone()
            }
            Some(classes) => {
                if classes.len() != f.rows.len() {
                    return Err(invalid("row_classes must tag every row"));
                }
                let mut sums = vec![vec![0.0; f.d]; f.b];
                let mut seen = vec![false; f.b];
                for (i, (r, &c)) in f.rows.iter().zip(classes).enumerate() {
                    if c >= f.b {
                        return Err(Error::LabelOutOfRange {
                            label: c,
                            classes: f.b,
                        });
                    }
                    let mut r = r.clone();
                    normalize_checked(&mut r, i)?;
                    for (s, v) in sums[c].iter_mut().zip(r) {
                        *s += v;
                    }
                    seen[c] = true;
                }
                let missing: Vec<usize> = (0..f.b).filter(|&c| !seen[c]).collect();
                if !missing.is_empty() {
                    return Err(Error::MissingClasses(missing));
                }
                sums
            }
        };
        let mut set = Self::from_rows(&rows, AnchorSource::File)?;
        if let Some(names) = f.class_names {
            set = set.with_class_names(names)?;
        }
        if let Some(attrs) = f.attributes {
            if attrs.len() != set.b() {
                return Err(invalid("attributes length must equal b"));
            }
            set.attributes = Some(attrs);
        }
        set.source_note = f.source_note;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }
}

pub(crate) fn checksum_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads an anchor file; rows are renormalized on load.
pub fn load_anchors(path: impl AsRef<Path>) -> Result<AnchorSet> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let f: AnchorFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    AnchorSet::from_file(f)
}

/// Seeded synthetic anchors: Gram–Schmidt orthonormal rows or independent
/// random unit rows.
pub fn gen_synthetic_anchors(
    b: usize,
    d: usize,
    seed: u64,
    mode: SyntheticMode,
) -> Result<AnchorSet> {
    if b < 2 {
        return Err(Error::DegenerateClasses);
    }
    if d == 0 {
        return Err(invalid("anchor dimension must be positive"));
    }
    if mode == SyntheticMode::Orthonormal && d < b {
        return Err(invalid(format!(
            "orthonormal anchors need d >= b (d={d}, b={b})"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(b);
    while rows.len() < b {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        if mode == SyntheticMode::Orthonormal {
            // two passes of classical Gram–Schmidt for numerical orthogonality
            for _ in 0..2 {
                for u in &rows {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        rows.push(v);
    }
    let mut set = AnchorSet::from_rows(&rows, AnchorSource::Synthetic)?;
    set.source_note = Some(format!("synthetic {mode:?} seed={seed}"));
    Ok(set)
}

/// Per-class mean of the snapshot's normalized features, renormalized.
pub fn visual_prototype_anchors(snap: &Snapshot, retain: &LabeledDataset) -> Result<AnchorSet> {
    let b = retain.class_count();
    let counts = retain.class_counts();
    let missing: Vec<usize> = (0..b).filter(|&c| counts[c] == 0).collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    let v = features(snap.params(), retain.inputs())?;
    let d = v.cols();
    let mut sums = vec![vec![0.0; d]; b];
    for (i, &l) in retain.labels().iter().enumerate() {
        for (s, x) in sums[l].iter_mut().zip(v.row(i)) {
            *s += x;
        }
    }
    for (c, s) in sums.iter_mut().enumerate() {
        s.iter_mut().for_each(|x| *x /= counts[c] as f64);
    }
    let mut set = AnchorSet::from_rows(&sums, AnchorSource::Prototype)?;
    set.source_note = Some(format!("visual prototypes from snapshot `{}`", snap.tag()));
    Ok(set)
}
