//! Surrogate probe set built from forget inputs by targeted PGD.
//!
//! Each forget sample spawns `n_adv` probes, each pushed toward a class other
//! than its own by signed-gradient descent on the snapshot's direct-path
//! cross-entropy, projected onto an L∞ ball around the origin after every
//! step. Probes are emitted in `(origin, replica)` order.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datakit::{parse_header, parse_row, LabeledDataset};
use crate::diffcore::{Tape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::model::{argmax_rows, logits_direct, Blocks, Snapshot};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_adv: usize,
    pub steps: usize,
    pub step_size: f64,
    pub radius: f64,
    /// Optional input-domain clamp `[lo, hi]` for bounded data.
    pub clamp: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_adv: 4,
            steps: 40,
            step_size: 0.05,
            radius: 1.0,
            clamp: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMeta {
    pub steps: usize,
    pub step_size: f64,
    pub radius: f64,
    pub norm: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    inputs: Option<Tensor>,
    d_in: usize,
    class_count: usize,
    /// `y_s`.
    pub targets: Vec<usize>,
    /// Index into the forget set of each probe's source sample.
    pub origin: Vec<usize>,
    /// True class of each probe's source sample.
    pub origin_labels: Vec<usize>,
    pub meta: AttackMeta,
}

impl ProbeSet {
    pub fn empty(d_in: usize, class_count: usize) -> Self {
        Self {
            inputs: None,
            d_in,
            class_count,
            targets: vec![],
            origin: vec![],
            origin_labels: vec![],
            meta: AttackMeta {
                steps: 0,
                step_size: 0.0,
                radius: 0.0,
                norm: "linf".into(),
                seed: 0,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d_in
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// `N_s × d_in` inputs, `None` when empty.
    pub fn inputs(&self) -> Option<&Tensor> {
        self.inputs.as_ref()
    }

    /// Probes labeled with their targets.
    pub fn as_dataset(&self) -> Option<LabeledDataset> {
        self.inputs.as_ref().map(|x| {
            LabeledDataset::new("probes", x.clone(), self.targets.clone(), self.class_count)
                .expect("probe targets are valid labels")
        })
    }

    /// Keeps only the probes at the given positions.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut out = self.clone();
        out.inputs = match (&self.inputs, idx.is_empty()) {
            (Some(x), false) => Some(x.select_rows(idx)),
            _ => None,
        };
        out.targets = idx.iter().map(|&i| self.targets[i]).collect();
        out.origin = idx.iter().map(|&i| self.origin[i]).collect();
        out.origin_labels = idx.iter().map(|&i| self.origin_labels[i]).collect();
        out
    }
}

fn draw_targets(rng: &mut Rng, label: usize, b: usize, n_adv: usize) -> Vec<usize> {
    let others: Vec<usize> = (0..b).filter(|&c| c != label).collect();
    if n_adv <= others.len() {
        let mut o = others;
        rng.shuffle(&mut o);
        o.truncate(n_adv);
        o
    } else {
        (0..n_adv).map(|_| others[rng.below(others.len())]).collect()
    }
}

/// Targeted L∞ PGD probes against the frozen snapshot.
pub fn gen_probes(snap: &Snapshot, forget: &LabeledDataset, cfg: &ProbeConfig) -> Result<ProbeSet> {
    let b = forget.class_count();
    if b < 2 {
        return Err(Error::DegenerateClasses);
    }
    if cfg.n_adv < 1 || cfg.steps < 1 {
        return Err(invalid("n_adv and steps must be at least 1"));
    }
    if !(cfg.radius > 0.0) || !(cfg.step_size >= 0.0) {
        return Err(invalid("radius must be positive and step_size nonnegative"));
    }
    if forget.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let params = snap.params();
    if forget.dim() != params.dims.d_in {
        return Err(Error::ShapeMismatch {
            op: "gen_probes",
            left: vec![forget.dim()],
            right: vec![params.dims.d_in],
        });
    }
    let mut rng = Rng::new(cfg.seed);
    let mut origin = Vec::new();
    let mut targets = Vec::new();
    let mut origin_labels = Vec::new();
    for (i, &y) in forget.labels().iter().enumerate() {
        for t in draw_targets(&mut rng, y, b, cfg.n_adv) {
            origin.push(i);
            targets.push(t);
            origin_labels.push(y);
        }
    }
    let x0 = forget.inputs().select_rows(&origin);
    let mut x = x0.clone();
    for _ in 0..cfg.steps {
        let tape = Tape::new();
        let m = params.bind(&tape, Blocks::NONE);
        let xv = tape.param(x.clone());
        let loss = m.logits_direct(xv)?.cross_entropy(&targets)?;
        let grads = tape.backward(loss)?;
        let g = grads.wrt_or_zeros(xv);
        for ((xi, &gi), &oi) in x.data_mut().iter_mut().zip(g.data()).zip(x0.data()) {
            let s = if gi > 0.0 {
                1.0
            } else if gi < 0.0 {
                -1.0
            } else {
                0.0
            };
            let mut v = *xi - cfg.step_size * s;
            v = v.clamp(oi - cfg.radius, oi + cfg.radius);
            if let Some((lo, hi)) = cfg.clamp {
                v = v.clamp(lo, hi);
            }
            *xi = v;
        }
    }
    Ok(ProbeSet {
        inputs: Some(x),
        d_in: forget.dim(),
        class_count: b,
        targets,
        origin,
        origin_labels,
        meta: AttackMeta {
            steps: cfg.steps,
            step_size: cfg.step_size,
            radius: cfg.radius,
            norm: "linf".into(),
            seed: cfg.seed,
        },
    })
}

/// Fraction of probes the snapshot classifies as their target.
pub fn probe_success_rate(snap: &Snapshot, probes: &ProbeSet) -> Result<f64> {
    let Some(x) = probes.inputs() else {
        return Ok(0.0);
    };
    let pred = argmax_rows(&logits_direct(snap.params(), x)?);
    let hits = pred
        .iter()
        .zip(&probes.targets)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / probes.len() as f64)
}

/// Dataset CSV with trailing `origin,target` columns and an attack header.
pub fn probes_to_csv(probes: &ProbeSet) -> String {
    let m = &probes.meta;
    let mut out = format!(
        "# n={} d={} b={}\n# attack steps={} step_size={:?} radius={:?} norm={} seed={}\n",
        probes.len(),
        probes.d_in,
        probes.class_count,
        m.steps,
        m.step_size,
        m.radius,
        m.norm,
        m.seed
    );
    if let Some(x) = probes.inputs() {
        for i in 0..probes.len() {
            let _ = write!(out, "{}", probes.origin_labels[i]);
            for v in x.row(i) {
                let _ = write!(out, ",{v:?}");
            }
            let _ = writeln!(out, ",{},{}", probes.origin[i], probes.targets[i]);
        }
    }
    out
}

pub fn save_probes_csv(probes: &ProbeSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, probes_to_csv(probes))?;
    Ok(())
}

pub fn probes_from_csv(text: &str) -> Result<ProbeSet> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let (n, d, b) = parse_header(header, hl + 1)?;
    let mut set = ProbeSet::empty(d, b);
    let mut data = Vec::with_capacity(n * d);
    for (i, line) in lines {
        if let Some(rest) = line.strip_prefix("# attack") {
            for tok in rest.split_whitespace() {
                let Some((k, v)) = tok.split_once('=') else {
                    continue;
                };
                let bad = || Error::Parse {
                    line: i + 1,
                    msg: format!("bad attack field `{tok}`"),
                };
                match k {
                    "steps" => set.meta.steps = v.parse().map_err(|_| bad())?,
                    "step_size" => set.meta.step_size = v.parse().map_err(|_| bad())?,
                    "radius" => set.meta.radius = v.parse().map_err(|_| bad())?,
                    "norm" => set.meta.norm = v.to_string(),
                    "seed" => set.meta.seed = v.parse().map_err(|_| bad())?,
                    _ => {}
                }
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let (label, values, tail) = parse_row(line, i + 1, d, 2)?;
        for c in [label, tail[1]] {
            if c >= b {
                return Err(Error::LabelOutOfRange { label: c, classes: b });
            }
        }
        set.origin_labels.push(label);
        set.origin.push(tail[0]);
        set.targets.push(tail[1]);
        data.extend(values);
    }
    if set.targets.len() != n {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header declares n={n} but file has {} rows", set.targets.len()),
        });
    }
    if n > 0 {
        set.inputs = Some(Tensor::matrix(n, d, data));
    }
    Ok(set)
}

pub fn load_probes_csv(path: impl AsRef<Path>) -> Result<ProbeSet> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    probes_from_csv(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::gen_gaussian_clusters;
    use crate::model::{snapshot, ModelDims, ModelParams};

    fn fixture() -> (Snapshot, LabeledDataset) {
        let p = ModelParams::init(ModelDims::default_for(4, 3), 1).unwrap();
        let d = gen_gaussian_clusters(3, 3, 4, 0.3, 2).unwrap();
        (snapshot(&p, "ori"), d)
    }

    #[test]
    fn count_law_and_target_validity() {
        let (s, d) = fixture();
        for n_adv in [1, 2, 5] {
            let cfg = ProbeConfig {
                n_adv,
                steps: 3,
                ..Default::default()
            };
            let p = gen_probes(&s, &d, &cfg).unwrap();
            assert_eq!(p.len(), d.len() * n_adv);
            for i in 0..p.len() {
                assert_ne!(p.targets[i], d.labels()[p.origin[i]]);
                assert_eq!(p.origin[i], i / n_adv);
            }
        }
    }

    #[test]
    fn tiny_radius_bounds_probes() {
        let (s, d) = fixture();
        let cfg = ProbeConfig {
            radius: 1e-4,
            steps: 10,
            ..Default::default()
        };
        let p = gen_probes(&s, &d, &cfg).unwrap();
        let x = p.inputs().unwrap();
        for i in 0..p.len() {
            for (a, b) in x.row(i).iter().zip(d.inputs().row(p.origin[i])) {
                assert!((a - b).abs() <= 1e-4 + 1e-12);
            }
        }
    }

    #[test]
    fn zero_counts_rejected() {
        let (s, d) = fixture();
        let bad = ProbeConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(gen_probes(&s, &d, &bad).is_err());
        let bad = ProbeConfig {
            n_adv: 0,
            ..Default::default()
        };
        assert!(gen_probes(&s, &d, &bad).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (s, d) = fixture();
        let p = gen_probes(&s, &d, &ProbeConfig {
            steps: 2,
            ..Default::default()
        })
        .unwrap();
        let back = probes_from_csv(&probes_to_csv(&p)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn null_attack_success_rate() {
        let (s, d) = fixture();
        let p = gen_probes(&s, &d, &ProbeConfig {
            step_size: 0.0,
            steps: 1,
            ..Default::default()
        })
        .unwrap();
        // unmoved probes: success equals the share of origins already predicted as target
        let pred = argmax_rows(&logits_direct(s.params(), d.inputs()).unwrap());
        let expect = (0..p.len()).filter(|&i| pred[p.origin[i]] == p.targets[i]).count() as f64
            / p.len() as f64;
        assert_eq!(probe_success_rate(&s, &p).unwrap(), expect);
    }
}
