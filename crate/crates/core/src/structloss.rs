//! Structure matrices and the structure-preservation losses.
//!
//! A structure matrix holds the affinities `S = V · Aᵀ` between unit
//! embeddings of the probe set and the anchors. The original structure comes
//! from the frozen snapshot without the projector; the unlearned structure
//! comes from the current model through the projector.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchor::AnchorSet;
use crate::diffcore::{softmax_rows, Gradients, Tape, Tensor, Var, EPS};
use crate::error::{Error, Result};
use crate::model::{features, Blocks, BoundModel, LayerTrace, ModelParams, Snapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Ori,
    Unl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrix {
    s: Tensor,
    pub provenance: Provenance,
}

impl StructureMatrix {
    pub fn new(s: Tensor, provenance: Provenance) -> Self {
        Self { s, provenance }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.s
    }

    pub fn probe_count(&self) -> usize {
        self.s.rows()
    }

    pub fn anchor_count(&self) -> usize {
        self.s.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.s.row(i)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# structure provenance={:?} rows={} cols={}\n",
            self.provenance,
            self.probe_count(),
            self.anchor_count()
        );
        for r in 0..self.probe_count() {
            let row: Vec<String> = self.row(r).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignAxis {
    #[default]
    PerProbeRow,
    PerAnchorColumn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignVariant {
    #[default]
    Cs,
    Mse,
    Kl,
    Wd,
    Mmd,
}

impl AlignVariant {
    pub const ALL: [AlignVariant; 5] = [
        AlignVariant::Cs,
        AlignVariant::Mse,
        AlignVariant::Kl,
        AlignVariant::Wd,
        AlignVariant::Mmd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AlignVariant::Cs => "CS",
            AlignVariant::Mse => "MSE",
            AlignVariant::Kl => "KL",
            AlignVariant::Wd => "WD",
            AlignVariant::Mmd => "MMD",
        }
    }
}

/// Per-parameter structural importance over ψ in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub values: Vec<f64>,
    pub probe_count: usize,
}

impl ImportanceVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
            probe_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# importance n={} probes={}\n",
            self.values.len(),
            self.probe_count
        );
        for v in &self.values {
            let _ = writeln!(out, "{v:?}");
        }
        out
    }
}

fn check_dim(v: &Tensor, anchors: &AnchorSet) -> Result<()> {
    if v.cols() != anchors.d() {
        return Err(Error::DimensionInconsistency {
            expected: anchors.d(),
            found: v.cols(),
            row: 0,
        });
    }
    Ok(())
}

/// `S = V · Aᵀ`.
pub fn compute_structure(
    v: &Tensor,
    anchors: &AnchorSet,
    provenance: Provenance,
) -> Result<StructureMatrix> {
    check_dim(v, anchors)?;
    let s = v.matmul(&anchors.matrix().transpose())?;
    Ok(StructureMatrix::new(s, provenance))
}

/// `S^ori` of the probe inputs under the snapshot (no projector).
pub fn original_structure(
    snap: &Snapshot,
    probe_inputs: &Tensor,
    anchors: &AnchorSet,
) -> Result<StructureMatrix> {
    compute_structure(&features(snap.params(), probe_inputs)?, anchors, Provenance::Ori)
}

/// Differentiable `V · Aᵀ` with the anchors held constant.
pub fn structure_var<'t>(v: Var<'t>, anchors: &AnchorSet) -> Result<Var<'t>> {
    let at = v.tape().constant(anchors.matrix().transpose());
    if v.value_ref().cols() != anchors.d() {
        return Err(Error::DimensionInconsistency {
            expected: anchors.d(),
            found: v.value_ref().cols(),
            row: 0,
        });
    }
    v.matmul(&at)
}

fn shape_check(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Negative mean cosine between matching rows (or columns) of the two
/// structures. `s_ori` is detached, so no gradient reaches it.
pub fn align_loss_var<'t>(s_ori: Var<'t>, s_unl: Var<'t>, axis: AlignAxis) -> Result<Var<'t>> {
    shape_check(&s_ori.value_ref(), &s_unl.value_ref(), "align_loss")?;
    let s_ori = s_ori.detach();
    let (a, b) = match axis {
        AlignAxis::PerProbeRow => (s_ori, s_unl),
        AlignAxis::PerAnchorColumn => (s_ori.transpose(), s_unl.transpose()),
    };
    Ok(a.row_cosine(&b, EPS)?.mean().neg())
}

/// Alignment objective by variant. `CS` honours `axis`; the other variants
/// compare probe rows.
pub fn variant_loss_var<'t>(
    kind: AlignVariant,
    s_ori: Var<'t>,
    s_unl: Var<'t>,
    axis: AlignAxis,
) -> Result<Var<'t>> {
    let so = s_ori.value();
    shape_check(&so, &s_unl.value_ref(), "align_loss_variant")?;
    let tape = s_unl.tape();
    let c = tape.constant(so.clone());
    match kind {
        AlignVariant::Cs => align_loss_var(c, s_unl, axis),
        AlignVariant::Mse => Ok(s_unl.sub(&c)?.square().mean()),
        AlignVariant::Kl => {
            let n = so.rows() as f64;
            let p = softmax_rows(&so);
            let logp = tape.constant(so.clone()).log_softmax_rows().value();
            let neg_entropy: f64 = p.data().iter().zip(logp.data()).map(|(a, b)| a * b).sum();
            let cross = tape.constant(p).mul(&s_unl.log_softmax_rows())?.sum();
            Ok(cross.scale(-1.0 / n).add_scalar(neg_entropy / n))
        }
        AlignVariant::Wd => {
            let sorted = tape.constant(so).sort_rows();
            Ok(s_unl.sort_rows().sub(&sorted)?.abs().mean())
        }
        AlignVariant::Mmd => {
            let sigma = median_pairwise_distance(&so);
            let gamma = -1.0 / (2.0 * sigma * sigma);
            let kxx = c.pairwise_sq_dist(&c)?.scale(gamma).exp().mean().item();
            let kyy = s_unl.pairwise_sq_dist(&s_unl)?.scale(gamma).exp().mean();
            let kxy = c.pairwise_sq_dist(&s_unl)?.scale(gamma).exp().mean();
            Ok(kyy.sub(&kxy.scale(2.0))?.add_scalar(kxx))
        }
    }
}

/// Median Euclidean distance over distinct row pairs; 1 when undefined or zero.
pub fn median_pairwise_distance(t: &Tensor) -> f64 {
    let n = t.rows();
    let mut d = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(
                t.row(i)
                    .iter()
                    .zip(t.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn eval_on_constants(
    s_ori: &StructureMatrix,
    s_unl: &StructureMatrix,
    f: impl for<'t> Fn(Var<'t>, Var<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    let tape = Tape::new();
    let a = tape.constant(s_ori.matrix().clone());
    let b = tape.constant(s_unl.matrix().clone());
    Ok(f(a, b)?.item())
}

/// Value of [`align_loss_var`] on fixed matrices.
pub fn align_loss(s_ori: &StructureMatrix, s_unl: &StructureMatrix, axis: AlignAxis) -> Result<f64> {
    eval_on_constants(s_ori, s_unl, |a, b| align_loss_var(a, b, axis))
}

/// Value of [`variant_loss_var`] on fixed matrices.
pub fn align_loss_variant(
    kind: AlignVariant,
    s_ori: &StructureMatrix,
    s_unl: &StructureMatrix,
) -> Result<f64> {
    eval_on_constants(s_ori, s_unl, |a, b| {
        variant_loss_var(kind, a, b, AlignAxis::PerProbeRow)
    })
}

/// `S^unl` of the current model on the tape: projected, normalized features
/// against the anchors.
pub fn unlearned_structure_var<'t>(
    m: &BoundModel<'t>,
    x: Var<'t>,
    anchors: &AnchorSet,
) -> Result<Var<'t>> {
    structure_var(m.projected_features(x)?, anchors)
}

/// Alignment loss of a single probe: `−cos(s_ori_row, S^unl row)`.
pub fn per_probe_align_loss(
    model: &ModelParams,
    x_s: &[f64],
    anchors: &AnchorSet,
    s_ori_row: &[f64],
) -> Result<f64> {
    let tape = Tape::new();
    let m = model.bind(&tape, Blocks::NONE);
    let x = tape.constant(Tensor::matrix(1, x_s.len(), x_s.to_vec()));
    let s = unlearned_structure_var(&m, x, anchors)?;
    let so = tape.constant(Tensor::matrix(1, s_ori_row.len(), s_ori_row.to_vec()));
    Ok(align_loss_var(so, s, AlignAxis::PerProbeRow)?.item())
}

/// Statistic accumulated over per-sample gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SampleStat {
    Abs,
    Square,
}

/// Mean over samples of `stat(∂L_i/∂θ)` for every affine layer in `layers`,
/// flattened in canonical order (weights row-major, then bias).
///
/// Valid whenever the total loss is a sum of per-row terms and rows do not
/// interact, which holds for every loss built from this crate's row-wise
/// model: the gradient of sample `i` for a weight `W[j][k]` is then
/// `input_i[j] · δ_i[k]`, where `δ_i` is row `i` of the pre-activation
/// gradient.
pub(crate) fn per_sample_stats(
    layers: &[LayerTrace<'_>],
    grads: &Gradients,
    samples: usize,
    stat: SampleStat,
) -> Vec<f64> {
    let f = |v: f64| match stat {
        SampleStat::Abs => v.abs(),
        SampleStat::Square => v * v,
    };
    let mut out = Vec::new();
    for l in layers {
        let a = l.input.value();
        let delta = grads.wrt_or_zeros(l.preact);
        let (fan_in, fan_out) = (a.cols(), delta.cols());
        let mut w = vec![0.0; fan_in * fan_out];
        let mut b = vec![0.0; fan_out];
        for i in 0..samples {
            let ai = a.row(i);
            let di = delta.row(i);
            for (j, &aj) in ai.iter().enumerate() {
                let wrow = &mut w[j * fan_out..(j + 1) * fan_out];
                for (o, &dk) in wrow.iter_mut().zip(di) {
                    *o += f(aj * dk);
                }
            }
            for (o, &dk) in b.iter_mut().zip(di) {
                *o += f(dk);
            }
        }
        let n = samples as f64;
        out.extend(w.into_iter().map(|v| v / n));
        out.extend(b.into_iter().map(|v| v / n));
    }
    out
}

/// `I_i = (1/N_s) Σ_s |∂ L_align(x_s) / ∂ψ_i|` at the current ψ, computed from
/// one batched backward pass.
pub fn structural_importance(
    model: &ModelParams,
    probe_inputs: &Tensor,
    anchors: &AnchorSet,
    s_ori: &StructureMatrix,
) -> Result<ImportanceVector> {
    let n = probe_inputs.rows();
    if s_ori.probe_count() != n {
        return Err(Error::ShapeMismatch {
            op: "structural_importance",
            left: vec![s_ori.probe_count()],
            right: vec![n],
        });
    }
    let tape = Tape::new();
    let m = model.bind(&tape, Blocks::PSI);
    let x = tape.constant(probe_inputs.clone());
    let (h, trace) = m.extract_traced(x)?;
    let v = m.project(h)?.l2_normalize_rows(EPS);
    let s = structure_var(v, anchors)?;
    let so = tape.constant(s_ori.matrix().clone());
    // sum of per-probe losses −cos_i
    let total = so.row_cosine(&s, EPS)?.sum().neg();
    let grads = tape.backward(total)?;
    Ok(ImportanceVector {
        values: per_sample_stats(&trace, &grads, n, SampleStat::Abs),
        probe_count: n,
    })
}

/// Reference route for [`structural_importance`]: one backward pass per probe.
pub fn structural_importance_per_probe(
    model: &ModelParams,
    probe_inputs: &Tensor,
    anchors: &AnchorSet,
    s_ori: &StructureMatrix,
) -> Result<ImportanceVector> {
    let n = probe_inputs.rows();
    let mut acc = vec![0.0; model.psi_len()];
    for i in 0..n {
        let tape = Tape::new();
        let m = model.bind(&tape, Blocks::PSI);
        let x = tape.constant(probe_inputs.select_rows(&[i]));
        let s = unlearned_structure_var(&m, x, anchors)?;
        let so = tape.constant(s_ori.matrix().select_rows(&[i]));
        let loss = align_loss_var(so, s, AlignAxis::PerProbeRow)?;
        let grads = tape.backward(loss)?;
        let g = m.gradients(&grads, model).flat_psi();
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v.abs();
        }
    }
    Ok(ImportanceVector {
        values: acc.into_iter().map(|v| v / n as f64).collect(),
        probe_count: n,
    })
}

/// `½ Σ_i I_i (ψ_i − ψ_i^ori)²` on the tape, with `I` constant.
pub fn reg_loss_var<'t>(
    m: &BoundModel<'t>,
    snap: &Snapshot,
    importance: &[f64],
) -> Result<Var<'t>> {
    let ori = snap.params();
    let expected: usize = ori.psi_len();
    if importance.len() != expected {
        return Err(Error::ShapeMismatch {
            op: "reg_loss",
            left: vec![importance.len()],
            right: vec![expected],
        });
    }
    let tape = m.phi.w.tape();
    let mut off = 0;
    let mut total: Option<Var<'t>> = None;
    for (bound, orig) in m.psi.iter().zip(&ori.psi) {
        for (var, t) in [(bound.w, &orig.w), (bound.b, &orig.b)] {
            let n = t.len();
            let weights = Tensor::new(t.shape().to_vec(), importance[off..off + n].to_vec())?;
            off += n;
            let term = var
                .sub(&tape.constant(t.clone()))?
                .square()
                .mul(&tape.constant(weights))?
                .sum();
            total = Some(match total {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
    }
    Ok(total.expect("extractor has at least one layer").scale(0.5))
}

/// Value of the structure-aware regularizer.
pub fn reg_loss(params: &ModelParams, snap: &Snapshot, importance: &ImportanceVector) -> Result<f64> {
    let delta = crate::model::param_sq_delta(params, snap)?;
    if importance.len() != delta.len() {
        return Err(Error::ShapeMismatch {
            op: "reg_loss",
            left: vec![importance.len()],
            right: vec![delta.len()],
        });
    }
    Ok(0.5 * importance.values.iter().zip(&delta).map(|(i, d)| i * d).sum::<f64>())
}

/// Mean absolute entry difference between two structures.
pub fn structural_collapse(s_ori: &StructureMatrix, s_t: &StructureMatrix) -> Result<f64> {
    shape_check(s_ori.matrix(), s_t.matrix(), "structural_collapse")?;
    let a = s_ori.matrix().data();
    let b = s_t.matrix().data();
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}
