//! StructGuard and the baseline unlearners.
//!
//! Every algorithm updates a copy of the model by plain gradient steps and
//! records one [`StepRecord`] per executed step. Only [`run_oracle`] receives
//! the retention set; the others see the snapshot, the forget set, the probe
//! set and the anchors.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::anchor::AnchorSet;
use crate::datakit::{LabeledDataset, RetainSet};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{
    argmax_rows, features, logits_direct, Block, Blocks, BoundAffine, BoundModel, ModelParams,
    Snapshot,
};
use crate::probe::ProbeSet;
use crate::structloss::{
    compute_structure, original_structure, per_sample_stats, reg_loss_var, structural_collapse,
    structural_importance, unlearned_structure_var, variant_loss_var, AlignAxis, AlignVariant,
    Provenance, SampleStat, StructureMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Structguard,
    Neggrad,
    Fisher,
    Rawp,
    Adv,
    L2ul,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Structguard,
        Method::Neggrad,
        Method::Fisher,
        Method::Rawp,
        Method::Adv,
        Method::L2ul,
        Method::Oracle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Structguard => "structguard",
            Method::Neggrad => "neggrad",
            Method::Fisher => "fisher",
            Method::Rawp => "rawp",
            Method::Adv => "adv",
            Method::L2ul => "l2ul",
            Method::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_del: f64,
    pub w_ret: f64,
    pub w_align: f64,
    pub w_reg: f64,
    pub w_cr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_del: 1.0,
            w_ret: 1.0,
            w_align: 1.0,
            w_reg: 1.0,
            w_cr: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticNet {
    pub l1: f64,
    pub l2: f64,
}

impl Default for ElasticNet {
    fn default() -> Self {
        Self { l1: 1e-3, l2: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorInit {
    /// Start from `p_ω(h) = h`, so the projected path initially agrees with
    /// the direct path.
    #[default]
    Identity,
    /// Keep whatever ω the model carries.
    Keep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub method: Method,
    pub steps: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub elastic_net: ElasticNet,
    pub align_axis: AlignAxis,
    pub align_variant: AlignVariant,
    /// Recompute structural importance every this many steps; 0 computes it
    /// once before the first step.
    pub importance_refresh: usize,
    pub stop_when_forgotten: bool,
    /// Consecutive fully-forgotten steps required before stopping.
    pub patience: usize,
    /// Damping strength of the Fisher baseline.
    pub fisher_lambda: f64,
    pub projector_init: ProjectorInit,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            method: Method::Structguard,
            steps: 200,
            lr: 0.05,
            weights: LossWeights::default(),
            elastic_net: ElasticNet::default(),
            align_axis: AlignAxis::PerProbeRow,
            align_variant: AlignVariant::Cs,
            importance_refresh: 1,
            stop_when_forgotten: true,
            patience: 5,
            fisher_lambda: 1.0,
            projector_init: ProjectorInit::Identity,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config {
                path: "unlearn.steps".into(),
                msg: "must be at least 1".into(),
            });
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config {
                path: "unlearn.lr".into(),
                msg: "must be a finite nonnegative real".into(),
            });
        }
        let w = &self.weights;
        for (name, v) in [
            ("w_del", w.w_del),
            ("w_ret", w.w_ret),
            ("w_align", w.w_align),
            ("w_reg", w.w_reg),
            ("w_cr", w.w_cr),
            ("elastic_net.l1", self.elastic_net.l1),
            ("elastic_net.l2", self.elastic_net.l2),
            ("fisher_lambda", self.fisher_lambda),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config {
                    path: format!("unlearn.{name}"),
                    msg: "must be finite and nonnegative".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_del: f64,
    pub l_ret: f64,
    pub l_align: f64,
    pub l_reg: f64,
    pub l_cr: f64,
    pub total: f64,
    /// Forget-set accuracy (direct path) after the update, in percent.
    pub forget_acc: f64,
    /// Structural collapse after the update.
    pub collapse: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnlearnTrace {
    pub records: Vec<StepRecord>,
    pub stopped_early: bool,
}

impl UnlearnTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Arithmetic mean of the per-step collapse.
    pub fn mean_collapse(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.collapse).sum::<f64>() / self.records.len() as f64
    }

    pub const CSV_HEADER: &'static str =
        "step,l_del,l_ret,l_align,l_reg,l_cr,total,forget_acc,collapse,wall_ms";

    pub fn to_csv(&self, include_wall_time: bool) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let wall = if include_wall_time { r.wall_ms } else { 0.0 };
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                r.step, r.l_del, r.l_ret, r.l_align, r.l_reg, r.l_cr, r.total, r.forget_acc,
                r.collapse, wall
            ));
        }
        out
    }
}

/// Everything an unlearner may read besides the model itself.
#[derive(Debug, Clone)]
pub struct UnlearnContext<'a> {
    pub snapshot: &'a Snapshot,
    pub forget: &'a LabeledDataset,
    pub probes: &'a ProbeSet,
    pub anchors: &'a AnchorSet,
}

/// Fixed diagnostics shared by all loops: `S^ori` of the probes and the
/// forget labels.
struct Monitor {
    s_ori: Option<StructureMatrix>,
}

impl Monitor {
    fn new(ctx: &UnlearnContext<'_>) -> Result<Self> {
        let s_ori = match ctx.probes.inputs() {
            Some(x) if ctx.anchors.d() == ctx.snapshot.params().dims.d => {
                Some(original_structure(ctx.snapshot, x, ctx.anchors)?)
            }
            _ => None,
        };
        Ok(Self { s_ori })
    }

    /// Collapse of the model's unprojected probe structure against `S^ori`.
    fn collapse(&self, ctx: &UnlearnContext<'_>, model: &ModelParams) -> Result<f64> {
        match (&self.s_ori, ctx.probes.inputs()) {
            (Some(s_ori), Some(x)) => {
                let s_t = compute_structure(&features(model, x)?, ctx.anchors, Provenance::Unl)?;
                structural_collapse(s_ori, &s_t)
            }
            _ => Ok(0.0),
        }
    }
}

/// Percentage of rows whose direct-path argmax equals the label.
pub fn forget_accuracy(model: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    let pred = argmax_rows(&logits_direct(model, data.inputs())?);
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / data.len() as f64)
}

/// Terms of one step's objective. Unused terms stay zero.
#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub l_del: f64,
    pub l_ret: f64,
    pub l_align: f64,
    pub l_reg: f64,
    pub l_cr: f64,
    pub total: f64,
}

struct Loop<'c, 'a> {
    ctx: &'c UnlearnContext<'a>,
    cfg: &'c UnlearnConfig,
    monitor: Monitor,
    trace: UnlearnTrace,
    forgotten_streak: usize,
    started: Instant,
}

impl<'c, 'a> Loop<'c, 'a> {
    fn new(ctx: &'c UnlearnContext<'a>, cfg: &'c UnlearnConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ctx,
            cfg,
            monitor: Monitor::new(ctx)?,
            trace: UnlearnTrace::default(),
            forgotten_streak: 0,
            started: Instant::now(),
        })
    }

    /// Records a finished step; returns `true` when the loop should stop.
    fn record(&mut self, step: usize, t: LossTerms, model: &ModelParams) -> Result<bool> {
        if !t.total.is_finite() || !model.is_finite() {
            return Err(Error::Divergence { step });
        }
        // nothing left to remember when the forget set is empty
        let forget_acc = if self.ctx.forget.is_empty() {
            0.0
        } else {
            forget_accuracy(model, self.ctx.forget)?
        };
        let collapse = self.monitor.collapse(self.ctx, model)?;
        self.trace.records.push(StepRecord {
            step,
            l_del: t.l_del,
            l_ret: t.l_ret,
            l_align: t.l_align,
            l_reg: t.l_reg,
            l_cr: t.l_cr,
            total: t.total,
            forget_acc,
            collapse,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
        });
        if forget_acc == 0.0 {
            self.forgotten_streak += 1;
        } else {
            self.forgotten_streak = 0;
        }
        let stop = self.cfg.stop_when_forgotten && self.forgotten_streak >= self.cfg.patience.max(1);
        if stop && step < self.cfg.steps {
            self.trace.stopped_early = true;
        }
        Ok(stop)
    }
}

fn add_weighted<'t>(acc: Option<Var<'t>>, term: Var<'t>, w: f64) -> Result<Option<Var<'t>>> {
    let scaled = term.scale(w);
    Ok(Some(match acc {
        Some(a) => a.add(&scaled)?,
        None => scaled,
    }))
}

fn descend(model: &mut ModelParams, m: &BoundModel<'_>, tape: &Tape, total: Var<'_>, lr: f64, blocks: Blocks) -> Result<()> {
    let grads = tape.backward(total)?;
    let g = m.gradients(&grads, model);
    model.axpy(-lr, &g, blocks);
    Ok(())
}

/// `λ1 Σ|φ| + (λ2/2) Σφ²` over the classifier weights and bias.
pub fn elastic_net(phi: &crate::model::Affine, en: &ElasticNet) -> f64 {
    let all = phi.w.data().iter().chain(phi.b.data());
    let (l1, l2) = all.fold((0.0, 0.0), |(a, b), &v| (a + v.abs(), b + v * v));
    en.l1 * l1 + 0.5 * en.l2 * l2
}

pub fn elastic_net_var<'t>(phi: &BoundAffine<'t>, en: &ElasticNet) -> Result<Var<'t>> {
    let part = |v: Var<'t>| -> Result<Var<'t>> {
        v.abs().sum().scale(en.l1).add(&v.square().sum().scale(0.5 * en.l2))
    };
    part(phi.w)?.add(&part(phi.b)?)
}

fn prepare(model: &ModelParams, ctx: &UnlearnContext<'_>) -> Result<ModelParams> {
    if !model.same_structure(ctx.snapshot.params()) {
        return Err(Error::StructureMismatch(
            "model and snapshot differ in structure".into(),
        ));
    }
    if ctx.forget.dim() != model.dims.d_in {
        return Err(Error::ShapeMismatch {
            op: "forget inputs",
            left: vec![ctx.forget.dim()],
            right: vec![model.dims.d_in],
        });
    }
    Ok(model.clone())
}

/// Builds the StructGuard objective on `m`'s tape. Zero-weight terms are
/// skipped; `probes` pairs the probe inputs with their `S^ori`, and
/// `importance` is required when `w_reg > 0`. Returns `None` when every
/// weight is zero.
pub fn structguard_objective<'t>(
    m: &BoundModel<'t>,
    ctx: &UnlearnContext<'_>,
    cfg: &UnlearnConfig,
    probes: Option<(&Tensor, &StructureMatrix)>,
    importance: Option<&[f64]>,
) -> Result<(Option<Var<'t>>, LossTerms)> {
    let tape = m.phi.w.tape();
    let w = cfg.weights;
    let mut t = LossTerms::default();
    let mut total = None;

    let xf = tape.constant(ctx.forget.inputs().clone());
    let l_del = m.logits_direct(xf)?.cross_entropy(ctx.forget.labels())?.neg();
    t.l_del = l_del.item();
    if w.w_del > 0.0 {
        total = add_weighted(total, l_del, w.w_del)?;
    }
    if let Some((x, s_ori)) = probes {
        let xs = tape.constant(x.clone());
        let h = m.extract(xs)?;
        let z = m.project(h)?;
        if w.w_ret > 0.0 {
            let l_ret = m.classify(z)?.cross_entropy(&ctx.probes.targets)?;
            t.l_ret = l_ret.item();
            total = add_weighted(total, l_ret, w.w_ret)?;
        }
        if w.w_align > 0.0 {
            let s_unl = crate::structloss::structure_var(
                z.l2_normalize_rows(crate::diffcore::EPS),
                ctx.anchors,
            )?;
            let so = tape.constant(s_ori.matrix().clone());
            let l_align = variant_loss_var(cfg.align_variant, so, s_unl, cfg.align_axis)?;
            t.l_align = l_align.item();
            total = add_weighted(total, l_align, w.w_align)?;
        }
    }
    if w.w_reg > 0.0 {
        let imp = importance.ok_or_else(|| crate::error::invalid("w_reg > 0 needs importance"))?;
        let l_reg = reg_loss_var(m, ctx.snapshot, imp)?;
        t.l_reg = l_reg.item();
        total = add_weighted(total, l_reg, w.w_reg)?;
    }
    if w.w_cr > 0.0 {
        let l_cr = elastic_net_var(&m.phi, &cfg.elastic_net)?;
        t.l_cr = l_cr.item();
        total = add_weighted(total, l_cr, w.w_cr)?;
    }
    if let Some(v) = &total {
        t.total = v.item();
    }
    Ok((total, t))
}

/// The full structure-preserving objective
/// `w_del·L_del + w_ret·L_ret + w_align·L_align + w_reg·L_reg + w_cr·EN(φ)`,
/// minimized over {ψ, ω, φ}.
pub fn run_structguard(
    model: &ModelParams,
    ctx: &UnlearnContext<'_>,
    cfg: &UnlearnConfig,
) -> Result<(ModelParams, UnlearnTrace)> {
    let mut p = prepare(model, ctx)?;
    if ctx.anchors.d() != p.dims.d {
        return Err(Error::ConfigMismatch(format!(
            "anchor dimension {} differs from embedding dimension {}",
            ctx.anchors.d(),
            p.dims.d
        )));
    }
    if cfg.projector_init == ProjectorInit::Identity {
        p.set_projector_identity();
    }
    let w = cfg.weights;
    let probes_x = ctx.probes.inputs().cloned();
    let s_ori = match &probes_x {
        Some(x) => Some(original_structure(ctx.snapshot, x, ctx.anchors)?),
        None => None,
    };
    let mut lp = Loop::new(ctx, cfg)?;
    let mut importance: Option<Vec<f64>> = None;
    for step in 1..=cfg.steps {
        if w.w_reg > 0.0 {
            let due = match cfg.importance_refresh {
                0 => importance.is_none(),
                n => importance.is_none() || (step - 1) % n == 0,
            };
            if due {
                importance = Some(match (&probes_x, &s_ori) {
                    (Some(x), Some(s)) => structural_importance(&p, x, ctx.anchors, s)?.values,
                    _ => vec![0.0; p.psi_len()],
                });
            }
        }
        let tape = Tape::new();
        let m = p.bind(&tape, Blocks::ALL);
        let (total, t) = structguard_objective(
            &m,
            ctx,
            cfg,
            probes_x.as_ref().zip(s_ori.as_ref()),
            importance.as_deref(),
        )?;
        if let Some(total) = total {
            if !t.total.is_finite() {
                return Err(Error::Divergence { step });
            }
            descend(&mut p, &m, &tape, total, cfg.lr, Blocks::ALL)?;
        }
        if lp.record(step, t, &p)? {
            break;
        }
    }
    Ok((p, lp.trace))
}

/// Gradient ascent on the forget cross-entropy over {ψ, φ}.
pub fn run_neggrad(
    model: &ModelParams,
    ctx: &UnlearnContext<'_>,
    cfg: &UnlearnConfig,
) -> Result<(ModelParams, UnlearnTrace)> {
    run_ascent(model, ctx, cfg, false, None)
}

/// Forget ascent plus direct-path retention on the adversarial probes.
pub fn run_adv(
    model: &ModelParams,
    ctx: &UnlearnContext<'_>,
    cfg: &UnlearnConfig,
) -> Result<(ModelParams, UnlearnTrace)> {
    run_ascent(model, ctx, cfg, true, None)
}

/// `J_i = mean over D_f of |∂CE/∂ψ_i|` (forget-sensitivity importance).
pub fn forget_sensitivity(model: &ModelParams, forget: &LabeledDataset) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let m = model.bind(&tape, Blocks::PSI);
    let x = tape.constant(forget.inputs().clone());
    let (h, trace) = m.extract_traced(x)?;
    let total = m.classify(h)?.cross_entropy_rows(forget.labels())?.sum();
    let grads = tape.backward(total)?;
    Ok(per_sample_stats(&trace, &grads, forget.len(), SampleStat::Abs))
}

/// Adv objective plus `½ Σ J_i (ψ_i − ψ_i^ori)²` with forget-sensitivity
/// importance `J`, weighted by `w_reg`.
pub fn run_l2ul(
    model: &ModelParams,
    ctx: &UnlearnContext<'_>,
    cfg: &UnlearnConfig,
) -> Result<(ModelParams, UnlearnTrace)> {
    let j = forget_sensitivity(ctx.snapshot.params(), ctx.forget)?;
    run_ascent(model, ctx, cfg, true, Some(j))
}

fn run_ascent(
    model: &ModelParams,
    ctx: &UnlearnContext<'_>,
    cfg: &UnlearnConfig,
    retain_probes: bool,
    penalty: Option<Vec<f64>>,
) -> Result<(ModelParams, UnlearnTrace)> {
    let mut p = prepare(model, ctx)?;
    let mut lp = Loop::new(ctx, cfg)?;
    for step in 1..=cfg.steps {
        let tape = Tape::new();
        let m = p.bind(&tape, Blocks::BACKBONE);
        let mut t = LossTerms::default();
        let xf = tape.constant(ctx.forget.inputs().clone());
        let l_del = m.logits_direct(xf)?.cross_entropy(ctx.forget.labels())?.neg();
        t.l_del = l_del.item();
        let mut total = l_del;
        if retain_probes {
            if let Some(x) = ctx.probes.inputs() {
                let xs = tape.constant(x.clone());
                let l_ret = m.logits_direct(xs)?.cross_entropy(&ctx.probes.targets)?;
                t.l_ret = l_ret.item();
                total = total.add(&l_ret)?;
            }
        }
        if let Some(j) = &penalty {
            if cfg.weights.w_reg > 0.0 {
                let l_reg = reg_loss_var(&m, ctx.snapshot, j)?;
                t.l_reg = l_reg.item();
                total = total.add(&l_reg.scale(cfg.weights.w_reg))?;
            }
        }
        t.total = total.item();
        if !t.total.is_finite() {
            return Err(Error::Divergence { step });
        }
        descend(&mut p, &m, &tape, total, cfg.lr, Blocks::BACKBONE)?;
        if lp.record(step, t, &p)? {
            break;
        }
    }
    Ok((p, lp.trace))
}

/// Diagonal Fisher proxy `F_i = mean over D_f of (∂CE/∂θ_i)²` over {ψ, φ},
/// in canonical order (ψ then φ).
pub fn fisher_diagonal(model: &ModelParams, forget: &LabeledDataset) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let m = model.bind(&tape, Blocks::BACKBONE);
    let x = tape.constant(forget.inputs().clone());
    let (h, mut trace) = m.extract_traced(x)?;
    let logits = m.classify(h)?;
    trace.push(crate::model::LayerTrace {
        input: h,
        preact: logits,
    });
    let total = logits.cross_entropy_rows(forget.labels())?.sum();
    let grads = tape.backward(total)?;
    Ok(per_sample_stats(&trace, &grads, forget.len(), SampleStat::Square))
}

/// Repeated multiplicative damping `θ_i ← θ_i / (1 + λ F_i / max F)`.
pub fn run_fisher(
    model: &ModelParams,
    ctx: &UnlearnContext<'_>,
    cfg: &UnlearnConfig,
) -> Result<(ModelParams, UnlearnTrace)> {
    let mut p = prepare(model, ctx)?;
    let mut lp = Loop::new(ctx, cfg)?;
    for step in 1..=cfg.steps {
        let f = fisher_diagonal(&p, ctx.forget)?;
        let max_f = f.iter().cloned().fold(0.0, f64::max);
        let t = LossTerms {
            l_del: -crate::model::logits_direct(&p, ctx.forget.inputs())
                .and_then(|l| ce_value(&l, ctx.forget.labels()))?,
            ..Default::default()
        };
        if max_f > 0.0 && cfg.fisher_lambda > 0.0 {
            let mut off = 0;
            for (blk, tensor) in p.tensors_mut() {
                if blk == Block::Omega {
                    continue;
                }
                for v in tensor.data_mut() {
                    *v /= 1.0 + cfg.fisher_lambda * f[off] / max_f;
                    off += 1;
                }
            }
        }
        let t = LossTerms { total: t.l_del, ..t };
        if lp.record(step, t, &p)? {
            break;
        }
    }
    Ok((p, lp.trace))
}

fn ce_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    Ok(tape.constant(logits.clone()).cross_entropy(labels)?.item())
}

/// Repeated weight perturbation along the forget-loss ascent direction. Each
/// step moves θ = {ψ, φ} by exactly `lr·‖θ‖` in L2 norm (zero when the
/// gradient vanishes); perturbations accumulate.
pub fn run_rawp(
    model: &ModelParams,
    ctx: &UnlearnContext<'_>,
    cfg: &UnlearnConfig,
) -> Result<(ModelParams, UnlearnTrace)> {
    run_rawp_with_norms(model, ctx, cfg).map(|(p, t, _)| (p, t))
}

/// As [`run_rawp`], also returning `(applied norm, allowed radius)` per step.
pub fn run_rawp_with_norms(
    model: &ModelParams,
    ctx: &UnlearnContext<'_>,
    cfg: &UnlearnConfig,
) -> Result<(ModelParams, UnlearnTrace, Vec<(f64, f64)>)> {
    let mut p = prepare(model, ctx)?;
    let mut lp = Loop::new(ctx, cfg)?;
    let mut norms = Vec::new();
    for step in 1..=cfg.steps {
        let tape = Tape::new();
        let m = p.bind(&tape, Blocks::BACKBONE);
        let xf = tape.constant(ctx.forget.inputs().clone());
        let ce = m.logits_direct(xf)?.cross_entropy(ctx.forget.labels())?;
        let t = LossTerms {
            l_del: -ce.item(),
            total: -ce.item(),
            ..Default::default()
        };
        let grads = tape.backward(ce)?;
        let g = m.gradients(&grads, &p);
        let gnorm = g.norm(Blocks::BACKBONE);
        let radius = cfg.lr * p.norm(Blocks::BACKBONE);
        let applied = if gnorm > 0.0 && radius > 0.0 {
            p.axpy(radius / gnorm, &g, Blocks::BACKBONE);
            radius
        } else {
            0.0
        };
        norms.push((applied, radius));
        if lp.record(step, t, &p)? {
            break;
        }
    }
    Ok((p, lp.trace, norms))
}

/// Retraining reference from a fresh model: descends retain cross-entropy
/// while pushing forget samples off their labels with the bounded term
/// `mean −log(1 − p_y)` (weighted by `w_del`). Reads the retention set once
/// per step. Runs all `steps` without early stopping.
pub fn run_oracle(
    fresh: &ModelParams,
    retain: &RetainSet,
    ctx: &UnlearnContext<'_>,
    cfg: &UnlearnConfig,
) -> Result<(ModelParams, UnlearnTrace)> {
    let mut p = fresh.clone();
    let mut cfg = cfg.clone();
    cfg.stop_when_forgotten = false;
    let mut lp = Loop::new(ctx, &cfg)?;
    for step in 1..=cfg.steps {
        let tape = Tape::new();
        let m = p.bind(&tape, Blocks::BACKBONE);
        let r = retain.read();
        let xr = tape.constant(r.inputs().clone());
        let l_ret = m.logits_direct(xr)?.cross_entropy(r.labels())?;
        let mut t = LossTerms {
            l_ret: l_ret.item(),
            ..Default::default()
        };
        let mut total = l_ret;
        if !ctx.forget.is_empty() && cfg.weights.w_del > 0.0 {
            let xf = tape.constant(ctx.forget.inputs().clone());
            let l_del = m
                .logits_direct(xf)?
                .complement_nll_rows(ctx.forget.labels())?
                .mean();
            t.l_del = l_del.item();
            total = total.add(&l_del.scale(cfg.weights.w_del))?;
        }
        t.total = total.item();
        if !t.total.is_finite() {
            return Err(Error::Divergence { step });
        }
        descend(&mut p, &m, &tape, total, cfg.lr, Blocks::BACKBONE)?;
        if lp.record(step, t, &p)? {
            break;
        }
    }
    Ok((p, lp.trace))
}

/// Dispatches on `cfg.method`. `fresh` and `retain` are used only by the
/// oracle.
pub fn run_method(
    model: &ModelParams,
    fresh: Option<&ModelParams>,
    retain: Option<&RetainSet>,
    ctx: &UnlearnContext<'_>,
    cfg: &UnlearnConfig,
) -> Result<(ModelParams, UnlearnTrace)> {
    match cfg.method {
        Method::Structguard => run_structguard(model, ctx, cfg),
        Method::Neggrad => run_neggrad(model, ctx, cfg),
        Method::Fisher => run_fisher(model, ctx, cfg),
        Method::Rawp => run_rawp(model, ctx, cfg),
        Method::Adv => run_adv(model, ctx, cfg),
        Method::L2ul => run_l2ul(model, ctx, cfg),
        Method::Oracle => {
            let retain = retain.ok_or_else(|| {
                Error::ConfigMismatch("oracle requires the retention set".into())
            })?;
            let fresh = fresh.ok_or_else(|| {
                Error::ConfigMismatch("oracle requires a fresh initialization".into())
            })?;
            run_oracle(fresh, retain, ctx, cfg)
        }
    }
}

/// `S^unl` of a model on the probes as a plain matrix (projected path).
pub fn unlearned_structure(
    model: &ModelParams,
    probe_inputs: &Tensor,
    anchors: &AnchorSet,
) -> Result<StructureMatrix> {
    let tape = Tape::new();
    let m = model.bind(&tape, Blocks::NONE);
    let x = tape.constant(probe_inputs.clone());
    Ok(StructureMatrix::new(
        unlearned_structure_var(&m, x, anchors)?.value(),
        Provenance::Unl,
    ))
}
