//! Extractor / projector / classifier model family.
//!
//! `f = h_φ ∘ g_ψ` on the direct path and `h_φ ∘ p_ω ∘ g_ψ` on the projected
//! path. The extractor is a stack of affine+ReLU layers ending at width `d`,
//! the projector is exactly two affine layers with a ReLU between them
//! (`d → d → d`), and the classifier is a single affine map `d → b`.
//!
//! Canonical flattening order (used by checkpoints, importance vectors and
//! `param_sq_delta`): blocks in the order ψ, ω, φ; within a block, layers in
//! forward order; within a layer, the weight matrix (`in × out`, row-major)
//! followed by the bias vector.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datakit::LabeledDataset;
use crate::diffcore::{Gradients, Tape, Tensor, Var, EPS};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub d: usize,
    pub b: usize,
}

impl ModelDims {
    /// Extractor `d_in → 32 → 16`, classifier to `b`.
    pub fn default_for(d_in: usize, b: usize) -> Self {
        Self {
            d_in,
            hidden: vec![32],
            d: 16,
            b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d == 0 || self.b == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidDims(format!("{self:?}")));
        }
        Ok(())
    }

    fn extractor_widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_in];
        w.extend(&self.hidden);
        w.push(self.d);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    /// `in × out`.
    pub w: Tensor,
    /// Length `out`.
    pub b: Tensor,
}

impl Affine {
    fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let b = (0..fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
        Self {
            w: Tensor::matrix(fan_in, fan_out, w),
            b: Tensor::vector(b),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut w = Tensor::zeros(&[n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = 1.0;
        }
        Self {
            w,
            b: Tensor::zeros(&[n]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[fan_in, fan_out]),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: self.w.zeros_like(),
            b: self.b.zeros_like(),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.matmul(&self.w)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(self.b.data()) {
                *o += b;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Psi,
    Omega,
    Phi,
}

/// Which parameter blocks a computation differentiates and updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocks {
    pub psi: bool,
    pub omega: bool,
    pub phi: bool,
}

impl Blocks {
    pub const ALL: Blocks = Blocks {
        psi: true,
        omega: true,
        phi: true,
    };
    /// θ = {ψ, φ}.
    pub const BACKBONE: Blocks = Blocks {
        psi: true,
        omega: false,
        phi: true,
    };
    pub const PSI: Blocks = Blocks {
        psi: true,
        omega: false,
        phi: false,
    };
    pub const NONE: Blocks = Blocks {
        psi: false,
        omega: false,
        phi: false,
    };

    pub fn contains(&self, block: Block) -> bool {
        match block {
            Block::Psi => self.psi,
            Block::Omega => self.omega,
            Block::Phi => self.phi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub psi: Vec<Affine>,
    pub omega: Vec<Affine>,
    pub phi: Affine,
}

impl ModelParams {
    /// Seeded uniform initialization in `±1/√fan_in` for every layer.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = Rng::new(seed);
        let widths = dims.extractor_widths();
        let psi = widths
            .windows(2)
            .map(|w| Affine::init(w[0], w[1], &mut rng))
            .collect();
        let omega = vec![
            Affine::init(dims.d, dims.d, &mut rng),
            Affine::init(dims.d, dims.d, &mut rng),
        ];
        let phi = Affine::init(dims.d, dims.b, &mut rng);
        Ok(Self {
            dims,
            psi,
            omega,
            phi,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            psi: self.psi.iter().map(Affine::zeros_like).collect(),
            omega: self.omega.iter().map(Affine::zeros_like).collect(),
            phi: self.phi.zeros_like(),
        }
    }

    /// Sets ω so that `p_ω(h) = h` for every nonnegative `h`.
    pub fn set_projector_identity(&mut self) {
        let d = self.dims.d;
        self.omega = vec![Affine::identity(d), Affine::identity(d)];
    }

    /// Every parameter tensor in canonical order, tagged by block.
    pub fn tensors(&self) -> Vec<(Block, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.psi {
            out.push((Block::Psi, &l.w));
            out.push((Block::Psi, &l.b));
        }
        for l in &self.omega {
            out.push((Block::Omega, &l.w));
            out.push((Block::Omega, &l.b));
        }
        out.push((Block::Phi, &self.phi.w));
        out.push((Block::Phi, &self.phi.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(Block, &mut Tensor)> {
        let mut out = Vec::new();
        for l in &mut self.psi {
            out.push((Block::Psi, &mut l.w));
            out.push((Block::Psi, &mut l.b));
        }
        for l in &mut self.omega {
            out.push((Block::Omega, &mut l.w));
            out.push((Block::Omega, &mut l.b));
        }
        out.push((Block::Phi, &mut self.phi.w));
        out.push((Block::Phi, &mut self.phi.b));
        out
    }

    /// Concatenated values of one block in canonical order.
    pub fn flatten(&self, block: Block) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .filter(|(b, _)| *b == block)
            .flat_map(|(_, t)| t.data().to_vec())
            .collect()
    }

    pub fn flat_psi(&self) -> Vec<f64> {
        self.flatten(Block::Psi)
    }

    pub fn psi_len(&self) -> usize {
        self.psi.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn set_flat(&mut self, block: Block, values: &[f64]) -> Result<()> {
        let mut tensors: Vec<&mut Tensor> = self
            .tensors_mut()
            .into_iter()
            .filter(|(b, _)| *b == block)
            .map(|(_, t)| t)
            .collect();
        let total: usize = tensors.iter().map(|t| t.len()).sum();
        if total != values.len() {
            return Err(Error::StructureMismatch(format!(
                "{block:?} block has {total} values, got {}",
                values.len()
            )));
        }
        let mut off = 0;
        for t in tensors.iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `self += alpha * other` restricted to `blocks`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams, blocks: Blocks) {
        for ((blk, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            if blocks.contains(blk) {
                a.axpy(alpha, b);
            }
        }
    }

    /// L2 norm over the selected blocks.
    pub fn norm(&self, blocks: Blocks) -> f64 {
        self.tensors()
            .into_iter()
            .filter(|(b, _)| blocks.contains(*b))
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn same_structure(&self, other: &ModelParams) -> bool {
        self.dims == other.dims
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|((_, a), (_, b))| a.shape() == b.shape())
    }

    /// Places every parameter on `tape`; blocks outside `trainable` become
    /// constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: Blocks) -> BoundModel<'t> {
        let leaf = |t: &Tensor, train: bool| {
            if train {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layer = |l: &Affine, train: bool| BoundAffine {
            w: leaf(&l.w, train),
            b: leaf(&l.b, train),
        };
        BoundModel {
            psi: self.psi.iter().map(|l| layer(l, trainable.psi)).collect(),
            omega: self.omega.iter().map(|l| layer(l, trainable.omega)).collect(),
            phi: layer(&self.phi, trainable.phi),
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&Checkpoint::from(self))?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.display().to_string()));
        }
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ck.into_params()
    }
}

/// On-disk checkpoint layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dims: ModelDims,
    pub psi: Vec<f64>,
    pub omega: Vec<f64>,
    pub phi: Vec<f64>,
}

impl From<&ModelParams> for Checkpoint {
    fn from(p: &ModelParams) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dims: p.dims.clone(),
            psi: p.flatten(Block::Psi),
            omega: p.flatten(Block::Omega),
            phi: p.flatten(Block::Phi),
        }
    }
}

impl Checkpoint {
    pub fn into_params(self) -> Result<ModelParams> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(invalid(format!(
                "unsupported checkpoint format_version {}",
                self.format_version
            )));
        }
        let mut p = ModelParams::init(self.dims, 0)?;
        p.set_flat(Block::Psi, &self.psi)?;
        p.set_flat(Block::Omega, &self.omega)?;
        p.set_flat(Block::Phi, &self.phi)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAffine<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

/// Extractor layer input and pre-activation, kept for per-sample gradients.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace<'t> {
    pub input: Var<'t>,
    pub preact: Var<'t>,
}

/// A model whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel<'t> {
    pub psi: Vec<BoundAffine<'t>>,
    pub omega: Vec<BoundAffine<'t>>,
    pub phi: BoundAffine<'t>,
}

impl<'t> BoundModel<'t> {
    /// `g_ψ(x)`, unnormalized.
    pub fn extract(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.extract_traced(x)?.0)
    }

    pub fn extract_traced(&self, x: Var<'t>) -> Result<(Var<'t>, Vec<LayerTrace<'t>>)> {
        let mut h = x;
        let mut trace = Vec::with_capacity(self.psi.len());
        for l in &self.psi {
            let z = h.affine(&l.w, &l.b)?;
            trace.push(LayerTrace { input: h, preact: z });
            h = z.relu();
        }
        Ok((h, trace))
    }

    /// `p_ω(h)`.
    pub fn project(&self, h: Var<'t>) -> Result<Var<'t>> {
        let z = h.affine(&self.omega[0].w, &self.omega[0].b)?.relu();
        z.affine(&self.omega[1].w, &self.omega[1].b)
    }

    /// `h_φ(h)`.
    pub fn classify(&self, h: Var<'t>) -> Result<Var<'t>> {
        h.affine(&self.phi.w, &self.phi.b)
    }

    pub fn logits_direct(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.classify(self.extract(x)?)
    }

    pub fn logits_projected(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.classify(self.project(self.extract(x)?)?)
    }

    pub fn features(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.extract(x)?.l2_normalize_rows(EPS))
    }

    pub fn projected_features(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.project(self.extract(x)?)?.l2_normalize_rows(EPS))
    }

    /// Collects gradients into a parameter-shaped container; parameters that
    /// received no gradient are zero.
    pub fn gradients(&self, grads: &Gradients, like: &ModelParams) -> ModelParams {
        let mut out = like.zeros_like();
        let layer = |dst: &mut Affine, src: &BoundAffine<'t>| {
            if let Some(g) = grads.wrt(src.w) {
                dst.w = g.clone();
            }
            if let Some(g) = grads.wrt(src.b) {
                dst.b = g.clone();
            }
        };
        for (d, s) in out.psi.iter_mut().zip(&self.psi) {
            layer(d, s);
        }
        for (d, s) in out.omega.iter_mut().zip(&self.omega) {
            layer(d, s);
        }
        layer(&mut out.phi, &self.phi);
        out
    }
}

fn check_width(params: &ModelParams, x: &Tensor) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != params.dims.d_in {
        return Err(Error::ShapeMismatch {
            op: "model input",
            left: x.shape().to_vec(),
            right: vec![params.dims.d_in],
        });
    }
    Ok(())
}

fn extract_plain(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    check_width(params, x)?;
    let mut h = x.clone();
    for l in &params.psi {
        h = l.apply(&h)?.map(|v| v.max(0.0));
    }
    Ok(h)
}

fn project_plain(params: &ModelParams, h: &Tensor) -> Result<Tensor> {
    let z = params.omega[0].apply(h)?.map(|v| v.max(0.0));
    params.omega[1].apply(&z)
}

fn normalize_rows(mut t: Tensor) -> Tensor {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Unnormalized extractor output `g_ψ(x)`.
pub fn extractor_output(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    extract_plain(params, x)
}

/// `norm(g_ψ(x))`.
pub fn features(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    Ok(normalize_rows(extract_plain(params, x)?))
}

/// `norm(p_ω(g_ψ(x)))`.
pub fn projected_features(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    Ok(normalize_rows(project_plain(params, &extract_plain(params, x)?)?))
}

/// `h_φ(g_ψ(x))`.
pub fn logits_direct(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    params.phi.apply(&extract_plain(params, x)?)
}

/// `h_φ(p_ω(g_ψ(x)))`.
pub fn logits_projected(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    params
        .phi
        .apply(&project_plain(params, &extract_plain(params, x)?)?)
}

/// Row-wise argmax with ties broken toward the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Zero means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            batch_size: 0,
            seed: 0,
        }
    }
}

/// Minimizes direct-path cross-entropy over {ψ, φ} by gradient descent.
pub fn pretrain(
    params: &ModelParams,
    data: &LabeledDataset,
    cfg: &PretrainConfig,
) -> Result<ModelParams> {
    pretrain_with_losses(params, data, cfg).map(|(p, _)| p)
}

/// As [`pretrain`], also returning the loss before each update.
pub fn pretrain_with_losses(
    params: &ModelParams,
    data: &LabeledDataset,
    cfg: &PretrainConfig,
) -> Result<(ModelParams, Vec<f64>)> {
    if cfg.epochs < 1 {
        return Err(invalid("epochs must be at least 1"));
    }
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(invalid("lr must be positive"));
    }
    if data.dim() != params.dims.d_in {
        return Err(Error::ShapeMismatch {
            op: "pretrain",
            left: vec![data.dim()],
            right: vec![params.dims.d_in],
        });
    }
    let mut p = params.clone();
    let mut rng = Rng::new(cfg.seed);
    let n = data.len();
    let bs = if cfg.batch_size == 0 || cfg.batch_size >= n {
        n
    } else {
        cfg.batch_size
    };
    let mut losses = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order: Vec<usize> = if bs == n {
            (0..n).collect()
        } else {
            rng.permutation(n)
        };
        for chunk in order.chunks(bs) {
            let (x, y) = if bs == n {
                (data.inputs().clone(), data.labels().to_vec())
            } else {
                (
                    data.inputs().select_rows(chunk),
                    chunk.iter().map(|&i| data.labels()[i]).collect(),
                )
            };
            let tape = Tape::new();
            let m = p.bind(&tape, Blocks::BACKBONE);
            let xv = tape.constant(x);
            let loss = m.logits_direct(xv)?.cross_entropy(&y)?;
            let lv = loss.item();
            if !lv.is_finite() {
                return Err(Error::Divergence { step });
            }
            losses.push(lv);
            let g = tape.backward(loss)?;
            let grads = m.gradients(&g, &p);
            p.axpy(-cfg.lr, &grads, Blocks::BACKBONE);
            step += 1;
        }
    }
    if !p.is_finite() {
        return Err(Error::Divergence { step });
    }
    Ok((p, losses))
}

/// Frozen copy of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    tag: String,
    params: ModelParams,
}

impl Snapshot {
    pub fn new(params: &ModelParams, tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            params: params.clone(),
        }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }
}

pub fn snapshot(params: &ModelParams, tag: impl Into<String>) -> Snapshot {
    Snapshot::new(params, tag)
}

/// `(ψ_i − ψ_i^ori)²` over the extractor in canonical order.
pub fn param_sq_delta(params: &ModelParams, snap: &Snapshot) -> Result<Vec<f64>> {
    if !params.same_structure(snap.params()) {
        return Err(Error::StructureMismatch(
            "snapshot does not match model structure".into(),
        ));
    }
    Ok(params
        .flat_psi()
        .iter()
        .zip(snap.params().flat_psi())
        .map(|(a, b)| (a - b) * (a - b))
        .collect())
}
