//! Metrics, experiment configuration, the end-to-end pipeline and sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::anchor::{
    checksum_f64, gen_synthetic_anchors, load_anchors, visual_prototype_anchors, AnchorSet,
    SyntheticMode,
};
use crate::datakit::{
    gen_gaussian_clusters, holdout, load_dataset_csv, split_forget, split_forget_classes,
    ForgetSplit, LabeledDataset, RetainSet, SplitMode,
};
use crate::diffcore::{cosine, Tensor, EPS};
use crate::error::{Error, Result};
use crate::model::{
    argmax_rows, features, logits_direct, logits_projected, pretrain, snapshot, Block,
    ModelDims, ModelParams, PretrainConfig, Snapshot,
};
use crate::probe::{gen_probes, probe_success_rate, ProbeConfig, ProbeSet};
use crate::rng::derive_seed;
use crate::structloss::{compute_structure, Provenance};
use crate::unlearn::{run_method, Method, UnlearnConfig, UnlearnContext, UnlearnTrace};

pub const SCHEMA_VERSION: u32 = 1;

/// Stream tags for sub-seeds derived from the experiment seed.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const HOLDOUT: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const ANCHORS: u64 = 6;
    pub const PROBES: u64 = 7;
    pub const ORACLE_INIT: u64 = 8;
    pub const UNLEARN: u64 = 9;
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPath {
    #[default]
    Direct,
    Projected,
}

/// Percentage of rows whose argmax logit (lowest index on ties) equals the
/// label.
pub fn accuracy(model: &ModelParams, data: &LabeledDataset, path: EvalPath) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logits = match path {
        EvalPath::Direct => logits_direct(model, data.inputs())?,
        EvalPath::Projected => logits_projected(model, data.inputs())?,
    };
    let hits = argmax_rows(&logits)
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(100.0 * hits as f64 / data.len() as f64)
}

/// Per-sample cosine between snapshot and model features.
pub fn representation_consistency(
    snap: &Snapshot,
    model: &ModelParams,
    data: &LabeledDataset,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let a = features(snap.params(), data.inputs())?;
    let b = features(model, data.inputs())?;
    Ok((0..data.len())
        .map(|i| cosine(a.row(i), b.row(i), EPS))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram over `[lo, hi]`; values outside are clamped into
/// the end bins.
pub fn histogram(samples: &[f64], bins: usize, lo: f64, hi: f64) -> Histogram {
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for &s in samples {
        let i = ((s - lo) / width).floor();
        let i = if i.is_nan() { 0 } else { (i.max(0.0) as usize).min(bins - 1) };
        counts[i] += 1;
    }
    Histogram { edges, counts }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `counts[true][predicted]` over the forget set, direct path.
pub fn confusion_matrix(model: &ModelParams, forget: &LabeledDataset) -> Result<Vec<Vec<usize>>> {
    let b = forget.class_count();
    let mut m = vec![vec![0; b]; b];
    if forget.is_empty() {
        return Ok(m);
    }
    let pred = argmax_rows(&logits_direct(model, forget.inputs())?);
    for (&y, &p) in forget.labels().iter().zip(&pred) {
        m[y][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// `(k, R@k in percent)`.
    pub recall: Vec<(usize, f64)>,
    /// Mean average precision in percent.
    pub map: f64,
    pub queries: usize,
}

/// Ranks the gallery by feature cosine for every query (ties by gallery
/// index) and scores same-class relevance.
pub fn retrieval_eval(
    model: &ModelParams,
    queries: &LabeledDataset,
    gallery: &LabeledDataset,
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > gallery.len()) {
        return Err(Error::InvalidK(format!(
            "k={k} outside 1..={} (gallery size)",
            gallery.len()
        )));
    }
    if queries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let q = features(model, queries.inputs())?;
    let g = features(model, gallery.inputs())?;
    let sims = q.matmul(&g.transpose())?;
    let mut hits = vec![0usize; ks.len()];
    let mut ap_sum = 0.0;
    for i in 0..queries.len() {
        let y = queries.labels()[i];
        let row = sims.row(i);
        let mut order: Vec<usize> = (0..gallery.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let relevant: Vec<bool> = order.iter().map(|&j| gallery.labels()[j] == y).collect();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if relevant[..k].iter().any(|&r| r) {
                *h += 1;
            }
        }
        ap_sum += average_precision(&relevant);
    }
    let n = queries.len() as f64;
    Ok(RetrievalMetrics {
        recall: ks
            .iter()
            .zip(&hits)
            .map(|(&k, &h)| (k, 100.0 * h as f64 / n))
            .collect(),
        map: 100.0 * ap_sum / n,
        queries: queries.len(),
    })
}

/// Average precision of a ranked relevance list; zero when nothing is
/// relevant.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (rank, &r) in relevant.iter().enumerate() {
        if r {
            found += 1;
            sum += found as f64 / (rank + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        sum / found as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorProfile {
    pub label: usize,
    pub original: Vec<f64>,
    pub current: Vec<f64>,
    /// Anchor indices of the `top_n` highest current affinities.
    pub top: Vec<usize>,
}

/// Affinities of one instance to every anchor under the snapshot and the
/// current model (unprojected features).
pub fn anchor_profile(
    model: &ModelParams,
    snap: &Snapshot,
    x: &[f64],
    label: usize,
    anchors: &AnchorSet,
    top_n: usize,
) -> Result<AnchorProfile> {
    let xt = Tensor::matrix(1, x.len(), x.to_vec());
    let ori = compute_structure(&features(snap.params(), &xt)?, anchors, Provenance::Ori)?;
    let cur = compute_structure(&features(model, &xt)?, anchors, Provenance::Unl)?;
    let current = cur.row(0).to_vec();
    let mut order: Vec<usize> = (0..current.len()).collect();
    order.sort_by(|&a, &b| current[b].total_cmp(&current[a]).then(a.cmp(&b)));
    order.truncate(top_n.min(current.len()));
    Ok(AnchorProfile {
        label,
        original: ori.row(0).to_vec(),
        current,
        top: order,
    })
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Mean and unbiased standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    (m, var.sqrt())
}

pub fn params_checksum(p: &ModelParams) -> String {
    let mut all = p.flatten(Block::Psi);
    all.extend(p.flatten(Block::Omega));
    all.extend(p.flatten(Block::Phi));
    checksum_f64(&all)
}

// ----------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Load the full dataset from CSV instead of generating it.
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub spread: f64,
    pub test_fraction: f64,
    pub mode: SplitMode,
    pub k: usize,
    pub class_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            classes: 5,
            per_class: 200,
            d_in: 16,
            spread: 0.3,
            test_fraction: 0.2,
            mode: SplitMode::Instance,
            k: 64,
            class_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub d: usize,
    pub pretrain: PretrainConfig,
    /// Load the pretrained model instead of training it.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            d: 16,
            pretrain: PretrainConfig::default(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    #[default]
    Synthetic,
    Prototype,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub kind: AnchorKind,
    pub synthetic_mode: SyntheticMode,
    pub path: Option<PathBuf>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            kind: AnchorKind::Synthetic,
            synthetic_mode: SyntheticMode::Orthonormal,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub retrieval_ks: Vec<usize>,
    /// Cap on retain queries for retrieval; forget queries are all used.
    pub max_retrieval_queries: usize,
    pub histogram_bins: usize,
    /// Instances per set (forget and retain) given anchor profiles.
    pub profile_instances: usize,
    pub profile_top_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            retrieval_ks: vec![1, 5, 10],
            max_retrieval_queries: 200,
            histogram_bins: 20,
            profile_instances: 2,
            profile_top_n: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    /// Partial config merged over the base config for this arm.
    #[serde(default)]
    pub set: Value,
}

impl Arm {
    pub fn new(name: impl Into<String>, set: Value) -> Self {
        Self {
            name: name.into(),
            set,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub arms: Vec<Arm>,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            arms: Method::ALL
                .iter()
                .map(|m| Arm::new(m.name(), serde_json::json!({"unlearn": {"method": m.name()}})))
                .collect(),
            ks: vec![16, 64],
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub anchors: AnchorConfig,
    pub probes: ProbeConfig,
    pub unlearn: UnlearnConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            anchors: AnchorConfig::default(),
            probes: ProbeConfig::default(),
            unlearn: UnlearnConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn config_err(path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    /// Parses JSON, reporting unknown keys and type errors with their field
    /// path, then validates.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        Self::from_json_str(&v.to_string())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.display().to_string()));
        }
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Deep-merges `patch` over this config and re-validates.
    pub fn patched(&self, patch: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge_json(&mut base, patch);
        Self::from_value(base)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.path.is_none() {
            if d.classes < 2 {
                return Err(config_err("data.classes", "must be at least 2"));
            }
            if d.per_class < 1 {
                return Err(config_err("data.per_class", "must be positive"));
            }
            if d.d_in < 2 {
                return Err(config_err("data.d_in", "must be at least 2"));
            }
            if !(d.spread >= 0.0) || !d.spread.is_finite() {
                return Err(config_err("data.spread", "must be finite and nonnegative"));
            }
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(config_err("data.test_fraction", "must lie in (0, 1)"));
        }
        if d.mode == SplitMode::Instance && d.k < 1 {
            return Err(config_err("data.k", "must be positive"));
        }
        if d.mode == SplitMode::Class && !(d.class_fraction > 0.0 && d.class_fraction < 1.0) {
            return Err(config_err("data.class_fraction", "must lie in (0, 1)"));
        }
        if self.model.d < 1 || self.model.hidden.contains(&0) {
            return Err(config_err("model", "layer widths must be positive"));
        }
        if self.model.pretrain.epochs < 1 {
            return Err(config_err("model.pretrain.epochs", "must be at least 1"));
        }
        if !(self.model.pretrain.lr > 0.0) {
            return Err(config_err("model.pretrain.lr", "must be positive"));
        }
        if self.anchors.kind == AnchorKind::File && self.anchors.path.is_none() {
            return Err(config_err("anchors.path", "required when kind is \"file\""));
        }
        let p = &self.probes;
        if p.n_adv < 1 {
            return Err(config_err("probes.n_adv", "must be at least 1"));
        }
        if p.steps < 1 {
            return Err(config_err("probes.steps", "must be at least 1"));
        }
        if !(p.radius > 0.0) {
            return Err(config_err("probes.radius", "must be positive"));
        }
        self.unlearn.validate()?;
        if self.eval.retrieval_ks.contains(&0) {
            return Err(config_err("eval.retrieval_ks", "entries must be positive"));
        }
        for (i, arm) in self.sweep.arms.iter().enumerate() {
            if !(arm.set.is_object() || arm.set.is_null()) {
                return Err(config_err(
                    format!("sweep.arms[{i}].set"),
                    "must be an object",
                ));
            }
        }
        Ok(())
    }
}

/// Recursive object merge; non-object values in `patch` replace.
pub fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (_, Value::Null) => {}
        (b, p) => *b = p.clone(),
    }
}

// --------------------------------------------------------------- pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedBlock {
    pub experiment: u64,
    pub data: u64,
    pub holdout: u64,
    pub split: u64,
    pub init: u64,
    pub pretrain: u64,
    pub anchors: u64,
    pub probes: u64,
    pub oracle_init: u64,
    pub unlearn: u64,
}

impl SeedBlock {
    pub fn derive(seed: u64) -> Self {
        Self {
            experiment: seed,
            data: derive_seed(seed, stream::DATA),
            holdout: derive_seed(seed, stream::HOLDOUT),
            split: derive_seed(seed, stream::SPLIT),
            init: derive_seed(seed, stream::INIT),
            pretrain: derive_seed(seed, stream::PRETRAIN),
            anchors: derive_seed(seed, stream::ANCHORS),
            probes: derive_seed(seed, stream::PROBES),
            oracle_init: derive_seed(seed, stream::ORACLE_INIT),
            unlearn: derive_seed(seed, stream::UNLEARN),
        }
    }
}

/// Everything upstream of the unlearning step. Shared read-only between
/// runs that agree on data, model, anchors and probes.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seeds: SeedBlock,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub split: ForgetSplit,
    pub snapshot: Snapshot,
    pub fresh: ModelParams,
    pub anchors: AnchorSet,
    /// Retain reads made while building anchors.
    pub anchor_reads: usize,
    pub probes: ProbeSet,
    pub probe_success: f64,
    pub prepare_ms: f64,
}

/// Cache key for [`prepare`]: the config fields it depends on.
pub fn prepare_key(cfg: &ExperimentConfig) -> String {
    serde_json::json!({
        "seed": cfg.seed,
        "data": cfg.data,
        "model": cfg.model,
        "anchors": cfg.anchors,
        "probes": cfg.probes,
    })
    .to_string()
}

pub fn load_or_generate_data(cfg: &ExperimentConfig, seeds: &SeedBlock) -> Result<LabeledDataset> {
    let d = &cfg.data;
    match &d.path {
        Some(p) => load_dataset_csv(p),
        None => gen_gaussian_clusters(d.classes, d.per_class, d.d_in, d.spread, seeds.data),
    }
}

pub fn make_split(cfg: &ExperimentConfig, train: &LabeledDataset, seed: u64) -> Result<ForgetSplit> {
    match cfg.data.mode {
        SplitMode::Instance => split_forget(train, cfg.data.k, seed),
        SplitMode::Class => split_forget_classes(train, cfg.data.class_fraction, seed),
    }
}

pub fn model_dims(cfg: &ExperimentConfig, d_in: usize, b: usize) -> ModelDims {
    ModelDims {
        d_in,
        hidden: cfg.model.hidden.clone(),
        d: cfg.model.d,
        b,
    }
}

pub fn build_anchors(
    cfg: &AnchorConfig,
    b: usize,
    d: usize,
    seed: u64,
    snap: &Snapshot,
    retain: &RetainSet,
) -> Result<AnchorSet> {
    let anchors = match cfg.kind {
        AnchorKind::Synthetic => gen_synthetic_anchors(b, d, seed, cfg.synthetic_mode)?,
        AnchorKind::Prototype => visual_prototype_anchors(snap, retain.read())?,
        AnchorKind::File => {
            let path = cfg
                .path
                .as_ref()
                .ok_or_else(|| config_err("anchors.path", "missing"))?;
            load_anchors(path)?
        }
    };
    if anchors.b() != b || anchors.d() != d {
        return Err(Error::ConfigMismatch(format!(
            "anchors are {}x{}, expected {b}x{d}",
            anchors.b(),
            anchors.d()
        )));
    }
    Ok(anchors)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let started = Instant::now();
    let seeds = SeedBlock::derive(cfg.seed);
    let data = load_or_generate_data(cfg, &seeds)?;
    let (train, test) = holdout(&data, cfg.data.test_fraction, seeds.holdout)?;
    let split = make_split(cfg, &train, seeds.split)?;
    let dims = model_dims(cfg, train.dim(), train.class_count());
    let trained = match &cfg.model.checkpoint {
        Some(path) => {
            let p = ModelParams::load_json(path)?;
            if p.dims != dims {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint dims {:?} differ from configured {:?}",
                    p.dims, dims
                )));
            }
            p
        }
        None => {
            let init = ModelParams::init(dims.clone(), seeds.init)?;
            let pcfg = PretrainConfig {
                seed: seeds.pretrain,
                ..cfg.model.pretrain.clone()
            };
            pretrain(&init, &train, &pcfg)?
        }
    };
    let snap = snapshot(&trained, "ori");
    let fresh = ModelParams::init(dims.clone(), seeds.oracle_init)?;
    let anchors = build_anchors(
        &cfg.anchors,
        train.class_count(),
        dims.d,
        seeds.anchors,
        &snap,
        &split.retain,
    )?;
    let anchor_reads = split.retain.reads();
    let pcfg = ProbeConfig {
        seed: seeds.probes,
        ..cfg.probes.clone()
    };
    let probes = gen_probes(&snap, &split.forget, &pcfg)?;
    let probe_success = probe_success_rate(&snap, &probes)?;
    Ok(Prepared {
        seeds,
        train,
        test,
        split,
        snapshot: snap,
        fresh,
        anchors,
        anchor_reads,
        probes,
        probe_success,
        prepare_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

// ----------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetAccuracy {
    pub test: f64,
    pub retain: f64,
    pub forget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBlock {
    pub direct: SetAccuracy,
    pub projected: SetAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseBlock {
    pub trajectory: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyBlock {
    pub median: f64,
    pub mean: f64,
    pub histogram: Histogram,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBlock {
    pub retain_query: RetrievalMetrics,
    pub forget_query: Option<RetrievalMetrics>,
    pub retain_query_before: RetrievalMetrics,
    pub forget_query_before: Option<RetrievalMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileBlock {
    pub forget: Vec<AnchorProfile>,
    pub retain: Vec<AnchorProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessBlock {
    pub anchor_construction_reads: usize,
    pub unlearning_reads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecksumBlock {
    pub anchors_before: String,
    pub anchors_after: String,
    pub snapshot_before: String,
    pub snapshot_after: String,
    pub model_after: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBlock {
    pub method: Method,
    pub forget_size: usize,
    pub retain_size: usize,
    pub test_size: usize,
    pub probe_count: usize,
    pub probe_success_rate: f64,
    pub steps_executed: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub prepare_ms: f64,
    pub unlearn_ms: f64,
    pub eval_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub seeds: SeedBlock,
    pub run: RunBlock,
    pub before: AccuracyBlock,
    pub after: AccuracyBlock,
    /// `100 − A_f` (direct path).
    pub deletion_score: f64,
    pub collapse: CollapseBlock,
    pub consistency: ConsistencyBlock,
    pub confusion: Vec<Vec<usize>>,
    pub retrieval: RetrievalBlock,
    pub anchor_profiles: ProfileBlock,
    pub access: AccessBlock,
    pub checksums: ChecksumBlock,
    pub timing: Timing,
}

impl RunReport {
    pub fn a_test(&self) -> f64 {
        self.after.direct.test
    }
    pub fn a_r(&self) -> f64 {
        self.after.direct.retain
    }
    pub fn a_f(&self) -> f64 {
        self.after.direct.forget
    }
    /// Retention–deletion gap `A_r − (100 − deletion score)`.
    pub fn gap(&self) -> f64 {
        self.a_r() - (100.0 - self.deletion_score)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON with the timing section zeroed, for byte comparisons.
    pub fn to_json_without_timing(&self) -> String {
        let mut r = self.clone();
        r.timing = Timing {
            prepare_ms: 0.0,
            unlearn_ms: 0.0,
            eval_ms: 0.0,
        };
        r.to_json()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.display().to_string()));
        }
        let r: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "report schema_version {} is not {SCHEMA_VERSION}",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

fn set_accuracy(
    model: &ModelParams,
    test: &LabeledDataset,
    retain: &LabeledDataset,
    forget: &LabeledDataset,
    path: EvalPath,
) -> Result<SetAccuracy> {
    Ok(SetAccuracy {
        test: accuracy(model, test, path)?,
        retain: accuracy(model, retain, path)?,
        forget: accuracy(model, forget, path)?,
    })
}

fn accuracy_block(
    model: &ModelParams,
    test: &LabeledDataset,
    retain: &LabeledDataset,
    forget: &LabeledDataset,
) -> Result<AccuracyBlock> {
    Ok(AccuracyBlock {
        direct: set_accuracy(model, test, retain, forget, EvalPath::Direct)?,
        projected: set_accuracy(model, test, retain, forget, EvalPath::Projected)?,
    })
}

/// Inputs of [`evaluate`]: a finished unlearning run and its context.
pub struct EvalInputs<'a> {
    pub config: &'a ExperimentConfig,
    pub seeds: SeedBlock,
    pub test: &'a LabeledDataset,
    pub retain: &'a RetainSet,
    pub forget: &'a LabeledDataset,
    pub snapshot: &'a Snapshot,
    pub model: &'a ModelParams,
    pub anchors: &'a AnchorSet,
    pub probes: &'a ProbeSet,
    pub trace: &'a UnlearnTrace,
    pub anchor_reads: usize,
    pub anchors_before: String,
    pub snapshot_before: String,
    pub prepare_ms: f64,
    pub unlearn_ms: f64,
}

pub fn evaluate(inp: EvalInputs<'_>) -> Result<RunReport> {
    let started = Instant::now();
    let cfg = inp.config;
    let unlearning_reads = inp.retain.reads();
    let retain = inp.retain.for_evaluation();
    let snap = inp.snapshot.params();
    let before = accuracy_block(snap, inp.test, retain, inp.forget)?;
    let after = accuracy_block(inp.model, inp.test, retain, inp.forget)?;
    let consistency = representation_consistency(inp.snapshot, inp.model, retain)?;
    let n_q = retain.len().min(cfg.eval.max_retrieval_queries.max(1));
    let q_idx: Vec<usize> = (0..n_q).collect();
    let retain_queries = retain.subset(&q_idx, "retain-queries")?;
    let ks = &cfg.eval.retrieval_ks;
    let retrieval = RetrievalBlock {
        retain_query: retrieval_eval(inp.model, &retain_queries, inp.test, ks)?,
        forget_query: if inp.forget.is_empty() {
            None
        } else {
            Some(retrieval_eval(inp.model, inp.forget, inp.test, ks)?)
        },
        retain_query_before: retrieval_eval(snap, &retain_queries, inp.test, ks)?,
        forget_query_before: if inp.forget.is_empty() {
            None
        } else {
            Some(retrieval_eval(snap, inp.forget, inp.test, ks)?)
        },
    };
    let profile = |data: &LabeledDataset| -> Result<Vec<AnchorProfile>> {
        (0..data.len().min(cfg.eval.profile_instances))
            .map(|i| {
                anchor_profile(
                    inp.model,
                    inp.snapshot,
                    data.inputs().row(i),
                    data.labels()[i],
                    inp.anchors,
                    cfg.eval.profile_top_n,
                )
            })
            .collect()
    };
    let anchor_profiles = ProfileBlock {
        forget: profile(inp.forget)?,
        retain: profile(retain)?,
    };
    let trajectory: Vec<f64> = inp.trace.records.iter().map(|r| r.collapse).collect();
    let a_f = after.direct.forget;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        seeds: inp.seeds,
        run: RunBlock {
            method: cfg.unlearn.method,
            forget_size: inp.forget.len(),
            retain_size: retain.len(),
            test_size: inp.test.len(),
            probe_count: inp.probes.len(),
            probe_success_rate: probe_success_rate(inp.snapshot, inp.probes)?,
            steps_executed: inp.trace.len(),
            stopped_early: inp.trace.stopped_early,
        },
        before,
        after,
        deletion_score: 100.0 - a_f,
        collapse: CollapseBlock {
            mean: inp.trace.mean_collapse(),
            trajectory,
        },
        consistency: ConsistencyBlock {
            median: median(&consistency),
            mean: consistency.iter().sum::<f64>() / consistency.len() as f64,
            histogram: histogram(&consistency, cfg.eval.histogram_bins, -1.0, 1.0),
            samples: consistency,
        },
        confusion: confusion_matrix(inp.model, inp.forget)?,
        retrieval,
        anchor_profiles,
        access: AccessBlock {
            anchor_construction_reads: inp.anchor_reads,
            unlearning_reads,
        },
        checksums: ChecksumBlock {
            anchors_before: inp.anchors_before,
            anchors_after: inp.anchors.checksum(),
            snapshot_before: inp.snapshot_before,
            snapshot_after: params_checksum(snap),
            model_after: params_checksum(inp.model),
        },
        timing: Timing {
            prepare_ms: inp.prepare_ms,
            unlearn_ms: inp.unlearn_ms,
            eval_ms: started.elapsed().as_secs_f64() * 1e3,
        },
    })
}

/// Report, trace and final model of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub trace: UnlearnTrace,
    pub model: ModelParams,
}

/// Runs the configured method on prepared inputs and evaluates it. The
/// retention set handed to the method is a fresh counter-wrapped copy.
pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> Result<RunOutput> {
    let retain = RetainSet::new(prep.split.retain.for_evaluation().clone());
    let anchors_before = prep.anchors.checksum();
    let snapshot_before = params_checksum(prep.snapshot.params());
    let ctx = UnlearnContext {
        snapshot: &prep.snapshot,
        forget: &prep.split.forget,
        probes: &prep.probes,
        anchors: &prep.anchors,
    };
    let ucfg = UnlearnConfig {
        seed: prep.seeds.unlearn,
        ..cfg.unlearn.clone()
    };
    let started = Instant::now();
    let (model, trace) = run_method(
        prep.snapshot.params(),
        Some(&prep.fresh),
        Some(&retain),
        &ctx,
        &ucfg,
    )?;
    let unlearn_ms = started.elapsed().as_secs_f64() * 1e3;
    let report = evaluate(EvalInputs {
        config: cfg,
        seeds: prep.seeds.clone(),
        test: &prep.test,
        retain: &retain,
        forget: &prep.split.forget,
        snapshot: &prep.snapshot,
        model: &model,
        anchors: &prep.anchors,
        probes: &prep.probes,
        trace: &trace,
        anchor_reads: prep.anchor_reads,
        anchors_before,
        snapshot_before,
        prepare_ms: prep.prepare_ms,
        unlearn_ms,
    })?;
    Ok(RunOutput {
        report,
        trace,
        model,
    })
}

/// The full pipeline for one config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    run_prepared(cfg, &prep)
}

/// Runs the pipeline and writes `report.json`, `trace.csv` and `model.json`
/// into `out`.
pub fn run_experiment_to_dir(cfg: &ExperimentConfig, out: impl AsRef<Path>) -> Result<RunOutput> {
    let out = out.as_ref();
    std::fs::create_dir_all(out)?;
    let res = run_experiment(cfg)?;
    res.report.save(out.join("report.json"))?;
    std::fs::write(out.join("trace.csv"), res.trace.to_csv(true))?;
    res.model.save_json(out.join("model.json"))?;
    Ok(res)
}

// ------------------------------------------------------------------ sweep

#[derive(Debug, Clone)]
pub struct Cell {
    pub arm: String,
    pub k: usize,
    pub seed: u64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub arm: String,
    pub k: usize,
    pub seed: u64,
    pub outcome: std::result::Result<Box<RunOutput>, String>,
}

impl CellResult {
    pub fn report(&self) -> Option<&RunReport> {
        self.outcome.as_ref().ok().map(|o| &o.report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub arm: String,
    pub k: usize,
    pub ok: usize,
    pub failed: usize,
    pub a_test: (f64, f64),
    pub a_r: (f64, f64),
    pub a_f: (f64, f64),
    pub deletion: (f64, f64),
    pub collapse: (f64, f64),
    pub consistency_median: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub cells: Vec<CellResult>,
}

/// Expands the grid in arm-major, then k, then seed order.
pub fn expand_grid(base: &ExperimentConfig) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for (i, arm) in base.sweep.arms.iter().enumerate() {
        let armed = base.patched(&arm.set).map_err(|e| match e {
            Error::Config { path, msg } => config_err(format!("sweep.arms[{i}].set.{path}"), msg),
            other => other,
        })?;
        for &k in &base.sweep.ks {
            for &seed in &base.sweep.seeds {
                let mut config = armed.clone();
                config.data.k = k;
                config.seed = seed;
                cells.push(Cell {
                    arm: arm.name.clone(),
                    k,
                    seed,
                    config,
                });
            }
        }
    }
    Ok(cells)
}

/// Runs every cell; upstream stages are computed once per distinct
/// (seed, data, model, anchors, probes) and shared. Cells run in parallel
/// and come back in grid order.
pub fn sweep(base: &ExperimentConfig) -> Result<SweepResult> {
    base.validate()?;
    run_cells(expand_grid(base)?)
}

pub fn run_cells(cells: Vec<Cell>) -> Result<SweepResult> {
    let mut keys: BTreeMap<String, usize> = BTreeMap::new();
    let mut uniques: Vec<&ExperimentConfig> = Vec::new();
    for c in &cells {
        let key = prepare_key(&c.config);
        if let std::collections::btree_map::Entry::Vacant(e) = keys.entry(key) {
            e.insert(uniques.len());
            uniques.push(&c.config);
        }
    }
    let prepared: Vec<std::result::Result<Prepared, String>> = uniques
        .par_iter()
        .map(|cfg| prepare(cfg).map_err(|e| e.to_string()))
        .collect();
    let results = cells
        .par_iter()
        .map(|c| {
            let idx = keys[&prepare_key(&c.config)];
            let outcome = match &prepared[idx] {
                Ok(prep) => run_prepared(&c.config, prep)
                    .map(Box::new)
                    .map_err(|e| e.to_string()),
                Err(e) => Err(format!("preparation failed: {e}")),
            };
            CellResult {
                arm: c.arm.clone(),
                k: c.k,
                seed: c.seed,
                outcome,
            }
        })
        .collect();
    Ok(SweepResult { cells: results })
}

impl SweepResult {
    /// One row per (arm, k) in first-seen order.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut order: Vec<(String, usize)> = Vec::new();
        for c in &self.cells {
            let key = (c.arm.clone(), c.k);
            if !order.contains(&key) {
                order.push(key);
            }
        }
        order
            .into_iter()
            .map(|(arm, k)| {
                let group: Vec<&CellResult> = self
                    .cells
                    .iter()
                    .filter(|c| c.arm == arm && c.k == k)
                    .collect();
                let ok: Vec<&RunReport> = group.iter().filter_map(|c| c.report()).collect();
                let stat = |f: &dyn Fn(&RunReport) -> f64| {
                    mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                AggregateRow {
                    arm,
                    k,
                    ok: ok.len(),
                    failed: group.len() - ok.len(),
                    a_test: stat(&|r| r.a_test()),
                    a_r: stat(&|r| r.a_r()),
                    a_f: stat(&|r| r.a_f()),
                    deletion: stat(&|r| r.deletion_score),
                    collapse: stat(&|r| r.collapse.mean),
                    consistency_median: stat(&|r| r.consistency.median),
                }
            })
            .collect()
    }

    pub fn row(&self, arm: &str, k: usize) -> Option<AggregateRow> {
        self.aggregate().into_iter().find(|r| r.arm == arm && r.k == k)
    }

    pub const TABLE_HEADER: &'static str = "arm,k,ok,failed,a_test_mean,a_test_std,a_r_mean,a_r_std,a_f_mean,a_f_std,deletion_mean,deletion_std,collapse_mean,collapse_std,consistency_median_mean,consistency_median_std";

    pub fn table_csv(&self) -> String {
        let mut out = String::from(Self::TABLE_HEADER);
        out.push('\n');
        for r in self.aggregate() {
            let f = |(m, s): (f64, f64)| format!("{m:.4},{s:.4}");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.arm,
                r.k,
                r.ok,
                r.failed,
                f(r.a_test),
                f(r.a_r),
                f(r.a_f),
                f(r.deletion),
                f(r.collapse),
                f(r.consistency_median)
            ));
        }
        out
    }

    pub const SCATTER_HEADER: &'static str = "arm,k,seed,mean_collapse,gap";

    /// Mean collapse against the retention–deletion gap per successful cell.
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from(Self::SCATTER_HEADER);
        out.push('\n');
        for c in &self.cells {
            if let Some(r) = c.report() {
                out.push_str(&format!(
                    "{},{},{},{:?},{:?}\n",
                    c.arm,
                    c.k,
                    c.seed,
                    r.collapse.mean,
                    r.gap()
                ));
            }
        }
        out
    }

    pub const FAILURES_HEADER: &'static str = "arm,k,seed,error";

    pub fn failures_csv(&self) -> String {
        let mut out = String::from(Self::FAILURES_HEADER);
        out.push('\n');
        for c in &self.cells {
            if let Err(e) = &c.outcome {
                out.push_str(&format!("{},{},{},\"{}\"\n", c.arm, c.k, c.seed, e.replace('"', "'")));
            }
        }
        out
    }

    /// Writes the table, scatter and failure CSVs plus one report and trace
    /// per successful cell under `out/cells/`.
    pub fn write_to_dir(&self, out: impl AsRef<Path>) -> Result<()> {
        let out = out.as_ref();
        let cells = out.join("cells");
        std::fs::create_dir_all(&cells)?;
        std::fs::write(out.join("table.csv"), self.table_csv())?;
        std::fs::write(out.join("scatter.csv"), self.scatter_csv())?;
        std::fs::write(out.join("failures.csv"), self.failures_csv())?;
        for c in &self.cells {
            if let Ok(o) = &c.outcome {
                let stem = format!("{}-k{}-s{}", c.arm, c.k, c.seed);
                o.report.save(cells.join(format!("{stem}.json")))?;
                std::fs::write(cells.join(format!("{stem}.trace.csv")), o.trace.to_csv(true))?;
            }
        }
        Ok(())
    }
}
