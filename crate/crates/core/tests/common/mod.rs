#![allow(dead_code)]

use structguard::anchor::{gen_synthetic_anchors, AnchorSet, SyntheticMode};
use structguard::datakit::{gen_gaussian_clusters, split_forget, ForgetSplit, LabeledDataset};
use structguard::diffcore::{finite_diff_grad, max_relative_error, Tape, Tensor, Var, EPS};
use structguard::model::{pretrain, snapshot, Block, Blocks, ModelDims, ModelParams, PretrainConfig, Snapshot};
use structguard::probe::{gen_probes, ProbeConfig, ProbeSet};
use structguard::rng::Rng;
use structguard::structloss::{
    original_structure, reg_loss_var, structural_importance, AlignAxis, AlignVariant,
};
use structguard::unlearn::{structguard_objective, UnlearnConfig, UnlearnContext};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Gradient entries below this magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn random_tensor(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| scale * rng.gaussian()).collect())
}

/// Entries bounded away from zero so kinks (relu, abs) stay out of the
/// finite-difference stencil.
pub fn away_from_zero(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let v = rng.uniform_range(0.1, 1.5);
                if rng.uniform() < 0.5 {
                    -v
                } else {
                    v
                }
            })
            .collect(),
    )
}

/// Contracts a tensor-valued op against fixed random weights so the whole
/// Jacobian is exercised by one scalar.
fn contract<'t>(y: Var<'t>, weights_seed: u64) -> Var<'t> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let mut rng = Rng::new(weights_seed);
    let r = Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
    let c = y.tape().constant(r);
    y.mul(&c).unwrap().sum()
}

/// Max relative error between reverse-mode and central-difference gradients
/// of `op(x)` contracted to a scalar.
pub fn check_op(x: &Tensor, op: impl for<'t> Fn(Var<'t>) -> Var<'t>) -> f64 {
    let f = |t: &Tensor| {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        contract(op(v), 99).item()
    };
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let out = contract(op(v), 99);
    let g = tape.backward(out).unwrap().wrt_or_zeros(v);
    max_relative_error(&g, &finite_diff_grad(f, x, H), FLOOR)
}

/// Same as [`check_op`] for an op whose output is already scalar.
pub fn check_scalar(x: &Tensor, op: impl for<'t> Fn(Var<'t>) -> Var<'t>) -> f64 {
    let f = |t: &Tensor| {
        let tape = Tape::new();
        op(tape.constant(t.clone())).item()
    };
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let out = op(v);
    let g = tape.backward(out).unwrap().wrt_or_zeros(v);
    max_relative_error(&g, &finite_diff_grad(f, x, H), FLOOR)
}

/// A small trained model with forget split, probes and orthonormal anchors.
pub struct Fixture {
    pub data: LabeledDataset,
    pub split: ForgetSplit,
    pub snap: Snapshot,
    pub probes: ProbeSet,
    pub anchors: AnchorSet,
}

impl Fixture {
    pub fn ctx(&self) -> UnlearnContext<'_> {
        UnlearnContext {
            snapshot: &self.snap,
            forget: &self.split.forget,
            probes: &self.probes,
            anchors: &self.anchors,
        }
    }
}

pub fn small_fixture(seed: u64) -> Fixture {
    fixture(3, 20, 6, 4, vec![8], 6, seed)
}

pub fn fixture(
    b: usize,
    per_class: usize,
    d_in: usize,
    d: usize,
    hidden: Vec<usize>,
    k: usize,
    seed: u64,
) -> Fixture {
    let data = gen_gaussian_clusters(b, per_class, d_in, 0.3, seed).unwrap();
    let split = split_forget(&data, k, seed + 1).unwrap();
    let dims = ModelDims { d_in, hidden, d, b };
    let init = ModelParams::init(dims, seed + 2).unwrap();
    let cfg = PretrainConfig {
        epochs: 150,
        lr: 0.5,
        batch_size: 0,
        seed: seed + 3,
    };
    let snap = snapshot(&pretrain(&init, &data, &cfg).unwrap(), "ori");
    let pcfg = ProbeConfig {
        n_adv: 2,
        seed: seed + 4,
        ..ProbeConfig::default()
    };
    let probes = gen_probes(&snap, &split.forget, &pcfg).unwrap();
    let anchors = gen_synthetic_anchors(b, d, seed + 5, SyntheticMode::Orthonormal).unwrap();
    Fixture {
        data,
        split,
        snap,
        probes,
        anchors,
    }
}

pub fn all_params(p: &ModelParams) -> Tensor {
    let mut v = p.flatten(Block::Psi);
    v.extend(p.flatten(Block::Omega));
    v.extend(p.flatten(Block::Phi));
    Tensor::vector(v)
}

pub fn with_all_params(like: &ModelParams, flat: &Tensor) -> ModelParams {
    let mut p = like.clone();
    let (a, b) = (like.flatten(Block::Psi).len(), like.flatten(Block::Omega).len());
    let d = flat.data();
    p.set_flat(Block::Psi, &d[..a]).unwrap();
    p.set_flat(Block::Omega, &d[a..a + b]).unwrap();
    p.set_flat(Block::Phi, &d[a + b..]).unwrap();
    p
}

/// Gradient check of the full StructGuard objective with every term active,
/// taken at a perturbed copy of the snapshot so the regularizer is nonzero.
pub fn structguard_loss_check(fx: &Fixture, variant: AlignVariant, axis: AlignAxis) -> f64 {
    let ctx = fx.ctx();
    let mut cfg = UnlearnConfig {
        align_variant: variant,
        align_axis: axis,
        ..UnlearnConfig::default()
    };
    cfg.elastic_net.l1 = 0.01;
    cfg.elastic_net.l2 = 0.1;
    let x = fx.probes.inputs().unwrap().clone();
    let s_ori = original_structure(&fx.snap, &x, &fx.anchors).unwrap();
    let mut model = fx.snap.params().clone();
    let mut rng = Rng::new(5);
    let flat = all_params(&model);
    let moved = Tensor::vector(flat.data().iter().map(|v| v + 0.05 * rng.gaussian()).collect());
    model = with_all_params(&model, &moved);
    let imp = structural_importance(&model, &x, &fx.anchors, &s_ori).unwrap().values;

    let loss_at = |p: &ModelParams| -> f64 {
        let tape = Tape::new();
        let m = p.bind(&tape, Blocks::NONE);
        let (total, _) =
            structguard_objective(&m, &ctx, &cfg, Some((&x, &s_ori)), Some(&imp)).unwrap();
        total.unwrap().item()
    };
    let tape = Tape::new();
    let m = model.bind(&tape, Blocks::ALL);
    let (total, _) = structguard_objective(&m, &ctx, &cfg, Some((&x, &s_ori)), Some(&imp)).unwrap();
    let grads = tape.backward(total.unwrap()).unwrap();
    let analytic = all_params(&m.gradients(&grads, &model));
    let numeric = finite_diff_grad(|t| loss_at(&with_all_params(&model, t)), &moved, H);
    max_relative_error(&analytic, &numeric, FLOOR)
}

/// Reverse-mode vs central differences for every tape operation plus the
/// composite structure losses. Returns `(name, max relative error)`.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut rng = Rng::new(2024);
    let mut out: Vec<(String, f64)> = Vec::new();
    let a = random_tensor(&mut rng, 3, 4, 1.0);
    let b = random_tensor(&mut rng, 3, 4, 1.0);
    let w = random_tensor(&mut rng, 4, 2, 1.0);
    let bias = random_tensor(&mut rng, 1, 2, 1.0);
    let kinked = away_from_zero(&mut rng, 3, 4);
    let labels = [0usize, 3, 1];

    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));

    push("matmul/left", check_op(&a, |v| v.matmul(&v.tape().constant(w.clone())).unwrap()));
    push("matmul/right", check_op(&w, |v| v.tape().constant(a.clone()).matmul(&v).unwrap()));
    push("add_row/input", check_op(&a, |v| {
        v.add_row(&v.tape().constant(Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]))).unwrap()
    }));
    push("add_row/bias", check_op(&Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]), |v| {
        v.tape().constant(a.clone()).add_row(&v).unwrap()
    }));
    let bvec = Tensor::vector(bias.data().to_vec());
    push("affine/input", check_op(&a, |v| {
        let t = v.tape();
        v.affine(&t.constant(w.clone()), &t.constant(bvec.clone())).unwrap()
    }));
    push("affine/weight", check_op(&w, |v| {
        let t = v.tape();
        t.constant(a.clone()).affine(&v, &t.constant(bvec.clone())).unwrap()
    }));
    push("affine/bias", check_op(&bvec, |v| {
        let t = v.tape();
        t.constant(a.clone()).affine(&t.constant(w.clone()), &v).unwrap()
    }));
    push("add", check_op(&a, |v| v.add(&v.tape().constant(b.clone())).unwrap()));
    push("sub/left", check_op(&a, |v| v.sub(&v.tape().constant(b.clone())).unwrap()));
    push("sub/right", check_op(&a, |v| v.tape().constant(b.clone()).sub(&v).unwrap()));
    push("mul", check_op(&a, |v| v.mul(&v.tape().constant(b.clone())).unwrap()));
    push("mul/self", check_op(&a, |v| v.mul(&v).unwrap()));
    push("scale", check_op(&a, |v| v.scale(-2.5)));
    push("neg", check_op(&a, |v| v.neg()));
    push("add_scalar", check_op(&a, |v| v.add_scalar(3.0)));
    push("relu", check_op(&kinked, |v| v.relu()));
    push("abs", check_op(&kinked, |v| v.abs()));
    push("square", check_op(&a, |v| v.square()));
    push("exp", check_op(&a, |v| v.exp()));
    push("sum", check_scalar(&a, |v| v.sum()));
    push("mean", check_scalar(&a, |v| v.mean()));
    push("transpose", check_op(&a, |v| v.transpose()));
    push("l2_normalize_rows", check_op(&a, |v| v.l2_normalize_rows(EPS)));
    push("row_cosine", check_op(&a, |v| v.row_cosine(&v.tape().constant(b.clone()), EPS).unwrap()));
    push("row_cosine/self", check_op(&a, |v| {
        v.row_cosine(&v.scale(2.0).add(&v.tape().constant(b.clone())).unwrap(), EPS)
            .unwrap()
    }));
    push("cross_entropy", check_scalar(&a, |v| v.cross_entropy(&labels).unwrap()));
    push("cross_entropy_rows", check_op(&a, |v| v.cross_entropy_rows(&labels).unwrap()));
    push("complement_nll_rows", check_op(&a, |v| v.complement_nll_rows(&labels).unwrap()));
    push("log_softmax_rows", check_op(&a, |v| v.log_softmax_rows()));
    push("sort_rows", check_op(&a, |v| v.sort_rows()));
    push("pairwise_sq_dist/left", check_op(&a, |v| {
        v.pairwise_sq_dist(&v.tape().constant(b.clone())).unwrap()
    }));
    push("pairwise_sq_dist/self", check_op(&a, |v| v.pairwise_sq_dist(&v).unwrap()));

    let fx = small_fixture(11);
    for variant in AlignVariant::ALL {
        for axis in [AlignAxis::PerProbeRow, AlignAxis::PerAnchorColumn] {
            if axis == AlignAxis::PerAnchorColumn && variant != AlignVariant::Cs {
                continue;
            }
            push(
                &format!("structguard_total/{}/{axis:?}", variant.name()),
                structguard_loss_check(&fx, variant, axis),
            );
        }
    }
    push("reg_loss", reg_loss_check(&fx));
    out
}

fn reg_loss_check(fx: &Fixture) -> f64 {
    let mut rng = Rng::new(3);
    let n = fx.snap.params().psi_len();
    let imp: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let psi0 = Tensor::vector(
        fx.snap
            .params()
            .flatten(Block::Psi)
            .iter()
            .map(|v| v + 0.1 * rng.gaussian())
            .collect(),
    );
    let at = |t: &Tensor| {
        let mut p = fx.snap.params().clone();
        p.set_flat(Block::Psi, t.data()).unwrap();
        p
    };
    let value = |t: &Tensor| {
        let tape = Tape::new();
        let m = at(t).bind(&tape, Blocks::NONE);
        reg_loss_var(&m, &fx.snap, &imp).unwrap().item()
    };
    let p = at(&psi0);
    let tape = Tape::new();
    let m = p.bind(&tape, Blocks::PSI);
    let l = reg_loss_var(&m, &fx.snap, &imp).unwrap();
    let grads = tape.backward(l).unwrap();
    let g = Tensor::vector(m.gradients(&grads, &p).flatten(Block::Psi));
    max_relative_error(&g, &finite_diff_grad(value, &psi0, H), FLOOR)
}
