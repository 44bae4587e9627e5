//! Acceptance run on the reference fixture. Prints one PASS/FAIL line per
//! criterion. Criteria that check exact properties of the implementation
//! abort the run when they fail; the empirical comparisons between methods
//! only report their verdict, with the numbers behind it.

mod common;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde_json::json;
use structguard::anchor::{AnchorSet, AnchorSource};
use structguard::diffcore::{Tape, Tensor};
use structguard::harness::*;
use structguard::model::{snapshot, Affine, Blocks, ModelDims, ModelParams};
use structguard::structloss::*;
use structguard::unlearn::{elastic_net, ElasticNet};

const CONFIG: &str = include_str!("../../../configs/default.json");
const IDENTITY_TOL: f64 = 1e-12;
const CELL_BUDGET_MS: f64 = 120_000.0;
const RETENTION_FLOOR: f64 = 20.0;
const PROBE_FLOOR: f64 = 0.9;

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    required: bool,
}

fn base() -> ExperimentConfig {
    ExperimentConfig::from_json_str(CONFIG).expect("bundled config")
}

fn out_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("output dir");
    dir
}

// ------------------------------------------------------------ exact checks

fn gradient_oracle() -> Verdict {
    let t0 = Instant::now();
    let suite = common::gradient_suite();
    let secs = t0.elapsed().as_secs_f64();
    let (worst_name, worst) = suite
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Verdict {
        id: 1,
        name: "gradient oracle",
        pass: worst < common::TOL && secs < 30.0,
        detail: format!(
            "{} checks, worst rel err {worst:.2e} ({worst_name}), {secs:.1} s",
            suite.len()
        ),
        required: true,
    }
}

fn loss_identities() -> Verdict {
    let prep = prepare(&base()).expect("prepare");
    let x = prep.probes.inputs().unwrap();
    let s = original_structure(&prep.snapshot, x, &prep.anchors).unwrap();
    let mut errs: Vec<(String, f64)> = Vec::new();

    errs.push(("align(S,S)+1".into(), (align_loss(&s, &s, AlignAxis::PerProbeRow).unwrap() + 1.0).abs()));
    errs.push(("align_col(S,S)+1".into(), (align_loss(&s, &s, AlignAxis::PerAnchorColumn).unwrap() + 1.0).abs()));
    for v in [AlignVariant::Mse, AlignVariant::Kl, AlignVariant::Wd, AlignVariant::Mmd] {
        errs.push((format!("{}(S,S)", v.name()), align_loss_variant(v, &s, &s).unwrap().abs()));
    }

    let snap = &prep.snapshot;
    let mut model = snap.params().clone();
    model.set_projector_identity();
    let imp = structural_importance(&model, x, &prep.anchors, &s).unwrap();
    errs.push(("reg at origin".into(), reg_loss(snap.params(), snap, &imp).unwrap().abs()));

    let zero = Affine::zeros(4, 3);
    errs.push(("elastic_net(0)".into(), elastic_net(&zero, &ElasticNet { l1: 0.3, l2: 0.7 }).abs()));

    model.omega[1].b.data_mut()[0] = 0.2;
    let tape = Tape::new();
    let m = model.bind(&tape, Blocks::NONE);
    let su = unlearned_structure_var(&m, tape.constant(x.clone()), &prep.anchors).unwrap();
    let batch = align_loss_var(tape.constant(s.matrix().clone()), su, AlignAxis::PerProbeRow)
        .unwrap()
        .item();
    let mean = (0..x.rows())
        .map(|i| per_probe_align_loss(&model, x.row(i), &prep.anchors, s.row(i)).unwrap())
        .sum::<f64>()
        / x.rows() as f64;
    errs.push(("per-probe decomposition".into(), (batch - mean).abs()));

    let worst = errs.iter().cloned().fold(errs[0].clone(), |a, b| if b.1 > a.1 { b } else { a });
    Verdict {
        id: 2,
        name: "loss identities",
        pass: errs.iter().all(|(_, e)| *e <= IDENTITY_TOL),
        detail: format!("{} identities, worst {:.1e} ({})", errs.len(), worst.1, worst.0),
        required: true,
    }
}

fn hand_oracle() -> Verdict {
    let eye = AnchorSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], AnchorSource::Synthetic).unwrap();
    let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap();
    let s = compute_structure(&v, &eye, Provenance::Ori).unwrap();
    let su = StructureMatrix::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.8, 0.6]), Provenance::Unl);
    let align = align_loss(&s, &su, AlignAxis::PerProbeRow).unwrap();

    let scalar = |w: f64, b: f64| {
        let dims = ModelDims {
            d_in: 1,
            hidden: vec![],
            d: 1,
            b: 1,
        };
        let mut p = ModelParams::init(dims, 0).unwrap();
        p.psi[0] = Affine {
            w: Tensor::matrix(1, 1, vec![w]),
            b: Tensor::vector(vec![b]),
        };
        p.set_projector_identity();
        p
    };
    let snap = snapshot(&scalar(1.0, 0.0), "ori");
    let imp = ImportanceVector {
        values: vec![2.0, 4.0],
        probe_count: 1,
    };
    let reg = reg_loss(&scalar(1.5, -0.5), &snap, &imp).unwrap();

    let s_ok = s.matrix().data() == [1.0, 0.0, 0.6, 0.8];
    let pass = s_ok && (align + 0.98).abs() < 1e-15 && (reg - 0.75).abs() < 1e-15;
    Verdict {
        id: 3,
        name: "hand-oracle structure math",
        pass,
        detail: format!("S exact: {s_ok}, align {align}, reg {reg}"),
        required: true,
    }
}

fn probe_quality() -> Verdict {
    let cfg = base();
    let mut rates = Vec::new();
    for &k in &cfg.sweep.ks {
        for &seed in &cfg.sweep.seeds {
            let mut c = cfg.clone();
            c.data.k = k;
            c.seed = seed;
            rates.push(prepare(&c).expect("prepare").probe_success);
        }
    }
    let min = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    Verdict {
        id: 10,
        name: "probe quality",
        pass: min >= PROBE_FLOOR,
        detail: format!("{} fixtures, min success {min:.3}, mean {mean:.3}", rates.len()),
        required: true,
    }
}

fn determinism_and_access(grid: &SweepResult) -> Verdict {
    let cfg = base();
    let mut problems = Vec::new();
    for arm in &cfg.sweep.arms {
        let mut c = cfg.patched(&arm.set).unwrap();
        c.unlearn.steps = c.unlearn.steps.min(150);
        let a = run_experiment(&c).map(|o| o.report);
        let b = run_experiment(&c).map(|o| o.report);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                if a.to_json_without_timing() != b.to_json_without_timing() {
                    problems.push(format!("{}: reports differ", arm.name));
                }
                let oracle = c.unlearn.method == structguard::unlearn::Method::Oracle;
                if oracle != (a.access.unlearning_reads > 0) {
                    problems.push(format!("{}: {} retain reads", arm.name, a.access.unlearning_reads));
                }
            }
            (Err(a), Err(b)) if a.to_string() == b.to_string() => {}
            _ => problems.push(format!("{}: outcomes differ", arm.name)),
        }
    }
    let mut audited = 0;
    for c in &grid.cells {
        if let Some(r) = c.report() {
            if r.run.method != structguard::unlearn::Method::Oracle {
                audited += 1;
                if r.access.unlearning_reads != 0 {
                    problems.push(format!("{}-k{}-s{}: retain reads", c.arm, c.k, c.seed));
                }
            }
        }
    }
    Verdict {
        id: 12,
        name: "determinism and access audit",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("{} arms rerun identically, {audited} completed non-oracle cells read no retain data", cfg.sweep.arms.len())
        } else {
            problems.join("; ")
        },
        required: true,
    }
}

// --------------------------------------------------------- empirical checks

/// Completed reports of one arm at one k, in seed order.
fn reports<'a>(grid: &'a SweepResult, arm: &str, k: usize) -> Vec<&'a RunReport> {
    grid.cells
        .iter()
        .filter(|c| c.arm == arm && c.k == k)
        .filter_map(|c| c.report())
        .collect()
}

fn cell_count(grid: &SweepResult, arm: &str, k: usize) -> usize {
    grid.cells.iter().filter(|c| c.arm == arm && c.k == k).count()
}

fn mean_of(reports: &[&RunReport], f: impl Fn(&RunReport) -> f64) -> Option<f64> {
    if reports.is_empty() {
        return None;
    }
    Some(reports.iter().map(|r| f(r)).sum::<f64>() / reports.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.2}"))
}

/// `arm value (completed/total)` for one arm at k.
fn arm_entry(grid: &SweepResult, arm: &str, k: usize, v: Option<f64>) -> String {
    format!("{arm} {} ({}/{})", fmt_opt(v), reports(grid, arm, k).len(), cell_count(grid, arm, k))
}

/// All cells of the arm at k completed with nothing left of the forget set.
fn fully_deleted(grid: &SweepResult, arm: &str, k: usize) -> bool {
    let done = reports(grid, arm, k);
    done.len() == cell_count(grid, arm, k) && done.iter().all(|r| r.a_f() == 0.0)
}

fn deletion_completeness(grid: &SweepResult, ks: &[usize]) -> Verdict {
    let arms = ["structguard", "neggrad", "rawp", "adv", "l2ul", "oracle"];
    let mut parts = Vec::new();
    let mut pass = true;
    for arm in arms {
        for &k in ks {
            let done = reports(grid, arm, k);
            let total = cell_count(grid, arm, k);
            let complete = done.iter().filter(|r| r.a_f() == 0.0).count();
            let slowest = done
                .iter()
                .map(|r| r.timing.prepare_ms + r.timing.unlearn_ms + r.timing.eval_ms)
                .fold(0.0, f64::max);
            pass &= complete == total && slowest < CELL_BUDGET_MS;
            let diverged = grid
                .cells
                .iter()
                .filter(|c| c.arm == arm && c.k == k)
                .filter(|c| matches!(&c.outcome, Err(e) if e.contains("non-finite")))
                .count();
            parts.push(format!("{arm}@{k} {complete}/{total} ({diverged} diverged)"));
        }
    }
    Verdict {
        id: 4,
        name: "deletion completeness",
        pass,
        detail: format!("cells with A_f = 0: {}", parts.join(", ")),
        required: false,
    }
}

fn retention_ordering(grid: &SweepResult) -> Verdict {
    let arms = ["structguard", "l2ul", "adv", "neggrad"];
    let means: Vec<Option<f64>> = arms.iter().map(|a| mean_of(&reports(grid, a, 64), |r| r.a_r())).collect();
    let matched = arms.iter().all(|a| fully_deleted(grid, a, 64));
    let ordered = match (means[0], means[1], means[2], means[3]) {
        (Some(sg), Some(l2), Some(adv), Some(ng)) => sg > l2 && l2 >= adv && adv > ng && sg - ng >= RETENTION_FLOOR,
        _ => false,
    };
    let listed: Vec<String> = arms.iter().zip(&means).map(|(a, m)| arm_entry(grid, a, 64, *m)).collect();
    Verdict {
        id: 5,
        name: "retention ordering",
        pass: matched && ordered,
        detail: format!(
            "mean A_r at k=64: {}; full deletion matched: {matched}",
            listed.join(", ")
        ),
        required: false,
    }
}

fn collapse_claim(grid: &SweepResult, arms: &[String], ks: &[usize], seeds: &[u64]) -> Verdict {
    let mut per_seed = Vec::new();
    let mut every_seed = true;
    for &k in ks {
        for &seed in seeds {
            let find = |arm: &str| {
                grid.cells
                    .iter()
                    .find(|c| c.arm == arm && c.k == k && c.seed == seed)
                    .and_then(|c| c.report())
                    .map(|r| r.collapse.mean)
            };
            match (find("structguard"), find("neggrad")) {
                (Some(sg), Some(ng)) => {
                    every_seed &= sg < ng;
                    per_seed.push(format!("k{k}s{seed} {sg:.3}<{ng:.3}"));
                }
                _ => {
                    every_seed = false;
                    per_seed.push(format!("k{k}s{seed} incomplete"));
                }
            }
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for arm in arms {
        for &k in ks {
            let done = reports(grid, arm, k);
            if let (Some(c), Some(g)) = (mean_of(&done, |r| r.collapse.mean), mean_of(&done, |r| r.gap())) {
                xs.push(c);
                ys.push(g);
            }
        }
    }
    let r = pearson(&xs, &ys);
    Verdict {
        id: 6,
        name: "collapse claim",
        pass: every_seed && r.is_some_and(|r| r < 0.0),
        detail: format!(
            "pearson(collapse, gap) over {} method points = {}; sg vs ng: {}",
            xs.len(),
            r.map_or("n/a".into(), |r| format!("{r:.3}")),
            per_seed.join(" ")
        ),
        required: false,
    }
}

const ABLATIONS: [(&str, &str); 5] = [
    ("no_align", "w_align"),
    ("no_reg", "w_reg"),
    ("no_ret", "w_ret"),
    ("no_cr", "w_cr"),
    ("no_del", "w_del"),
];

fn ablation_direction(grid: &SweepResult, report: &mut String) -> Verdict {
    let full = mean_of(&reports(grid, "structguard", 64), |r| r.a_r());
    let mut drops = Vec::new();
    writeln!(report, "ablation,ok,failed,mean_a_r,drop").unwrap();
    for (arm, _) in ABLATIONS {
        let done = reports(grid, arm, 64);
        let m = mean_of(&done, |r| r.a_r());
        let drop = full.zip(m).map(|(f, m)| f - m);
        writeln!(report, "{arm},{},{},{},{}", done.len(), cell_count(grid, arm, 64) - done.len(), fmt_opt(m), fmt_opt(drop)).unwrap();
        drops.push((arm, drop));
    }
    let complete = full.is_some() && drops.iter().all(|(_, d)| d.is_some());
    let largest = drops
        .iter()
        .filter_map(|(a, d)| d.map(|d| (*a, d)))
        .fold(None, |best: Option<(&str, f64)>, x| match best {
            Some(b) if b.1 >= x.1 => Some(b),
            _ => Some(x),
        });
    let listed: Vec<String> = drops.iter().map(|(a, d)| arm_entry(grid, a, 64, *d)).collect();
    Verdict {
        id: 7,
        name: "ablation direction",
        pass: complete && largest.is_some_and(|(a, _)| a == "no_align"),
        detail: format!(
            "full A_r {}; drops: {}",
            arm_entry(grid, "structguard", 64, full),
            listed.join(", ")
        ),
        required: false,
    }
}

fn anchor_direction(grid: &SweepResult, report: &mut String) -> Verdict {
    let rows = [("synthetic", "structguard"), ("prototype", "sg_prototype"), ("none (l2ul)", "l2ul")];
    writeln!(report, "anchors,arm,ok,failed,mean_a_r,mean_a_f").unwrap();
    let mut means = Vec::new();
    for (label, arm) in rows {
        let done = reports(grid, arm, 64);
        let a_r = mean_of(&done, |r| r.a_r());
        writeln!(
            report,
            "{label},{arm},{},{},{},{}",
            done.len(),
            cell_count(grid, arm, 64) - done.len(),
            fmt_opt(a_r),
            fmt_opt(mean_of(&done, |r| r.a_f()))
        )
        .unwrap();
        means.push(a_r);
    }
    let pass = matches!((means[0], means[1], means[2]), (Some(s), Some(p), Some(l)) if s > l && p > l);
    Verdict {
        id: 8,
        name: "anchor-type direction",
        pass,
        detail: format!(
            "mean A_r at k=64: {}",
            rows.iter()
                .zip(&means)
                .map(|((_, arm), m)| arm_entry(grid, arm, 64, *m))
                .collect::<Vec<_>>()
                .join(", ")
        ),
        required: false,
    }
}

fn variant_arm(v: AlignVariant) -> String {
    match v {
        AlignVariant::Cs => "structguard".into(),
        other => format!("sg_{}", other.name().to_lowercase()),
    }
}

fn variant_harness(grid: &SweepResult, report: &mut String) -> Verdict {
    writeln!(report, "variant,ok,failed,mean_a_r,mean_a_f").unwrap();
    let mut ranked = Vec::new();
    for v in AlignVariant::ALL {
        let arm = variant_arm(v);
        let done = reports(grid, &arm, 64);
        let a_r = mean_of(&done, |r| r.a_r());
        writeln!(
            report,
            "{},{},{},{},{}",
            v.name(),
            done.len(),
            cell_count(grid, &arm, 64) - done.len(),
            fmt_opt(a_r),
            fmt_opt(mean_of(&done, |r| r.a_f()))
        )
        .unwrap();
        ranked.push((v, a_r));
    }
    let all_ran = ranked.iter().all(|(_, m)| m.is_some());
    ranked.sort_by(|a, b| b.1.unwrap_or(f64::NEG_INFINITY).total_cmp(&a.1.unwrap_or(f64::NEG_INFINITY)));
    let cs_rank = ranked.iter().position(|(v, _)| *v == AlignVariant::Cs).unwrap();
    let listed: Vec<String> = ranked.iter().map(|(v, m)| arm_entry(grid, &variant_arm(*v), 64, *m)).collect();
    Verdict {
        id: 9,
        name: "alignment-variant harness",
        pass: all_ran && cs_rank < 2,
        detail: format!("mean A_r at k=64 ranked: {}", listed.join(", ")),
        required: false,
    }
}

fn consistency_and_confusion(grid: &SweepResult, ks: &[usize]) -> Verdict {
    let sg = mean_of(&reports(grid, "structguard", 64), |r| r.consistency.median);
    let ng = mean_of(&reports(grid, "neggrad", 64), |r| r.consistency.median);
    let higher = matches!((sg, ng), (Some(a), Some(b)) if a > b);
    let mut complete = 0;
    let mut zero_diag = 0;
    for c in &grid.cells {
        if let Some(r) = c.report() {
            if r.a_f() == 0.0 && ks.contains(&c.k) {
                complete += 1;
                if r.confusion.iter().enumerate().all(|(i, row)| row[i] == 0) {
                    zero_diag += 1;
                }
            }
        }
    }
    Verdict {
        id: 11,
        name: "consistency and forget confusion",
        pass: higher && complete > 0 && zero_diag == complete,
        detail: format!(
            "median consistency at k=64: {}, {}; zero diagonal in {zero_diag}/{complete} complete runs",
            arm_entry(grid, "structguard", 64, sg),
            arm_entry(grid, "neggrad", 64, ng)
        ),
        required: false,
    }
}

/// The main grid plus the ablation, anchor and variant arms at k=64.
fn full_grid(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = expand_grid(cfg).expect("grid");
    let mut extra = cfg.clone();
    extra.sweep.ks = vec![64];
    extra.sweep.arms = ABLATIONS
        .iter()
        .map(|(arm, w)| Arm::new(*arm, json!({"unlearn": {"weights": {*w: 0.0}}})))
        .collect();
    extra
        .sweep
        .arms
        .push(Arm::new("sg_prototype", json!({"anchors": {"kind": "prototype"}})));
    for v in AlignVariant::ALL.into_iter().filter(|v| *v != AlignVariant::Cs) {
        extra
            .sweep
            .arms
            .push(Arm::new(variant_arm(v), json!({"unlearn": {"align_variant": v}})));
    }
    cells.extend(expand_grid(&extra).expect("extra grid"));
    cells
}

fn main() {
    let cfg = base();
    let dir = out_dir();
    let mut verdicts = vec![gradient_oracle(), loss_identities(), hand_oracle()];

    let cells = full_grid(&cfg);
    let n = cells.len();
    let t0 = Instant::now();
    let grid = run_cells(cells).expect("grid run");
    println!("ran {n} cells in {:.0} s", t0.elapsed().as_secs_f64());
    grid.write_to_dir(&dir).expect("write grid");

    let arms: Vec<String> = cfg.sweep.arms.iter().map(|a| a.name.clone()).collect();
    let mut tables = BTreeMap::new();
    let mut ablation = String::new();
    let mut anchors = String::new();
    let mut variants = String::new();
    verdicts.push(deletion_completeness(&grid, &cfg.sweep.ks));
    verdicts.push(retention_ordering(&grid));
    verdicts.push(collapse_claim(&grid, &arms, &cfg.sweep.ks, &cfg.sweep.seeds));
    verdicts.push(ablation_direction(&grid, &mut ablation));
    verdicts.push(anchor_direction(&grid, &mut anchors));
    verdicts.push(variant_harness(&grid, &mut variants));
    verdicts.push(probe_quality());
    verdicts.push(consistency_and_confusion(&grid, &cfg.sweep.ks));
    verdicts.push(determinism_and_access(&grid));
    tables.insert("ablation.csv", ablation);
    tables.insert("anchors.csv", anchors);
    tables.insert("variants.csv", variants);
    for (name, body) in &tables {
        std::fs::write(dir.join(name), body).expect("write table");
        println!("--- {name}\n{body}");
    }
    println!("--- table.csv\n{}", grid.table_csv());

    verdicts.sort_by_key(|v| v.id);
    let mut broken = Vec::new();
    for v in &verdicts {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag}  {}: {}", v.id, v.name, v.detail);
        if v.required && !v.pass {
            broken.push(v.id);
        }
    }
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("{passed}/{} criteria pass; outputs in {}", verdicts.len(), dir.display());
    if !broken.is_empty() {
        eprintln!("exact criteria failed: {broken:?}");
        std::process::exit(1);
    }
}
