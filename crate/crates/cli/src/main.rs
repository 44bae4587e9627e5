//! `structguard` command-line driver.
//!
//! Stage commands share a working directory (`--out`): each reads what the
//! previous stage wrote there, so the pipeline can be run piecewise or in
//! one go with `run`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use structguard::anchor::{load_anchors, AnchorSet};
use structguard::datakit::{holdout, load_dataset_csv, save_dataset_csv, LabeledDataset, RetainSet};
use structguard::harness::*;
use structguard::model::{pretrain_with_losses, snapshot, ModelParams, PretrainConfig, Snapshot};
use structguard::probe::{gen_probes, load_probes_csv, probe_success_rate, save_probes_csv, ProbeConfig, ProbeSet};
use structguard::unlearn::{run_method, UnlearnConfig, UnlearnContext, UnlearnTrace};
use structguard::{Error, Result};

const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.json");

mod files {
    pub const DATA: &str = "data.csv";
    pub const TRAIN: &str = "train.csv";
    pub const TEST: &str = "test.csv";
    pub const FORGET: &str = "forget.csv";
    pub const RETAIN: &str = "retain.csv";
    pub const SPLIT: &str = "split.json";
    pub const SNAPSHOT: &str = "snapshot.json";
    pub const PRETRAIN_LOSS: &str = "pretrain_loss.csv";
    pub const ANCHORS: &str = "anchors.json";
    pub const PROBES: &str = "probes.csv";
    pub const MODEL: &str = "model.json";
    pub const TRACE_CSV: &str = "trace.csv";
    pub const TRACE_JSON: &str = "trace.json";
    pub const REPORT: &str = "report.json";
    pub const TABLE: &str = "table.csv";
    pub const ACCESS: &str = "access.json";
}

#[derive(Parser, Debug)]
#[command(name = "structguard", version, about = "Structure-faithful unlearning benchmark")]
struct Cli {
    /// Experiment config (JSON). The bundled default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or load) the labeled dataset.
    GenData,
    /// Hold out the test slice and draw the forget split.
    Split,
    /// Pretrain the model on the training slice, or load the configured checkpoint.
    Pretrain,
    /// Build the anchor set.
    GenAnchors,
    /// Generate targeted adversarial probes around the forget set.
    GenProbes,
    /// Run the configured unlearning method.
    Unlearn,
    /// Evaluate the unlearned model and write the report.
    Eval,
    /// Run the arm × k × seed grid from the config's sweep section.
    Sweep,
    /// Summarize a report file or a sweep directory.
    Report {
        /// Report JSON or directory; defaults to the working directory.
        path: Option<PathBuf>,
    },
    /// Run every stage for one config.
    Run,
    /// Print the effective config.
    Config,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        _ => 3,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::MissingFile(p) => Error::Config {
                path: "--config".into(),
                msg: format!("no such file: {p}"),
            },
            other => other,
        })?,
        None => ExperimentConfig::from_json_str(DEFAULT_CONFIG)?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::Report { path } = &cli.command {
        return report(path.as_deref().unwrap_or(&cli.out));
    }
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    if !matches!(cli.command, Command::Config) {
        std::fs::create_dir_all(out)?;
    }
    let seeds = SeedBlock::derive(cfg.seed);
    match cli.command {
        Command::GenData => gen_data(&cfg, &seeds, out),
        Command::Split => split(&cfg, &seeds, out),
        Command::Pretrain => pretrain_stage(&cfg, &seeds, out),
        Command::GenAnchors => gen_anchors(&cfg, &seeds, out),
        Command::GenProbes => gen_probes_stage(&cfg, &seeds, out),
        Command::Unlearn => unlearn(&cfg, &seeds, out),
        Command::Eval => eval(&cfg, &seeds, out),
        Command::Sweep => sweep_stage(&cfg, out),
        Command::Run => {
            let res = run_experiment_to_dir(&cfg, out)?;
            print_summary(&res.report);
            Ok(())
        }
        Command::Config => {
            println!("{}", cfg.to_json_pretty());
            Ok(())
        }
        Command::Report { .. } => unreachable!(),
    }
}

fn dataset(out: &Path, name: &str) -> Result<LabeledDataset> {
    load_dataset_csv(out.join(name))
}

fn load_snapshot(out: &Path) -> Result<Snapshot> {
    Ok(snapshot(&ModelParams::load_json(out.join(files::SNAPSHOT))?, "ori"))
}

fn gen_data(cfg: &ExperimentConfig, seeds: &SeedBlock, out: &Path) -> Result<()> {
    let data = load_or_generate_data(cfg, seeds)?;
    save_dataset_csv(&data, out.join(files::DATA))?;
    println!("{} samples, {} classes, dim {}", data.len(), data.class_count(), data.dim());
    Ok(())
}

fn split(cfg: &ExperimentConfig, seeds: &SeedBlock, out: &Path) -> Result<()> {
    let data = match load_dataset_csv(out.join(files::DATA)) {
        Ok(d) => d,
        Err(Error::MissingFile(_)) => load_or_generate_data(cfg, seeds)?,
        Err(e) => return Err(e),
    };
    let (train, test) = holdout(&data, cfg.data.test_fraction, seeds.holdout)?;
    let split = make_split(cfg, &train, seeds.split)?;
    save_dataset_csv(&train, out.join(files::TRAIN))?;
    save_dataset_csv(&test, out.join(files::TEST))?;
    save_dataset_csv(&split.forget, out.join(files::FORGET))?;
    save_dataset_csv(split.retain.for_evaluation(), out.join(files::RETAIN))?;
    let meta = json!({
        "mode": split.mode,
        "seed": split.seed,
        "forgotten_classes": split.forgotten_classes,
        "forget_indices": split.forget_indices,
        "retain_indices": split.retain_indices,
    });
    std::fs::write(out.join(files::SPLIT), serde_json::to_string_pretty(&meta)?)?;
    println!(
        "train {}, test {}, forget {}, retain {}",
        train.len(),
        test.len(),
        split.forget.len(),
        split.retain_indices.len()
    );
    Ok(())
}

fn pretrain_stage(cfg: &ExperimentConfig, seeds: &SeedBlock, out: &Path) -> Result<()> {
    let train = dataset(out, files::TRAIN)?;
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
            let init = ModelParams::init(dims, seeds.init)?;
            let pcfg = PretrainConfig {
                seed: seeds.pretrain,
                ..cfg.model.pretrain.clone()
            };
            let (p, losses) = pretrain_with_losses(&init, &train, &pcfg)?;
            let mut csv = String::from("epoch,loss\n");
            for (i, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l:?}\n"));
            }
            std::fs::write(out.join(files::PRETRAIN_LOSS), csv)?;
            p
        }
    };
    trained.save_json(out.join(files::SNAPSHOT))?;
    let acc = accuracy(&trained, &train, EvalPath::Direct)?;
    println!("train accuracy {acc:.2}%");
    Ok(())
}

fn gen_anchors(cfg: &ExperimentConfig, seeds: &SeedBlock, out: &Path) -> Result<()> {
    let snap = load_snapshot(out)?;
    let retain = RetainSet::new(dataset(out, files::RETAIN)?);
    let dims = &snap.params().dims;
    let anchors = build_anchors(&cfg.anchors, dims.b, dims.d, seeds.anchors, &snap, &retain)?;
    anchors.save(out.join(files::ANCHORS))?;
    write_access(
        out,
        Access {
            anchor_construction_reads: retain.reads(),
            ..read_access(out)?
        },
    )?;
    println!("{} anchors of dim {} ({:?})", anchors.b(), anchors.d(), anchors.source());
    Ok(())
}

fn gen_probes_stage(cfg: &ExperimentConfig, seeds: &SeedBlock, out: &Path) -> Result<()> {
    let snap = load_snapshot(out)?;
    let forget = dataset(out, files::FORGET)?;
    let pcfg = ProbeConfig {
        seed: seeds.probes,
        ..cfg.probes.clone()
    };
    let probes = gen_probes(&snap, &forget, &pcfg)?;
    save_probes_csv(&probes, out.join(files::PROBES))?;
    println!(
        "{} probes, target success {:.3}",
        probes.len(),
        probe_success_rate(&snap, &probes)?
    );
    Ok(())
}

/// Retain reads and timing recorded by the anchor and unlearning stages.
#[derive(Debug, Default, Serialize, Deserialize)]
struct Access {
    anchor_construction_reads: usize,
    unlearning_reads: usize,
    unlearn_ms: f64,
}

fn read_access(out: &Path) -> Result<Access> {
    let path = out.join(files::ACCESS);
    if !path.exists() {
        return Ok(Access::default());
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn write_access(out: &Path, a: Access) -> Result<()> {
    std::fs::write(out.join(files::ACCESS), serde_json::to_string_pretty(&a)?)?;
    Ok(())
}

/// Upstream artifacts an unlearning run needs.
struct Stage {
    snap: Snapshot,
    forget: LabeledDataset,
    retain: RetainSet,
    anchors: AnchorSet,
    probes: ProbeSet,
}

fn load_stage(out: &Path) -> Result<Stage> {
    Ok(Stage {
        snap: load_snapshot(out)?,
        forget: dataset(out, files::FORGET)?,
        retain: RetainSet::new(dataset(out, files::RETAIN)?),
        anchors: load_anchors(out.join(files::ANCHORS))?,
        probes: load_probes_csv(out.join(files::PROBES))?,
    })
}

fn unlearn(cfg: &ExperimentConfig, seeds: &SeedBlock, out: &Path) -> Result<()> {
    let st = load_stage(out)?;
    let fresh = ModelParams::init(st.snap.params().dims.clone(), seeds.oracle_init)?;
    let ctx = UnlearnContext {
        snapshot: &st.snap,
        forget: &st.forget,
        probes: &st.probes,
        anchors: &st.anchors,
    };
    let ucfg = UnlearnConfig {
        seed: seeds.unlearn,
        ..cfg.unlearn.clone()
    };
    let started = Instant::now();
    let (model, trace) = run_method(st.snap.params(), Some(&fresh), Some(&st.retain), &ctx, &ucfg)?;
    let ms = started.elapsed().as_secs_f64() * 1e3;
    model.save_json(out.join(files::MODEL))?;
    std::fs::write(out.join(files::TRACE_CSV), trace.to_csv(true))?;
    std::fs::write(out.join(files::TRACE_JSON), serde_json::to_string(&trace)?)?;
    write_access(
        out,
        Access {
            unlearning_reads: st.retain.reads(),
            unlearn_ms: ms,
            ..read_access(out)?
        },
    )?;
    println!(
        "{}: {} steps in {ms:.0} ms, retain reads {}",
        ucfg.method.name(),
        trace.len(),
        st.retain.reads()
    );
    Ok(())
}

fn eval(cfg: &ExperimentConfig, seeds: &SeedBlock, out: &Path) -> Result<()> {
    let st = load_stage(out)?;
    let test = dataset(out, files::TEST)?;
    let model = ModelParams::load_json(out.join(files::MODEL))?;
    let trace_path = out.join(files::TRACE_JSON);
    if !trace_path.exists() {
        return Err(Error::MissingFile(trace_path.display().to_string()));
    }
    let trace: UnlearnTrace = serde_json::from_str(&std::fs::read_to_string(&trace_path)?)?;
    let access = read_access(out)?;
    let retain = RetainSet::with_recorded_reads(
        st.retain.for_evaluation().clone(),
        access.unlearning_reads,
    );
    let report = evaluate(EvalInputs {
        config: cfg,
        seeds: seeds.clone(),
        test: &test,
        retain: &retain,
        forget: &st.forget,
        snapshot: &st.snap,
        model: &model,
        anchors: &st.anchors,
        probes: &st.probes,
        trace: &trace,
        anchor_reads: access.anchor_construction_reads,
        anchors_before: st.anchors.checksum(),
        snapshot_before: params_checksum(st.snap.params()),
        prepare_ms: 0.0,
        unlearn_ms: access.unlearn_ms,
    })?;
    report.save(out.join(files::REPORT))?;
    print_summary(&report);
    Ok(())
}

fn sweep_stage(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let cells = expand_grid(cfg)?;
    eprintln!("running {} cells", cells.len());
    let res = run_cells(cells)?;
    res.write_to_dir(out)?;
    print!("{}", res.table_csv());
    let failed = res.cells.iter().filter(|c| c.outcome.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} cells failed; see failures.csv");
    }
    Ok(())
}

fn print_summary(r: &RunReport) {
    println!(
        "{}: A_test {:.2}  A_r {:.2}  A_f {:.2}  deletion {:.2}  collapse {:.4}  consistency {:.4}  steps {}",
        r.run.method.name(),
        r.a_test(),
        r.a_r(),
        r.a_f(),
        r.deletion_score,
        r.collapse.mean,
        r.consistency.median,
        r.run.steps_executed
    );
}

fn report(path: &Path) -> Result<()> {
    let file = if path.is_dir() {
        let table = path.join(files::TABLE);
        if table.exists() {
            print!("{}", std::fs::read_to_string(table)?);
            return Ok(());
        }
        path.join(files::REPORT)
    } else {
        path.to_path_buf()
    };
    if !file.exists() {
        return Err(Error::MissingFile(file.display().to_string()));
    }
    let r = RunReport::load(&file)?;
    print_summary(&r);
    println!(
        "before: A_test {:.2}  A_r {:.2}  A_f {:.2}",
        r.before.direct.test, r.before.direct.retain, r.before.direct.forget
    );
    for m in [Some(&r.retrieval.retain_query), r.retrieval.forget_query.as_ref()]
        .into_iter()
        .flatten()
    {
        let recall: Vec<String> = m.recall.iter().map(|(k, v)| format!("R@{k} {v:.1}")).collect();
        println!("retrieval ({} queries): {}  mAP {:.2}", m.queries, recall.join("  "), m.map);
    }
    println!("retain reads during unlearning: {}", r.access.unlearning_reads);
    Ok(())
}
