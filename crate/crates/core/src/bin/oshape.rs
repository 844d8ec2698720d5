use clap::{Args, Parser, Subcommand, ValueEnum};
use oshape::baselines::{qam_constellation, SlmConfig, SlmTable};
use oshape::checkpoint::{Checkpoint, CheckpointKind};
use oshape::config::ExperimentConfig;
use oshape::error::Error;
use oshape::graph::Faults;
use oshape::metrics::{
    eval_mi_with, eval_papr_ccdf, eval_ser, Detector, MetricCurve, TxSystem, CCDF_COLUMNS, MI_COLUMNS,
    SER_COLUMNS,
};
use oshape::nn::Mlp;
use oshape::ofdm::NoiseSpec;
use oshape::trainer::{train_demapper, train_two_phase_with, trace_csv, DemapperConfig, TraceRow};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "oshape", version, about = "ACO-OFDM constellation shaping experiments")]
struct Cli {
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-phase training of a shaped model.
    Train(TrainArgs),
    /// Train an NN3 demapper for uniform square QAM.
    TrainDemapper(TrainArgs),
    /// Evaluate checkpoints.
    Eval(EvalArgs),
    /// Evaluate a non-learning reference system.
    Baseline(BaselineArgs),
    /// Write the learned constellation table.
    Export(ExportArgs),
    /// Run the fast invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Args, Default)]
struct Overrides {
    /// Flat key=value config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n_data: Option<usize>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    batch_symbols: Option<usize>,
    #[arg(long)]
    steps_phase1: Option<usize>,
    #[arg(long)]
    steps_phase2: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// SNR grid, `start:stop:step` or a comma list.
    #[arg(long)]
    snr_grid: Option<String>,
    #[arg(long)]
    n_frames: Option<usize>,
    #[arg(long)]
    n_symbols: Option<usize>,
    /// PAPR₀ grid in dB.
    #[arg(long)]
    thresholds: Option<String>,
    /// SLM candidates.
    #[arg(long)]
    u: Option<usize>,
    /// Clipping ratio in dB.
    #[arg(long)]
    cr_db: Option<f64>,
    #[arg(long)]
    demapper_steps: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    o: Overrides,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Mi,
    Ser,
    Papr,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint(s). With several, each is evaluated at its training SNR.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, value_enum)]
    metric: Metric,
    #[command(flatten)]
    o: Overrides,
    /// Output CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Uniform,
    Clip,
    Slm,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(value_enum)]
    kind: Kind,
    #[arg(long, value_enum)]
    metric: Metric,
    #[command(flatten)]
    o: Overrides,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// NN1 conditioning SNR (defaults to the training SNR).
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, hide = true, value_enum)]
    inject_fault: Option<Fault>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Fault {
    ClipAdjoint,
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::Checkpoint { .. } | Error::Consistency(_) => 2,
            Error::Diverged { .. } | Error::NonFinite { .. } => 3,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 1,
            msg: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Defaults, then the config file, then flags. A seed is mandatory.
fn resolve(o: &Overrides, base: Option<ExperimentConfig>, need_seed: bool) -> CliResult<ExperimentConfig> {
    let mut cfg = base.unwrap_or_default();
    let mut seeded = false;
    if let Some(path) = &o.config {
        let text = std::fs::read_to_string(path)?;
        seeded |= cfg.apply_text(&text)?.iter().any(|k| k == "seed");
    }
    let flags: [(&str, Option<String>); 17] = [
        ("seed", o.seed.map(|v| v.to_string())),
        ("m", o.m.map(|v| v.to_string())),
        ("n_data", o.n_data.map(|v| v.to_string())),
        ("snr_db", o.snr_db.map(|v| v.to_string())),
        ("lambda", o.lambda.map(|v| v.to_string())),
        ("tau", o.tau.map(|v| v.to_string())),
        ("batch_symbols", o.batch_symbols.map(|v| v.to_string())),
        ("steps_phase1", o.steps_phase1.map(|v| v.to_string())),
        ("steps_phase2", o.steps_phase2.map(|v| v.to_string())),
        ("lr", o.lr.map(|v| v.to_string())),
        ("snr_grid", o.snr_grid.clone()),
        ("n_frames", o.n_frames.map(|v| v.to_string())),
        ("n_symbols", o.n_symbols.map(|v| v.to_string())),
        ("thresholds", o.thresholds.clone()),
        ("slm_u", o.u.map(|v| v.to_string())),
        ("clip_cr_db", o.cr_db.map(|v| v.to_string())),
        ("demapper_steps", o.demapper_steps.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
            seeded |= k == "seed";
        }
    }
    if need_seed && !seeded {
        return Err(Error::config("seed", "randomized commands need an explicit --seed").into());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(out: Option<&Path>, text: &str, cfg: &ExperimentConfig) -> CliResult {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, text)?;
            let mut side = path.as_os_str().to_owned();
            side.push(".resolved.cfg");
            std::fs::write(PathBuf::from(side), cfg.resolved_text())?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn progress(row: &TraceRow) {
    if row.step.is_multiple_of(500) {
        eprintln!(
            "step {:>6} phase {} ce {:.4} mi {:.4} bits papr {:.3} dB",
            row.step,
            row.phase as u8,
            row.loss.cross_entropy,
            row.loss.mi_bits(),
            row.loss.papr_db()
        );
    }
}

fn cmd_train(a: &TrainArgs) -> CliResult {
    let cfg = resolve(&a.o, None, true)?;
    std::fs::create_dir_all(&a.out)?;
    let hash = cfg.hash();
    std::fs::write(a.out.join("resolved.cfg"), cfg.resolved_text())?;
    let mut rows = Vec::new();
    let result = train_two_phase_with(&cfg.train, |r| {
        progress(r);
        rows.push(*r);
    });
    let header = format!("config_hash={hash}");
    std::fs::write(a.out.join("trace.csv"), trace_csv(&rows, Some(&header)))?;
    let run = result?;
    Checkpoint::from_run(&run, &hash)?.save(&a.out.join("model.ckpt"))?;
    let table = run.model.constellation(cfg.train.snr_db)?;
    std::fs::write(
        a.out.join("constellation.txt"),
        table.to_table(&[header, format!("snr_db={}", cfg.train.snr_db)]),
    )?;
    let last = run.final_loss;
    println!(
        "trained {} steps: mi {:.4} bits, entropy {:.4} bits, papr {:.3} dB",
        run.trace.len(),
        last.mi_bits(),
        last.entropy / std::f64::consts::LN_2,
        last.papr_db()
    );
    Ok(())
}

fn cmd_train_demapper(a: &TrainArgs) -> CliResult {
    let cfg = resolve(&a.o, None, true)?;
    std::fs::create_dir_all(&a.out)?;
    let hash = cfg.hash();
    std::fs::write(a.out.join("resolved.cfg"), cfg.resolved_text())?;
    let q = qam_constellation(cfg.train.m)?;
    let dcfg = demapper_config(&cfg, cfg.train.snr_db);
    let nn3 = train_demapper(&q.points, &dcfg)?;
    Checkpoint::from_demapper(&nn3, q.m, &dcfg, &hash).save(&a.out.join("model.ckpt"))?;
    Ok(())
}

fn demapper_config(cfg: &ExperimentConfig, snr_db: f64) -> DemapperConfig {
    DemapperConfig {
        n_data: cfg.train.n_data,
        snr_db,
        batch_symbols: cfg.train.batch_symbols,
        steps: cfg.demapper_steps,
        lr: cfg.train.lr,
        seed: cfg.train.seed,
    }
}

fn comments(cfg: &ExperimentConfig, system: String) -> Vec<String> {
    vec![format!("config_hash={}", cfg.hash()), format!("system={system}")]
}

fn cmd_eval(a: &EvalArgs, threads: usize) -> CliResult {
    let ckpts: Vec<Checkpoint> = a
        .checkpoint
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<_, _>>()?;
    let first = &ckpts[0];
    let mut base = ExperimentConfig::default();
    if first.kind == CheckpointKind::Shaped {
        base.train = first.train_config()?;
    } else {
        base.train.m = first.m()?;
        base.train.n_data = first.n_data()?;
        base.train.snr_db = first.snr_db()?;
    }
    let cfg = resolve(&a.o, Some(base), true)?;
    let seed = cfg.train.seed;
    let n_data = cfg.train.n_data;
    for c in &ckpts {
        if c.kind == CheckpointKind::UniformDemapper && a.metric != Metric::Mi {
            return Err(Error::Consistency(format!(
                "a {} checkpoint only supports --metric mi; use `baseline` for uniform QAM",
                c.kind.as_str()
            ))
            .into());
        }
        if c.n_data()? != n_data {
            return Err(Error::Consistency("checkpoints disagree on n_data".into()).into());
        }
    }
    let grid = cfg.snr_points()?;
    // one checkpoint sweeps the grid; several are each read at their own SNR
    let points: Vec<(usize, f64)> = if ckpts.len() == 1 {
        grid.iter().map(|&s| (0, s)).collect()
    } else {
        ckpts.iter().enumerate().map(|(i, c)| Ok((i, c.snr_db()?))).collect::<Result<_, Error>>()?
    };
    let q = qam_constellation(cfg.train.m).ok();
    let text = match a.metric {
        Metric::Mi => {
            let mut curve = MetricCurve::new("mi", seed);
            for &(i, snr) in &points {
                let (sys, nn3) = system_for(&ckpts[i], snr, q.as_ref())?;
                let frames = cfg.n_symbols.div_ceil(n_data);
                let est = eval_mi_with(&sys, &nn3, n_data, snr, frames, seed, threads)?;
                curve.push(snr, est.bits, est.n_symbols);
            }
            curve.to_csv(MI_COLUMNS, &comments(&cfg, "checkpoint".into()))
        }
        Metric::Ser => {
            let mut curve = MetricCurve::new("ser", seed);
            for &(i, snr) in &points {
                let (sys, nn3) = system_for(&ckpts[i], snr, q.as_ref())?;
                let noise = NoiseSpec::from_snr_db(snr);
                let est = eval_ser(&sys, Detector::Demapper(&nn3), n_data, &noise, cfg.n_symbols, seed, threads)?;
                curve.push(snr, est.ser(), est.n_symbols);
            }
            curve.to_csv(SER_COLUMNS, &comments(&cfg, "checkpoint".into()))
        }
        Metric::Papr => {
            let thresholds = cfg.threshold_points()?;
            let mut out = String::new();
            for (i, c) in ckpts.iter().enumerate() {
                let snr = c.snr_db()?;
                let (sys, _) = system_for(c, snr, q.as_ref())?;
                let curve = eval_papr_ccdf(&sys, n_data, cfg.n_frames, &thresholds, seed, threads)?;
                let mut cm = comments(&cfg, format!("checkpoint snr_db={snr}"));
                if i > 0 {
                    cm.clear();
                    cm.push(format!("system=checkpoint snr_db={snr}"));
                }
                out.push_str(&curve.to_csv(CCDF_COLUMNS, &cm));
            }
            out
        }
    };
    write_out(a.out.as_deref(), &text, &cfg)
}

fn system_for(
    c: &Checkpoint,
    snr: f64,
    q: Option<&oshape::baselines::UniformQam>,
) -> Result<(TxSystem<'static>, Mlp), Error> {
    match c.kind {
        CheckpointKind::Shaped => {
            let (model, _) = c.shaping_model()?;
            Ok((TxSystem::Shaped(model.constellation(snr)?), model.nn3.clone()))
        }
        CheckpointKind::UniformDemapper => {
            let q = q.ok_or_else(|| Error::config("m", "not a square QAM order"))?;
            let nn3 = c.demapper()?;
            if nn3.output_width() != q.m {
                return Err(Error::Consistency("demapper width differs from m".into()));
            }
            let table = oshape::shaping::ShapedConstellation {
                points: q.points.clone(),
                probs: q.probs.clone(),
                gamma: 1.0,
            };
            Ok((TxSystem::Shaped(table), nn3))
        }
    }
}

fn cmd_baseline(a: &BaselineArgs, threads: usize) -> CliResult {
    let cfg = resolve(&a.o, None, true)?;
    let seed = cfg.train.seed;
    let n_data = cfg.train.n_data;
    let q = qam_constellation(cfg.train.m)?;
    let table = SlmTable::new(&SlmConfig { u: cfg.slm_u, seed }, n_data)?;
    let (sys, name) = match a.kind {
        Kind::Uniform => (TxSystem::Uniform(&q), format!("uniform m={}", q.m)),
        Kind::Clip => (
            TxSystem::Clip {
                qam: &q,
                cr_db: cfg.clip_cr_db,
            },
            format!("clip m={} cr_db={}", q.m, cfg.clip_cr_db),
        ),
        Kind::Slm => (
            TxSystem::Slm { qam: &q, table: &table },
            format!("slm m={} u={}", q.m, cfg.slm_u),
        ),
    };
    let grid = cfg.snr_points()?;
    let text = match a.metric {
        Metric::Mi => {
            if a.kind != Kind::Uniform {
                return Err(Error::Consistency("MI is only defined here for the uniform baseline".into()).into());
            }
            let mut curve = MetricCurve::new("mi", seed);
            for &snr in &grid {
                let nn3 = train_demapper(&q.points, &demapper_config(&cfg, snr))?;
                let frames = cfg.n_symbols.div_ceil(n_data);
                let est = eval_mi_with(&sys, &nn3, n_data, snr, frames, seed, threads)?;
                curve.push(snr, est.bits, est.n_symbols);
            }
            curve.to_csv(MI_COLUMNS, &comments(&cfg, name))
        }
        Metric::Ser => {
            let mut curve = MetricCurve::new("ser", seed);
            for &snr in &grid {
                let noise = NoiseSpec::from_snr_db(snr);
                let est = eval_ser(&sys, Detector::MinDistance, n_data, &noise, cfg.n_symbols, seed, threads)?;
                curve.push(snr, est.ser(), est.n_symbols);
            }
            curve.to_csv(SER_COLUMNS, &comments(&cfg, name))
        }
        Metric::Papr => {
            let curve = eval_papr_ccdf(&sys, n_data, cfg.n_frames, &cfg.threshold_points()?, seed, threads)?;
            curve.to_csv(CCDF_COLUMNS, &comments(&cfg, name))
        }
    };
    write_out(a.out.as_deref(), &text, &cfg)
}

fn cmd_export(a: &ExportArgs) -> CliResult {
    let c = Checkpoint::load(&a.checkpoint)?;
    let (model, train) = c.shaping_model()?;
    let snr = a.snr_db.unwrap_or(train.snr_db);
    let table = model.constellation(snr)?;
    let hash = c.get("config_hash").unwrap_or("unknown").to_string();
    let text = table.to_table(&[format!("config_hash={hash}"), format!("snr_db={snr}")]);
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs) -> CliResult {
    let faults = Faults {
        break_clip_adjoint: a.inject_fault == Some(Fault::ClipAdjoint),
    };
    let start = std::time::Instant::now();
    let report = oshape::selftest::run(faults)?;
    for r in &report {
        println!("{r}");
    }
    let failed: Vec<&str> = report.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    println!("elapsed {:.2} s", start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            msg: format!("failed checks: {}", failed.join(", ")),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Train(a) => cmd_train(a),
        Command::TrainDemapper(a) => cmd_train_demapper(a),
        Command::Eval(a) => cmd_eval(a, cli.threads),
        Command::Baseline(a) => cmd_baseline(a, cli.threads),
        Command::Export(a) => cmd_export(a),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
