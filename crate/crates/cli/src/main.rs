use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nflows::flows::{load_model, save_model, train, Architecture, FlowConfig, FlowModel, InitMode, TrainConfig};
use nflows::harness::{
    build_nulls, emit_report, evaluate_model, load_nulls, load_run, run_grid, save_nulls, save_run,
    DataSizes, NullDistribution, RunConfig, RunResult,
};
use nflows::metrics::{sample_directions, Statistic};
use nflows::seeds::derive_seed;
use nflows::targets::{make_cmog, read_points_csv, sample_cmog, CmogSpec};

#[derive(Parser)]
#[command(name = "nflows", version, about = "Train and benchmark normalizing flows on correlated Gaussian mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random mixture target and optionally sample it.
    GenTarget(GenTarget),
    /// Build the null distributions of the three test statistics.
    Null(NullCmd),
    /// Train one flow on target samples.
    Train(TrainCmd),
    /// Compare a trained flow against fresh target samples.
    Evaluate(EvaluateCmd),
    /// Write the results table, samples and histograms of a saved run.
    Report(ReportCmd),
    /// Train, evaluate and rank every replica of a hyperparameter grid.
    Grid(GridCmd),
}

#[derive(Args)]
struct GenTarget {
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    components: usize,
    #[arg(long)]
    seed: u64,
    /// Where to write the target specification (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Also write this many samples as CSV.
    #[arg(long, requires = "samples_out")]
    samples: Option<usize>,
    #[arg(long)]
    samples_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    samples_seed: u64,
}

#[derive(Args)]
struct NullCmd {
    #[arg(long)]
    target: PathBuf,
    /// Points per sample in each pseudo-experiment.
    #[arg(long, default_value_t = 10_000)]
    sample_size: usize,
    #[arg(long, default_value_t = 1_000)]
    n_pseudo: usize,
    #[arg(long)]
    seed: u64,
    /// Seed of the sliced-Wasserstein direction set; evaluation must use
    /// the same one.
    #[arg(long)]
    directions_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    #[value(name = "realnvp")]
    RealNvp,
    Maf,
    #[value(name = "c-rqs")]
    CRqs,
    #[value(name = "a-rqs")]
    ARqs,
}

impl From<Arch> for Architecture {
    fn from(a: Arch) -> Self {
        match a {
            Arch::RealNvp => Architecture::RealNvp,
            Arch::Maf => Architecture::Maf,
            Arch::CRqs => Architecture::CRqs,
            Arch::ARqs => Architecture::ARqs,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum)]
    arch: Arch,
    #[arg(long)]
    bijectors: usize,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "128,128,128")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    bins: usize,
    #[arg(long, default_value_t = 16.0)]
    bound: f64,
}

impl ModelArgs {
    fn config(&self, dim: usize) -> FlowConfig {
        FlowConfig::new(self.arch.into(), dim, self.bijectors, self.hidden.clone()).with_spline(self.bins, self.bound)
    }
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Training points; ignored when --train-csv is given.
    #[arg(long, default_value_t = 10_000)]
    train_size: usize,
    #[arg(long, default_value_t = 3_000)]
    validation_size: usize,
    #[arg(long)]
    train_csv: Option<PathBuf>,
    #[arg(long, requires = "train_csv")]
    validation_csv: Option<PathBuf>,
    /// Seed for the generated training and validation data.
    #[arg(long)]
    data_seed: u64,
    #[arg(long)]
    model_seed: u64,
    #[arg(long)]
    train_seed: u64,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Start from the identity map instead of random conditioners.
    #[arg(long)]
    identity_init: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write the training report (JSON).
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateCmd {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Null file written by `null`.
    #[arg(long)]
    nulls: PathBuf,
    #[arg(long)]
    directions_seed: u64,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportCmd {
    /// Run file written by `grid`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    bins: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Desk,
    Full,
}

#[derive(Args)]
struct GridCmd {
    #[arg(long)]
    dim: usize,
    /// Grid point as ARCH:BIJECTORS:WIDTHxDEPTH[:BINS[:BOUND]], e.g.
    /// `a-rqs:2:128x3:8:16`. Repeat for several points.
    #[arg(long = "point", required_unless_present = "grid_file")]
    points: Vec<String>,
    /// JSON array of flow configurations, used instead of --point.
    #[arg(long, conflicts_with = "points")]
    grid_file: Option<PathBuf>,
    /// Target specification; by default one is drawn from the master seed.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    validation_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    n_pseudo: Option<usize>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Also evaluate every model before training.
    #[arg(long)]
    evaluate_untrained: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    bins: usize,
}

fn parse_point(s: &str, dim: usize) -> Result<FlowConfig> {
    let parts: Vec<&str> = s.split(':').collect();
    if !(3..=5).contains(&parts.len()) {
        bail!("grid point {s:?} should look like ARCH:BIJECTORS:WIDTHxDEPTH[:BINS[:BOUND]]");
    }
    let arch: Architecture = parts[0].parse()?;
    let bijectors = parts[1].parse().with_context(|| format!("bijector count in {s:?}"))?;
    let (width, depth) = parts[2]
        .split_once('x')
        .ok_or_else(|| anyhow!("hidden layers in {s:?} should be WIDTHxDEPTH"))?;
    let hidden = vec![width.parse::<usize>()?; depth.parse::<usize>()?];
    let mut c = FlowConfig::new(arch, dim, bijectors, hidden);
    if let Some(b) = parts.get(3) {
        c.bins = b.parse().with_context(|| format!("bins in {s:?}"))?;
    }
    if let Some(b) = parts.get(4) {
        c.bound = b.parse().with_context(|| format!("bound in {s:?}"))?;
    }
    Ok(c)
}

fn null_array(nulls: Vec<NullDistribution>) -> Result<[NullDistribution; 3]> {
    let pick = |s: Statistic| {
        nulls
            .iter()
            .find(|n| n.statistic == s)
            .cloned()
            .ok_or_else(|| anyhow!("null file has no {} distribution", s.name()))
    };
    Ok([pick(Statistic::Ks)?, pick(Statistic::Swd)?, pick(Statistic::Fn)?])
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_target(a: GenTarget) -> Result<()> {
    let spec = make_cmog(a.dim, a.components, a.seed)?;
    spec.save(&a.out)?;
    if let (Some(n), Some(path)) = (a.samples, &a.samples_out) {
        sample_cmog(&spec, n, a.samples_seed).save_csv(path)?;
    }
    println!("target: {} components in {} dimensions -> {}", spec.n_components, spec.dim, a.out.display());
    Ok(())
}

fn null(a: NullCmd) -> Result<()> {
    let spec = CmogSpec::load(&a.target)?;
    let dirs = sample_directions(spec.dim, a.directions_seed);
    let nulls = build_nulls(&spec, a.sample_size, a.n_pseudo, &dirs, a.seed)?;
    save_nulls(&nulls, &a.out)?;
    for n in &nulls {
        println!(
            "{}: mean {:.4}, thresholds {:.4} / {:.4} / {:.4}",
            n.statistic,
            n.mean(),
            n.threshold(nflows::harness::SigmaLevel::One),
            n.threshold(nflows::harness::SigmaLevel::Two),
            n.threshold(nflows::harness::SigmaLevel::Three)
        );
    }
    Ok(())
}

fn train_cmd(a: TrainCmd) -> Result<()> {
    let spec = CmogSpec::load(&a.target)?;
    let (train_data, val_data) = match (&a.train_csv, &a.validation_csv) {
        (Some(t), Some(v)) => (read_points_csv(t)?, read_points_csv(v)?),
        (Some(_), None) => bail!("--train-csv needs --validation-csv"),
        _ => (
            sample_cmog(&spec, a.train_size, derive_seed(a.data_seed, "train-data", 0)).data,
            sample_cmog(&spec, a.validation_size, derive_seed(a.data_seed, "validation-data", 0)).data,
        ),
    };
    let init = if a.identity_init { InitMode::Identity } else { InitMode::Random };
    let mut model = FlowModel::new(a.model.config(spec.dim), init, a.model_seed)?;
    let mut cfg = TrainConfig::for_architecture(model.architecture(), a.train_seed);
    if let Some(m) = a.max_epochs {
        cfg.max_epochs = m;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    let report = train(&mut model, &train_data, &val_data, &cfg)?;
    save_model(&model, &a.out)?;
    if let Some(path) = &a.report_out {
        write_json(&report, path)?;
    }
    println!(
        "{}: {} epochs in {:.1} s, best validation loss {:.4} -> {}",
        model.config().label(),
        report.epochs,
        report.seconds,
        report.best_val_loss,
        a.out.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateCmd) -> Result<()> {
    let spec = CmogSpec::load(&a.target)?;
    let model = load_model(&a.model)?;
    let nulls = null_array(load_nulls(&a.nulls)?)?;
    let dirs = sample_directions(spec.dim, a.directions_seed);
    let n = nulls[0].sample_size;
    let outcome = evaluate_model(&model, &spec, n, a.repeats, &nulls, &dirs, a.seed)?;
    for o in &outcome.outcomes {
        println!(
            "{}: {:.4} ± {:.4}, p = {:.3} ({})",
            o.statistic,
            o.mean,
            o.std,
            o.p_value,
            o.sigma.label()
        );
    }
    if outcome.discarded_repeats > 0 {
        println!("{} of {} repeats discarded for non-finite samples", outcome.discarded_repeats, outcome.repeats);
    }
    if let Some(path) = &a.out {
        write_json(&outcome, path)?;
    }
    Ok(())
}

fn report(a: ReportCmd) -> Result<()> {
    let run = load_run(&a.run)?;
    let best = run.best_model()?;
    let files = emit_report(&run, best.as_ref(), &a.out, a.bins)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn grid(a: GridCmd) -> Result<bool> {
    let grid: Vec<FlowConfig> = match &a.grid_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => a.points.iter().map(|p| parse_point(p, a.dim)).collect::<Result<_>>()?,
    };
    let mut cfg = RunConfig::desk(a.dim, grid, a.seed)?;
    if let Some(path) = &a.target {
        cfg.target = CmogSpec::load(path)?;
    }
    let mut sizes = match a.scale {
        Scale::Desk => DataSizes::desk(),
        Scale::Full => DataSizes::full(),
    };
    for (field, value) in [
        (&mut sizes.train, a.train_size),
        (&mut sizes.validation, a.validation_size),
        (&mut sizes.test, a.test_size),
        (&mut sizes.n_pseudo, a.n_pseudo),
        (&mut sizes.replicas, a.replicas),
        (&mut sizes.repeats, a.repeats),
    ] {
        if let Some(v) = value {
            *field = v;
        }
    }
    cfg.sizes = sizes;
    cfg.max_epochs = a.max_epochs;
    cfg.evaluate_untrained = a.evaluate_untrained;
    cfg.output = Some(a.out.clone());
    let run: RunResult = run_grid(&cfg, &mut |line| eprintln!("{line}"))?;
    save_run(&run, &a.out.join("run.json"))?;
    let best = run.best_model()?;
    emit_report(&run, best.as_ref(), &a.out.join("report"), a.bins)?;
    let failed: usize = run.points.iter().map(|p| p.failed_count()).sum();
    match &run.selection {
        Ok(s) => println!(
            "best: {} (replica {}), mean t_KS {:.4}, best t_KS {:.4}",
            run.points[s.average_best].config.label(),
            s.absolute_best,
            s.mean_ks,
            s.best_ks
        ),
        Err(e) => eprintln!("no selection: {e}"),
    }
    if failed > 0 {
        eprintln!("{failed} replicas failed");
    }
    Ok(failed == 0 && run.selection.is_ok())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTarget(a) => gen_target(a).map(|_| true),
        Command::Null(a) => null(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::Report(a) => report(a).map(|_| true),
        Command::Grid(a) => grid(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            // Library errors already embed their source in the message.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_strings() {
        let c = parse_point("a-rqs:2:128x3:8:16", 4).unwrap();
        assert_eq!(c, FlowConfig::new(Architecture::ARqs, 4, 2, vec![128; 3]).with_spline(8, 16.0));
        let c = parse_point("MAF:5:64x2", 6).unwrap();
        assert_eq!((c.architecture, c.bijectors, c.hidden), (Architecture::Maf, 5, vec![64, 64]));
        assert!(parse_point("maf:5", 4).is_err());
        assert!(parse_point("glow:1:8x1", 4).is_err());
    }

    #[test]
    fn cli_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
