//! `oedmt` — station-network design from the command line.
//!
//! Every subcommand loads a TOML experiment config, applies `--override`
//! assignments, runs the library pipeline and writes artifacts under
//! `<out>/<config hash>/`. Standard output carries a CSV table; diagnostics
//! go to standard error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oedmt::design::DesignRecord;
use oedmt::forward::{self, green_analytic, read_manifest};
use oedmt::scenario::{self, build_grid, ExperimentConfig, Mode, ProviderKind, RunBundle};
use oedmt::{Error, ErrorCategory, Result};

#[derive(Parser)]
#[command(name = "oedmt", version, about = "Bayesian design of seismic station networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy (or random-baseline) design; prints the per-step table.
    Design(Common),
    /// Consensus design over velocity or source scenarios.
    Consensus(Common),
    /// Runs the configured study and prints every score row.
    Evaluate(Common),
    /// Prints the comparison table of the configured study.
    Compare(Common),
    /// Misspecified-risk sweep; prints one row per (pair, network, k).
    Misspec(Common),
    /// Exports analytic Green matrices as importable manifests.
    GenGreens(Common),
    /// Checks a config and prints its normalized form and hash.
    ValidateConfig(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// `dotted.key=value`, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(&self.config)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", self.config.display())))?;
        let mut cfg = ExperimentConfig::from_toml_str(&text)
            .map_err(|e| e.context(format!("parsing {}", self.config.display())))?;
        for o in &self.overrides {
            cfg = cfg.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn base_dir(&self) -> &Path {
        self.config.parent().unwrap_or(Path::new("."))
    }

    fn run(&self, allowed: &[Mode]) -> Result<RunBundle> {
        scenario::configure_threads(self.threads)?;
        let cfg = self.load()?;
        if !allowed.contains(&cfg.mode) {
            let names: Vec<&str> = allowed.iter().map(|m| m.as_str()).collect();
            return Err(Error::config(
                "mode",
                format!(
                    "`{}` is not handled here; expected one of {}",
                    cfg.mode.as_str(),
                    names.join(", ")
                ),
            ));
        }
        let bundle = scenario::run_experiment(&cfg, self.base_dir())?;
        let dir = bundle.write(&self.out)?;
        eprintln!("artifacts: {}", dir.display());
        Ok(bundle)
    }
}

const ALL_MODES: [Mode; 6] = [
    Mode::Greedy,
    Mode::RandomBaseline,
    Mode::DepthStudy,
    Mode::ConsensusVelocity,
    Mode::ConsensusSource,
    Mode::MisspecSweep,
];

fn step_table(record: &DesignRecord) -> String {
    let mut out = String::from("rank,station_id,east_m,north_m,eig_increment,cum_eig\n");
    for s in &record.steps {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.rank, s.station_id, s.east_m, s.north_m, s.eig_increment, s.cum_eig
        ));
    }
    out
}

fn table(bundle: &RunBundle, name: &str) -> Result<String> {
    bundle
        .table(name)
        .map(str::to_string)
        .ok_or_else(|| Error::InvalidInput(format!("run produced no {name}")))
}

fn design_of<'a>(bundle: &'a RunBundle, label: &str) -> Result<&'a DesignRecord> {
    bundle
        .design(label)
        .ok_or_else(|| Error::InvalidInput(format!("run produced no `{label}` design")))
}

fn gen_greens(args: &Common) -> Result<String> {
    scenario::configure_threads(args.threads)?;
    let cfg = args.load()?;
    cfg.validate()?;
    if cfg.forward.provider != ProviderKind::Analytic {
        return Err(Error::config(
            "forward.provider",
            "gen-greens needs the analytic provider",
        ));
    }
    let stations = build_grid(&cfg.grid)?;
    let mut out = String::from("label,manifest\n");
    for medium in &cfg.media {
        let greens = stations
            .iter()
            .map(|s| green_analytic(s.id, &cfg.source, &medium.spec(), s.location(), cfg.time))
            .collect::<Result<Vec<_>>>()?;
        let dir = args.out.join("greens").join(&medium.label);
        let path = forward::green_export(&dir, cfg.time, &stations, &greens)?;
        out.push_str(&format!("{},{}\n", medium.label, path.display()));
    }
    Ok(out)
}

fn validate_config(args: &Common) -> Result<String> {
    let cfg = args.load()?;
    cfg.validate()?;
    if cfg.forward.provider == ProviderKind::Import {
        for m in &cfg.forward.manifests {
            read_manifest(&args.base_dir().join(m))?;
        }
    }
    Ok(format!(
        "{}\n# hash = {}\n",
        cfg.to_toml_string().trim_end(),
        cfg.hash()
    ))
}

fn dispatch(cmd: &Command) -> Result<String> {
    match cmd {
        Command::Design(a) => {
            let b = a.run(&[Mode::Greedy, Mode::RandomBaseline])?;
            Ok(step_table(design_of(&b, "greedy")?))
        }
        Command::Consensus(a) => {
            let b = a.run(&[Mode::ConsensusVelocity, Mode::ConsensusSource])?;
            Ok(step_table(design_of(&b, "consensus")?))
        }
        Command::Evaluate(a) => Ok(a.run(&ALL_MODES)?.scores_csv()),
        Command::Compare(a) => {
            let b = a.run(&[
                Mode::RandomBaseline,
                Mode::DepthStudy,
                Mode::ConsensusVelocity,
                Mode::ConsensusSource,
            ])?;
            match b.mode {
                Mode::RandomBaseline => table(&b, "random_comparison.csv"),
                Mode::DepthStudy => table(&b, "depth_radii.csv"),
                _ => table(&b, "network_summary.csv"),
            }
        }
        Command::Misspec(a) => table(&a.run(&[Mode::MisspecSweep])?, "misspec_differences.csv"),
        Command::GenGreens(a) => gen_greens(a),
        Command::ValidateConfig(a) => validate_config(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(stdout) => {
            print!("{stdout}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Numerical => 3,
                ErrorCategory::Io => 4,
            })
        }
    }
}
