use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use zicp::inference::{mcem_fit, FitResult, McemConfig};
use zicp::model::{simulate_hierarchy, Dataset, Design, Kind, Theta};
use zicp::studies::{
    bias_study, coverage_study, gof_histogram, ppplot_data, write_bias_csv, write_coverage_csv, write_gof_csv,
    write_ppplot_csv, StudyGrid,
};
use zicp::{Error, RngStream};

#[derive(Parser)]
#[command(name = "zicp", version, about = "Random-effects compound Poisson models for zero-inflated survey data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Cont,
    Disc,
}

impl From<KindArg> for Kind {
    fn from(k: KindArg) -> Kind {
        match k {
            KindArg::Cont => Kind::Continuous,
            KindArg::Disc => Kind::Discrete,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit (a, b, c, d) by Monte-Carlo EM and write the result as JSON.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// JSON with McemConfig keys; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a dataset with uniform design.
    Simulate {
        #[arg(long)]
        theta: Theta,
        #[arg(long)]
        strata: usize,
        #[arg(long)]
        per_stratum: usize,
        #[arg(long, value_enum, default_value = "cont")]
        kind: KindArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        effort: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the latent random effects and clump counts.
        #[arg(long)]
        latent: Option<PathBuf>,
    },
    /// Relative bias of the estimates over a grid of designs.
    BiasStudy {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coverage of the Wald regions over a grid of designs.
    CoverageStudy {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Observed histogram against histograms simulated at a fitted θ.
    Gof {
        #[arg(long)]
        data: PathBuf,
        /// FitResult JSON written by `zicp fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-stratum moment estimates with pp-plot pairs against fitted gammas.
    Ppplot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn open(path: &Path) -> Result<BufReader<File>, Error> {
    Ok(BufReader::new(File::open(path)?))
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    serde_json::from_reader(open(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), Error> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Fit { data, config, out } => {
            let config: McemConfig = match config {
                Some(p) => read_json(&p)?,
                None => McemConfig::default(),
            };
            let dataset = Dataset::read_csv(open(&data)?, config.kind)?;
            let fit = mcem_fit(&dataset, &config)?;
            write_json(&fit, &out)?;
            if !fit.converged {
                eprintln!("warning: no convergence within {} iterations; result written to {}", config.max_iter, out.display());
                return Ok(ExitCode::from(3));
            }
        }
        Command::Simulate { theta, strata, per_stratum, kind, seed, effort, out, latent } => {
            let mut rng = RngStream::new(seed, 0);
            let (dataset, truth) =
                simulate_hierarchy(&theta, &Design::uniform(strata, per_stratum, effort), kind.into(), &mut rng)?;
            dataset.write_csv(create(&out)?)?;
            if let Some(path) = latent {
                truth.write_csv(&dataset, create(&path)?)?;
            }
        }
        Command::BiasStudy { grid, out } => {
            let grid: StudyGrid = read_json(&grid)?;
            write_bias_csv(&bias_study(&grid)?, create(&out)?)?;
        }
        Command::CoverageStudy { grid, out } => {
            let grid: StudyGrid = read_json(&grid)?;
            write_coverage_csv(&coverage_study(&grid)?, create(&out)?)?;
        }
        Command::Gof { data, fit, replicates, bins, seed, out } => {
            let fit: FitResult = read_json(&fit)?;
            let dataset = Dataset::read_csv(open(&data)?, fit.kind)?;
            let hist = gof_histogram(&dataset, &fit.theta_hat, replicates, bins, seed)?;
            write_gof_csv(&hist, create(&out)?)?;
            let (lo, hi) = hist.zero_envelope();
            eprintln!("zeros observed {} (simulated 5%-95% envelope {lo}-{hi})", hist.observed[0]);
        }
        Command::Ppplot { data, out } => {
            let dataset = Dataset::read_csv(open(&data)?, Kind::Continuous)?;
            let pp = ppplot_data(&dataset)?;
            write_ppplot_csv(&pp, create(&out)?)?;
            if pp.excluded > 0 {
                eprintln!("{} strata excluded (fewer than two positive records)", pp.excluded);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Unidentifiable(_) => 2,
        Error::NonConvergence(_) | Error::Infeasible(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("ZICP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
