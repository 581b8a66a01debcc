//! Command-line front end: ingest data into a store, fit the three-stage
//! system, simulate forecasts, run rolling studies and extract scenarios.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDateTime;
use clap::{Parser, Subcommand};
use log::info;

use loadcast::pipeline::store::SYSTEM_FILE;
use loadcast::pipeline::{
    decompose_scenario, fit_system, rolling_study, select_extreme_trajectories, Dataset, FittedSystem,
    ForecastProduct, PipelineConfig, StageSeeds,
};

#[derive(Parser)]
#[command(name = "loadcast", version, about = "Probabilistic mid-term hourly load forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read raw load, temperature and holiday files into a data store.
    Ingest {
        #[arg(long)]
        load: PathBuf,
        #[arg(long)]
        temp: PathBuf,
        #[arg(long)]
        holidays: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit all stages on the in-sample window ending at the origin.
    Fit {
        #[arg(long)]
        store: PathBuf,
        /// TOML configuration; defaults apply to absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// First forecast hour, e.g. 2019-02-01T09:00.
        #[arg(long)]
        origin: String,
        /// Output directory of the fitted system (defaults to <store>/fit).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate trajectories from a fitted system.
    Forecast {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, default_value_t = 200)]
        sims: usize,
        /// Master seed (defaults to the seed of the fitted configuration).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rolling-origin study with score and coverage tables.
    Study {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        experiments: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extreme trajectories and component decompositions for one country.
    Scenario {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        product: PathBuf,
        #[arg(long)]
        country: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_origin(s: &str) -> Result<NaiveDateTime> {
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t);
        }
    }
    bail!("cannot parse origin `{s}`; expected e.g. 2019-02-01T09:00")
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn read_store(dir: &Path) -> Result<Dataset> {
    Dataset::read_store(dir).with_context(|| format!("reading store {}", dir.display()))
}

fn ingest(load: &Path, temp: &Path, holidays: &Path, out: &Path) -> Result<()> {
    let data = Dataset::ingest(load, temp, holidays).context("reading input files")?;
    data.write_store(out)?;
    let grid = data.grid();
    info!(
        "stored {} load and {} temperature series, {} hours from {}",
        data.load.n_series(),
        data.temperature.n_series(),
        grid.len(),
        grid.start()
    );
    Ok(())
}

fn fit(store: &Path, config: Option<&Path>, origin: &str, out: Option<PathBuf>) -> Result<()> {
    let config = load_config(config)?;
    let origin = parse_origin(origin)?;
    let data = read_store(store)?;
    let system = fit_system(&data, &config, origin)?;
    let out = out.unwrap_or_else(|| store.join("fit"));
    fs::create_dir_all(&out)?;
    system.write_json(&out.join(SYSTEM_FILE))?;
    info!("{} system fitted for {:?} at {origin}", system.state.kind, system.countries);
    println!("{}", out.display());
    Ok(())
}

fn read_system(dir: &Path) -> Result<FittedSystem> {
    let path = if dir.is_dir() { dir.join(SYSTEM_FILE) } else { dir.to_path_buf() };
    FittedSystem::read_json(&path).with_context(|| format!("reading fitted system {}", path.display()))
}

fn forecast(store: &Path, fit: &Path, sims: usize, seed: Option<u64>, out: &Path) -> Result<()> {
    let system = read_system(fit)?;
    let seed = seed.unwrap_or(system.config.seed);
    let product = system.simulate(sims, StageSeeds::from_master(seed))?;
    product.write_dir(out)?;
    // score against actuals when the store covers the horizon
    let data = read_store(store)?;
    if let Some(actuals) = data.actuals(&system.countries, system.origin, system.horizon.len()) {
        let scores = loadcast::pipeline::score_product(&product, &actuals)?;
        fs::write(out.join("scores.json"), serde_json::to_string_pretty(&scores.report)?)?;
        for (c, crps) in system.countries.iter().zip(&scores.report.crps) {
            info!("{c}: mean CRPS {crps:.4}");
        }
    }
    println!("{}", out.display());
    Ok(())
}

fn study(store: &Path, config: Option<&Path>, experiments: Option<usize>, out: &Path) -> Result<()> {
    let mut config = load_config(config)?;
    if let Some(n) = experiments {
        config.study.experiments = n;
    }
    let data = read_store(store)?;
    let report = rolling_study(&data, &config)?;
    report.write(out)?;
    for m in &report.models {
        info!("{m}: mean CRPS {:?}", report.mean_crps(*m));
    }
    println!("{}", out.display());
    Ok(())
}

fn scenario(fit: &Path, product: &Path, country: &str, out: &Path) -> Result<()> {
    let system = read_system(fit)?;
    let product = ForecastProduct::read_dir(product).with_context(|| format!("reading product {}", product.display()))?;
    let selection = select_extreme_trajectories(&product, country)?;
    fs::create_dir_all(out)?;
    selection.write_trajectories(&product, &out.join("trajectories.csv"))?;
    fs::write(out.join("selection.json"), serde_json::to_string_pretty(&selection)?)?;
    let window = 0..system.horizon.len();
    for (name, choice) in [("stress", selection.stress_choice()), ("medium", selection.medium_choice())] {
        let d = decompose_scenario(&system, &product, country, choice, window.clone())?;
        d.write_csv(&out.join(format!("decomposition_{name}.csv")))?;
    }
    println!("{}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest { load, temp, holidays, out } => ingest(&load, &temp, &holidays, &out),
        Command::Fit { store, config, origin, out } => fit(&store, config.as_deref(), &origin, out),
        Command::Forecast { store, fit, sims, seed, out } => forecast(&store, &fit, sims, seed, &out),
        Command::Study { store, config, experiments, out } => study(&store, config.as_deref(), experiments, &out),
        Command::Scenario { fit, product, country, out } => scenario(&fit, &product, country.as_str(), &out),
    }
}
