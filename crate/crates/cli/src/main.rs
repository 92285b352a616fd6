//! `climgp` — fit, predict, validate, simulate, DIC and summary commands
//! for the multivariate space-time climate model.
//!
//! Configuration comes from a TOML file plus flag overrides (flags win).
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure.

mod config;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use climgp::covariance::{cross_correlations, practical_range, variance_decomposition, RangeKind};
use climgp::data::{file_hash, read_grid_csv, read_station_csv_path, write_station_csv};
use climgp::inference::{dic, run_chain, ParameterSet, PosteriorArchive};
use climgp::model::TransformSpec;
use climgp::predict::{
    holdout_split, predict_seasonal, predict_series, summarize, validate,
    write_grid_predictions_csv, write_seasonal_csv, PredictionTask,
};
use climgp::simulate::{simulate, uniform_sites, SimulationSpec};
use climgp::{Error, Result, N_RESPONSES};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "climgp",
    version,
    about = "Hierarchical space-time modeling of monthly climate station data"
)]
struct Cli {
    /// TOML run configuration; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (0 = rayon default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Station CSV.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Archive directory.
    #[arg(long, global = true)]
    archive: Option<PathBuf>,
    /// Grid CSV for predict.
    #[arg(long, global = true)]
    grid: Option<PathBuf>,
    /// Generative-truth JSON for simulate.
    #[arg(long, global = true)]
    truth: Option<PathBuf>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    burn_in: Option<usize>,
    #[arg(long, global = true)]
    thin: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// NNGP neighbor budget.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Ecoregion tier (1..=5).
    #[arg(long, global = true)]
    tier: Option<usize>,
    /// Draws used by predict (0 = all).
    #[arg(long, global = true)]
    draw_subsample: Option<usize>,
    /// First predicted year.
    #[arg(long, global = true)]
    start_year: Option<i32>,
    /// Number of predicted months.
    #[arg(long, global = true)]
    n_months: Option<usize>,
    /// Holdout fraction for validate.
    #[arg(long, global = true)]
    fraction: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model by MCMC and write a posterior archive.
    Fit,
    /// Predict grid series and seasonal effects from an archive.
    Predict,
    /// Holdout validation: split, fit on the training part, report RMSE.
    Validate,
    /// Generate a synthetic dataset from known parameters.
    Simulate,
    /// DIC table over one or more archives sharing one dataset.
    Dic {
        /// Archive directories.
        #[arg(required = true)]
        archives: Vec<PathBuf>,
    },
    /// Posterior summary table from an archive.
    Summary,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.overrides);
    match cli.command {
        Command::Fit => cmd_fit(&cfg),
        Command::Predict => cmd_predict(&cfg),
        Command::Validate => cmd_validate(&cfg),
        Command::Simulate => cmd_simulate(&cfg),
        Command::Dic { archives } => cmd_dic(&cfg, &archives),
        Command::Summary => cmd_summary(&cfg),
    }
}

fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) {
    macro_rules! set {
        ($field:expr, $opt:expr) => {
            if let Some(v) = &$opt {
                $field = Some(v.clone());
            }
        };
    }
    set!(cfg.paths.data, o.data);
    set!(cfg.paths.output, o.output);
    set!(cfg.paths.archive, o.archive);
    set!(cfg.paths.grid, o.grid);
    set!(cfg.paths.truth, o.truth);
    if let Some(v) = o.iterations {
        cfg.sampler.iterations = v;
    }
    if let Some(v) = o.burn_in {
        cfg.sampler.burn_in = v;
    }
    if let Some(v) = o.thin {
        cfg.sampler.thin = v;
    }
    if let Some(v) = o.seed {
        cfg.sampler.seed = v;
    }
    if let Some(v) = o.m {
        cfg.model.m = v;
    }
    if let Some(v) = o.tier {
        cfg.model.tier = v;
    }
    if let Some(v) = o.draw_subsample {
        cfg.prediction.draw_subsample = v;
    }
    if let Some(v) = o.start_year {
        cfg.prediction.start_year = v;
    }
    if let Some(v) = o.n_months {
        cfg.prediction.n_months = v;
    }
    if let Some(v) = o.fraction {
        cfg.validation.fraction = v;
    }
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = RunConfig::require(&cfg.paths.output, "output")?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Run manifest written next to every command's outputs.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    command: String,
    resolved_config: RunConfig,
    data_hash: Option<String>,
    elapsed_seconds: f64,
    #[serde(default)]
    acceptance: Vec<(String, f64)>,
    #[serde(default)]
    parameter_summary: Vec<ParamSummary>,
}

#[derive(Serialize, Deserialize)]
struct ParamSummary {
    name: String,
    mean: f64,
    sd: f64,
    q025: f64,
    q50: f64,
    q975: f64,
}

fn write_manifest(dir: &std::path::Path, manifest: &RunManifest) -> Result<()> {
    let f = std::fs::File::create(dir.join("run_manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), manifest)?;
    Ok(())
}

fn scalar_summaries(archive: &PosteriorArchive) -> Vec<ParamSummary> {
    let mut out = Vec::new();
    let mut add = |name: String, vals: Vec<f64>| {
        let mut v = vals;
        let s = summarize(&mut v);
        out.push(ParamSummary {
            name,
            mean: s.mean,
            sd: s.sd,
            q025: s.q025,
            q50: s.q50,
            q975: s.q975,
        });
    };
    for i in 0..N_RESPONSES {
        let tag = i + 1;
        add(format!("phi_sp_{tag}"), archive.draws.iter().map(|p| p.thetas[i].phi_sp).collect());
        add(format!("phi_ti_{tag}"), archive.draws.iter().map(|p| p.thetas[i].phi_ti).collect());
        add(format!("eta_{tag}"), archive.draws.iter().map(|p| p.thetas[i].eta).collect());
        add(
            format!("range_sp_km_{tag}"),
            archive
                .draws
                .iter()
                .map(|p| practical_range(RangeKind::Spatial, p.thetas[i].phi_sp))
                .collect(),
        );
        add(
            format!("sigma2_cy_{tag}"),
            archive.draws.iter().map(|p| p.cyclical[i].sigma2_cy).collect(),
        );
        add(format!("phi_cy_{tag}"), archive.draws.iter().map(|p| p.cyclical[i].phi_cy).collect());
        add(format!("sigma2_eps_{tag}"), archive.draws.iter().map(|p| p.sigma2_eps[i]).collect());
        add(format!("sigma_{tag}{tag}"), archive.draws.iter().map(|p| p.sigma[(i, i)]).collect());
    }
    for (name, pick) in [("rho_12", 0usize), ("rho_13", 1), ("rho_23", 2)] {
        add(
            name.to_string(),
            archive
                .draws
                .iter()
                .map(|p| {
                    let (a, b, c) = cross_correlations(&p.sigma);
                    [a, b, c][pick]
                })
                .collect(),
        );
    }
    for (l, lab) in archive.labels.iter().enumerate() {
        for i in 0..N_RESPONSES {
            add(
                format!("beta0_{lab}_{}", i + 1),
                archive.draws.iter().map(|p| p.beta[l][i][0]).collect(),
            );
            add(
                format!("beta1_{lab}_{}", i + 1),
                archive.draws.iter().map(|p| p.beta[l][i][1]).collect(),
            );
        }
    }
    out
}

fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let data_path = RunConfig::require(&cfg.paths.data, "data")?;
    let archive_dir = RunConfig::require(&cfg.paths.archive, "archive")?;
    let data = read_station_csv_path(&data_path)?;
    let sampler = cfg.sampler_config();
    let start = Instant::now();
    let archive = run_chain(&data, &sampler, &cfg.priors)?;
    archive.save(&archive_dir)?;
    let manifest = RunManifest {
        command: "fit".into(),
        resolved_config: cfg.clone(),
        data_hash: Some(file_hash(&data_path)?),
        elapsed_seconds: start.elapsed().as_secs_f64(),
        acceptance: archive.acceptance.clone(),
        parameter_summary: scalar_summaries(&archive),
    };
    write_manifest(&archive_dir, &manifest)?;
    println!(
        "fit: {} draws archived to {} ({:.1}s)",
        archive.n_draws(),
        archive_dir.display(),
        manifest.elapsed_seconds
    );
    for (name, rate) in &archive.acceptance {
        println!("  acceptance {name}: {rate:.3}");
    }
    Ok(())
}

/// The fit manifest's data hash, if the archive carries one.
fn archived_data_hash(archive_dir: &std::path::Path) -> Option<String> {
    let f = std::fs::File::open(archive_dir.join("run_manifest.json")).ok()?;
    let m: RunManifest = serde_json::from_reader(std::io::BufReader::new(f)).ok()?;
    m.data_hash
}

fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let data_path = RunConfig::require(&cfg.paths.data, "data")?;
    let archive_dir = RunConfig::require(&cfg.paths.archive, "archive")?;
    let grid_path = RunConfig::require(&cfg.paths.grid, "grid")?;
    let out = output_dir(cfg)?;
    let archive = PosteriorArchive::load(&archive_dir)?;
    if archive.config.m != cfg.model.m || archive.config.tier != cfg.model.tier {
        return Err(Error::ArchiveMismatch(format!(
            "archive was fit with m={}, tier={}, but the run config says m={}, tier={}",
            archive.config.m, archive.config.tier, cfg.model.m, cfg.model.tier
        )));
    }
    if let Some(h) = archived_data_hash(&archive_dir) {
        let now = file_hash(&data_path)?;
        if h != now {
            return Err(Error::ArchiveMismatch(format!(
                "data file hash {now} differs from the hash recorded at fit time {h}"
            )));
        }
    }
    let data = read_station_csv_path(&data_path)?;
    let grid = read_grid_csv(std::fs::File::open(&grid_path)?)?;
    let task = PredictionTask {
        grid_sites: grid,
        start_year: cfg.prediction.start_year,
        n_months: cfg.prediction.n_months,
        draw_subsample: cfg.prediction.draw_subsample,
    };
    let start = Instant::now();
    let series = predict_series(&task, &archive, &data)?;
    let seasonal = predict_seasonal(&task, &archive, &data)?;
    write_grid_predictions_csv(std::fs::File::create(out.join("grid_predictions.csv"))?, &series)?;
    write_seasonal_csv(std::fs::File::create(out.join("seasonal_effects.csv"))?, &seasonal)?;
    let manifest = RunManifest {
        command: "predict".into(),
        resolved_config: cfg.clone(),
        data_hash: Some(file_hash(&data_path)?),
        elapsed_seconds: start.elapsed().as_secs_f64(),
        acceptance: Vec::new(),
        parameter_summary: Vec::new(),
    };
    write_manifest(&out, &manifest)?;
    println!(
        "predict: {} point-months over {} sites written to {} ({:.1}s)",
        series.points.len(),
        task.grid_sites.len(),
        out.display(),
        manifest.elapsed_seconds
    );
    Ok(())
}

fn cmd_validate(cfg: &RunConfig) -> Result<()> {
    let data_path = RunConfig::require(&cfg.paths.data, "data")?;
    let out = output_dir(cfg)?;
    let data = read_station_csv_path(&data_path)?;
    let split = holdout_split(&data, cfg.validation.fraction, cfg.model.tier, cfg.sampler.seed)?;
    if !split.excluded_labels.is_empty() {
        println!(
            "excluded single-station ecoregions: {}",
            split.excluded_labels.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
        );
    }
    println!("holdout: {} validation records", split.validation.len());
    let sampler = cfg.sampler_config();
    let start = Instant::now();
    let archive = run_chain(&split.train, &sampler, &cfg.priors)?;
    let rows = validate(&archive, &split.train, &split.validation)?;
    println!(
        "{:<10} {:>6} {:>12} {:>12} {:>16}",
        "response", "n", "rmse", "range", "100*rmse/range"
    );
    let mut w = csv::Writer::from_writer(std::fs::File::create(out.join("validation.csv"))?);
    w.write_record(["response", "n", "rmse", "range", "relative"])?;
    for r in rows {
        println!(
            "{:<10} {:>6} {:>12.4} {:>12.4} {:>16.2}",
            r.response, r.n, r.rmse, r.range, r.relative
        );
        w.write_record([
            r.response.to_string(),
            r.n.to_string(),
            format!("{:?}", r.rmse),
            format!("{:?}", r.range),
            format!("{:?}", r.relative),
        ])?;
    }
    w.flush()?;
    let manifest = RunManifest {
        command: "validate".into(),
        resolved_config: cfg.clone(),
        data_hash: Some(file_hash(&data_path)?),
        elapsed_seconds: start.elapsed().as_secs_f64(),
        acceptance: archive.acceptance.clone(),
        parameter_summary: Vec::new(),
    };
    write_manifest(&out, &manifest)?;
    Ok(())
}

/// Generative truth for `simulate`, overridable by a JSON file.
#[derive(Serialize, Deserialize)]
struct TruthSpec {
    params: ParameterSet,
    transform: TransformSpec,
}

fn default_truth(n_labels: usize) -> TruthSpec {
    let mut params = ParameterSet::default_init(n_labels);
    let phi_sp = [0.188, 0.120, 0.150];
    let eta = [0.774, 0.500, 0.640];
    for i in 0..N_RESPONSES {
        params.thetas[i].phi_sp = phi_sp[i];
        params.thetas[i].phi_ti = 6.0;
        params.thetas[i].eta = eta[i];
        params.cyclical[i].phi_cy = 9.76;
    }
    params.cyclical[0].sigma2_cy = 0.617;
    params.cyclical[1].sigma2_cy = 0.45;
    params.cyclical[2].sigma2_cy = 0.38;
    params.sigma2_eps = [0.176, 0.12, 0.15];
    params.sigma =
        nalgebra::Matrix3::new(0.413, 0.090, -0.060, 0.090, 0.350, 0.120, -0.060, 0.120, 0.300);
    for (l, b) in params.beta.iter_mut().enumerate() {
        let shift = 0.1 * l as f64;
        *b = [[0.9 + shift, -0.40], [0.2 - shift, -0.75], [1.8 + 0.5 * shift, 0.10]];
    }
    TruthSpec {
        params,
        transform: TransformSpec {
            rain_scale: 30.0,
            tmin_center: 8.0,
            tmin_scale: 6.0,
            range_center: 0.0,
            range_scale: 4.0,
        },
    }
}

fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let out = output_dir(cfg)?;
    let sim = &cfg.simulation;
    if sim.n_ecoregions == 0 || sim.n_sites < sim.n_ecoregions {
        return Err(Error::Config(
            "simulation needs n_ecoregions >= 1 and n_sites >= n_ecoregions".into(),
        ));
    }
    // Tier-5 labels cycle over sites; tier-4 parents group two each.
    let label_cycle: Vec<[u32; 5]> =
        (1..=sim.n_ecoregions as u32).map(|e| [1, 1, 1, e.div_ceil(2), e]).collect();
    let sites = uniform_sites(sim.n_sites, sim.extent_km, &label_cycle, cfg.sampler.seed);
    let truth = match &cfg.paths.truth {
        Some(p) => {
            let f = std::fs::File::open(p)?;
            serde_json::from_reader(std::io::BufReader::new(f))?
        }
        None => default_truth(sim.n_ecoregions),
    };
    if truth.params.beta.len() != sim.n_ecoregions {
        return Err(Error::Config(format!(
            "truth has {} beta rows but n_ecoregions is {}",
            truth.params.beta.len(),
            sim.n_ecoregions
        )));
    }
    let spec = SimulationSpec {
        sites,
        start_year: sim.start_year,
        n_months: sim.n_months,
        params: truth.params,
        transform: truth.transform,
        missing_rate: sim.missing_rate,
        tier: cfg.model.tier,
        space_weight: cfg.model.space_weight,
        period: cfg.model.period,
        seed: cfg.sampler.seed,
        m: cfg.model.m,
    };
    let start = Instant::now();
    let result = simulate(&spec)?;
    let path = out.join("stations.csv");
    write_station_csv(std::fs::File::create(&path)?, &result.data)?;
    let truth_out = TruthSpec { params: spec.params.clone(), transform: spec.transform };
    let f = std::fs::File::create(out.join("truth.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &truth_out)?;
    let manifest = RunManifest {
        command: "simulate".into(),
        resolved_config: cfg.clone(),
        data_hash: Some(file_hash(&path)?),
        elapsed_seconds: start.elapsed().as_secs_f64(),
        acceptance: Vec::new(),
        parameter_summary: Vec::new(),
    };
    write_manifest(&out, &manifest)?;
    println!(
        "simulate: {} records over {} sites written to {}",
        result.data.records.len(),
        result.data.sites.len(),
        path.display()
    );
    Ok(())
}

fn cmd_dic(cfg: &RunConfig, archives: &[PathBuf]) -> Result<()> {
    let data_path = RunConfig::require(&cfg.paths.data, "data")?;
    let data = read_station_csv_path(&data_path)?;
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for dir in archives {
        let archive = PosteriorArchive::load(dir)?;
        let r = dic(&archive, &data)?;
        cells.push((archive.config.tier, archive.config.m, r.dic));
    }
    let mut tiers: Vec<usize> = cells.iter().map(|c| c.0).collect();
    tiers.sort_unstable();
    tiers.dedup();
    let mut ms: Vec<usize> = cells.iter().map(|c| c.1).collect();
    ms.sort_unstable();
    ms.dedup();
    let best = cells.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    print!("{:>6}", "k\\m");
    for m in &ms {
        print!("{m:>14}");
    }
    println!();
    for k in &tiers {
        print!("{k:>6}");
        for m in &ms {
            match cells.iter().find(|c| c.0 == *k && c.1 == *m) {
                Some(c) => {
                    let flag = if c.2 == best { "*" } else { "" };
                    print!("{:>14}", format!("{:.1}{flag}", c.2));
                }
                None => print!("{:>14}", "-"),
            }
        }
        println!();
    }
    Ok(())
}

fn cmd_summary(cfg: &RunConfig) -> Result<()> {
    let archive_dir = RunConfig::require(&cfg.paths.archive, "archive")?;
    let archive = PosteriorArchive::load(&archive_dir)?;
    println!(
        "archive: {} draws, m={}, tier={}, seed={}",
        archive.n_draws(),
        archive.config.m,
        archive.config.tier,
        archive.config.seed
    );
    println!(
        "{:<16} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "parameter", "mean", "sd", "q025", "q50", "q975"
    );
    for s in scalar_summaries(&archive) {
        println!(
            "{:<16} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            s.name, s.mean, s.sd, s.q025, s.q50, s.q975
        );
    }
    // Posterior-mean variance decomposition per response.
    println!("{:<16} {:>10} {:>10} {:>10}", "decomposition", "cyclical", "residual", "spacetime");
    for i in 0..N_RESPONSES {
        let k = archive.n_draws() as f64;
        let cy = archive.draws.iter().map(|p| p.cyclical[i].sigma2_cy).sum::<f64>() / k;
        let eps = archive.draws.iter().map(|p| p.sigma2_eps[i]).sum::<f64>() / k;
        let om = archive.draws.iter().map(|p| p.sigma[(i, i)]).sum::<f64>() / k;
        let (a, b, c) = variance_decomposition(cy, eps, om)?;
        println!("{:<16} {:>10.3} {:>10.3} {:>10.3}", format!("response_{}", i + 1), a, b, c);
    }
    if let Some(out) = &cfg.paths.output {
        std::fs::create_dir_all(out)?;
        let mut w = csv::Writer::from_writer(std::fs::File::create(out.join("summary.csv"))?);
        w.write_record(["parameter", "mean", "sd", "q025", "q50", "q975"])?;
        for s in scalar_summaries(&archive) {
            w.write_record([
                s.name.clone(),
                format!("{:?}", s.mean),
                format!("{:?}", s.sd),
                format!("{:?}", s.q025),
                format!("{:?}", s.q50),
                format!("{:?}", s.q975),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}
