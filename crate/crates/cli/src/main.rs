//! `dsse`: command-line front end for the state-estimation lab.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dsse_core::dnn::{self, Dataset, DnnError, FeatureSpec, MlpModel, TrainConfig};
use dsse_core::eval::{
    self, placement_cases_config, run_experiment, ErrorPreset, ErrorSpec, EvalError,
    ExperimentConfig, LoadConfig, MetricsReport,
};
use dsse_core::loadgen::{sample_scenarios, write_scenarios_csv};
use dsse_core::lse::{
    build_linear_model, check_observability, ChannelNoise, LseError, WlsEstimator,
};
use dsse_core::netmodel::{load_ieee34_fixture, parse_network, NetworkModel};
use dsse_core::powerflow::{
    batch_solve, solve, BatchSolveError, LoadScenario, PowerFlowError, SolveOptions, StateVector,
};
use dsse_core::rng::derive_seed;
use dsse_core::select::{
    heatmap_svg, recommend_placement, spearman_matrix, FeatureKind, PlacementPlan, SelectOptions,
};
use dsse_core::smdsim::{
    measure, read_measurements_csv, write_measurements_csv, SmdPlacement, TveModel,
};
use dsse_core::Phase;

#[derive(Parser)]
#[command(
    name = "dsse",
    version,
    about = "Synchrophasor-based distribution system state estimation"
)]
struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct NetArg {
    /// Feeder JSON; the bundled IEEE 34 fixture when omitted.
    #[arg(long)]
    net: Option<PathBuf>,
}

impl NetArg {
    fn load(&self) -> Result<NetworkModel> {
        match &self.net {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(parse_network(&text)?)
            }
            None => Ok(load_ieee34_fixture()),
        }
    }
}

#[derive(Args)]
struct PlacementArg {
    /// Placement JSON: `{"sites": [...]}` or a plan written by `dsse select`.
    #[arg(long, conflicts_with = "sites")]
    placement: Option<PathBuf>,
    /// Comma-separated site labels, e.g. `808-812,888-890`.
    #[arg(long, value_delimiter = ',')]
    sites: Option<Vec<String>>,
}

impl PlacementArg {
    fn load(&self) -> Result<SmdPlacement> {
        if let Some(sites) = &self.sites {
            return Ok(SmdPlacement::from_labels(
                &sites.iter().map(String::as_str).collect::<Vec<_>>(),
            ));
        }
        let Some(path) = &self.placement else {
            bail!("give --placement or --sites")
        };
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if let Ok(plan) = serde_json::from_str::<PlacementPlan>(&text) {
            return Ok(plan.placement);
        }
        serde_json::from_str::<SmdPlacement>(&text)
            .with_context(|| format!("{}: not a placement or plan", path.display()))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LoadMode {
    Gaussian,
    Kde,
}

#[derive(Clone, Copy, ValueEnum)]
enum Errors {
    TwoLevel,
    TveOnly,
    GmmOnly,
    Noiseless,
}

impl Errors {
    fn spec(self) -> ErrorSpec {
        ErrorSpec::Preset(match self {
            Errors::TwoLevel => ErrorPreset::TwoLevel,
            Errors::TveOnly => ErrorPreset::TveOnly,
            Errors::GmmOnly => ErrorPreset::GmmOnly,
            Errors::Noiseless => ErrorPreset::Noiseless,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw load scenarios, solve them and optionally simulate SMD readings.
    Generate {
        #[command(flatten)]
        net: NetArg,
        #[command(flatten)]
        placement: PlacementArg,
        /// Number of scenarios.
        #[arg(long, default_value_t = 12_500)]
        n: usize,
        #[arg(long, value_enum, default_value = "gaussian")]
        mode: LoadMode,
        /// Load-variation fraction around nominal (Gaussian mode).
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        /// Smart-meter CSV for KDE mode (`meter_id,transformer_id,timestamp,kwh`,
        /// hourly); synthetic readings are used when omitted.
        #[arg(long)]
        meters: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "two-level")]
        errors: Errors,
    },
    /// Cluster phase-A angles and recommend SMD sites.
    Select {
        #[command(flatten)]
        net: NetArg,
        /// States file written by `dsse generate`.
        #[arg(long)]
        states: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        /// Number of SMDs; defaults to the cluster count.
        #[arg(long)]
        k: Option<usize>,
        /// Plan file (default: <out-dir>/plan.json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Correlation heatmap (default: <out-dir>/correlation_phase_a.svg).
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Train the MLP estimator on measurement/state pairs.
    Train {
        #[command(flatten)]
        net: NetArg,
        #[command(flatten)]
        placement: PlacementArg,
        #[arg(long)]
        measurements: PathBuf,
        /// True states of the same scenarios, as written by `dsse generate`.
        #[arg(long, alias = "scenarios")]
        states: PathBuf,
        /// TOML training config; unspecified keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model file (default: <out-dir>/model.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate states with a trained model.
    Estimate {
        #[command(flatten)]
        net: NetArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, alias = "z")]
        measurements: PathBuf,
        /// Output states file (default: <out-dir>/estimates.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear weighted-least-squares estimation with a full-observability placement.
    Lse {
        #[command(flatten)]
        net: NetArg,
        #[command(flatten)]
        placement: PlacementArg,
        /// Measurements file; omit to only report observability.
        #[arg(long)]
        z: Option<PathBuf>,
        /// Output states file (default: <out-dir>/lse_estimates.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        /// TVE limit used for the weights.
        #[arg(long, default_value_t = 0.01)]
        tve: f64,
    },
    /// Score estimates against true states.
    Eval {
        #[command(flatten)]
        net: NetArg,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long, default_value = "estimate")]
        run: String,
        #[arg(long, default_value = "DNN")]
        method: String,
        #[arg(long, default_value = "")]
        error_model: String,
        #[arg(long, default_value_t = 0)]
        smd_count: usize,
    },
    /// Run a full experiment from a TOML file.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Replace the runs with the four placement cases (a)-(d).
        #[arg(long)]
        placement_cases: bool,
    },
}

fn is_numerical(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        if let Some(e) = e.downcast_ref::<EvalError>() {
            return e.is_numerical();
        }
        if let Some(e) = e.downcast_ref::<BatchSolveError>() {
            return EvalError::Solve(e.failures[0].1.clone()).is_numerical();
        }
        if let Some(e) = e.downcast_ref::<PowerFlowError>() {
            return EvalError::Solve(e.clone()).is_numerical();
        }
        matches!(
            e.downcast_ref::<DnnError>(),
            Some(DnnError::NonFiniteLoss { .. })
        ) || matches!(
            e.downcast_ref::<LseError>(),
            Some(LseError::SingularBranch(_) | LseError::NonFinite(_))
        )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_numerical(&e) { 3 } else { 2 })
        }
    }
}

fn out_dir(cli_dir: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = cli_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn read_states(path: &Path, net: &NetworkModel) -> Result<Vec<StateVector>> {
    Ok(eval::read_states_csv(open(path)?, net)?)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Generate {
            net,
            placement,
            n,
            mode,
            fraction,
            meters,
            errors,
        } => {
            let net = net.load()?;
            let dir = out_dir(&cli.out_dir)?;
            let loads = match mode {
                LoadMode::Gaussian => LoadConfig::Gaussian {
                    fraction,
                    sigmas: 3.0,
                    pf_min: 0.95,
                    pf_max: 1.0,
                },
                LoadMode::Kde => LoadConfig::Kde {
                    meters,
                    interval_hours: 1.0,
                    confidence: 0.95,
                    pf_min: 0.95,
                    pf_max: 1.0,
                    synthetic: Default::default(),
                },
            };
            let dist = loads.distributions(&net, seed)?;
            let scenarios = sample_scenarios(
                &dist,
                loads.power_factor()?,
                n,
                derive_seed(seed, "loads/train"),
            );
            write_scenarios_csv(create(&dir.join("scenarios.csv"))?, &net, &scenarios)?;
            let sols = batch_solve(&net, &scenarios, &SolveOptions::default())?;
            let states: Vec<StateVector> = sols.iter().map(|s| s.state.clone()).collect();
            eval::write_states_csv(create(&dir.join("states.csv"))?, &net, &states)?;
            if placement.placement.is_some() || placement.sites.is_some() {
                let layout = placement.load()?.resolve(&net)?;
                let model = errors.spec().model();
                let noise_seed = derive_seed(seed, "noise/train");
                let z: Vec<_> = sols
                    .iter()
                    .enumerate()
                    .map(|(i, s)| measure(&layout, s, &model, noise_seed, i as u64))
                    .collect();
                write_measurements_csv(create(&dir.join("measurements.csv"))?, &layout, &z)?;
            }
            log::info!("wrote {n} scenarios to {}", dir.display());
        }
        Command::Select {
            net,
            states,
            threshold,
            k,
            out,
            heatmap,
        } => {
            let net = net.load()?;
            let dir = out_dir(&cli.out_dir)?;
            let states = read_states(&states, &net)?;
            let plan = recommend_placement(
                &net,
                &states,
                SelectOptions {
                    threshold,
                    k,
                    ..Default::default()
                },
            )?;
            fs::write(
                out.unwrap_or_else(|| dir.join("plan.json")),
                serde_json::to_string_pretty(&plan)?,
            )?;
            let corr = spearman_matrix(&net, &states, FeatureKind::Angle, Some(Phase::A))?;
            fs::write(
                heatmap.unwrap_or_else(|| dir.join("correlation_phase_a.svg")),
                heatmap_svg(&corr, "Spearman correlation of phase-A voltage angles"),
            )?;
            println!("{}", plan.placement.labels().join(","));
        }
        Command::Train {
            net,
            placement,
            measurements,
            states,
            config,
            out,
        } => {
            let net = net.load()?;
            let dir = out_dir(&cli.out_dir)?;
            let placement = placement.load()?;
            let layout = placement.resolve(&net)?;
            let z = read_measurements_csv(open(&measurements)?, &layout)?;
            let x = read_states(&states, &net)?;
            if z.len() != x.len() {
                bail!("{} measurement rows but {} states", z.len(), x.len());
            }
            let mut cfg: TrainConfig = match &config {
                Some(p) => toml::from_str(&fs::read_to_string(p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => TrainConfig::default(),
            };
            cfg.samples = z.len();
            if let Some(s) = cli.seed {
                cfg.seed = derive_seed(s, "dnn");
            }
            let data = Dataset {
                inputs: z.into_iter().map(|m| m.features).collect(),
                targets: x.iter().map(StateVector::to_features).collect(),
            };
            let (mut model, history) =
                dnn::train(&data, &FeatureSpec::for_estimation(&net, &layout), &cfg)?;
            model.metadata.net_hash = net.content_hash();
            model.metadata.placement_hash = placement.content_hash();
            model.metadata.sites = placement.labels();
            model.save(&out.unwrap_or_else(|| dir.join("model.json")))?;
            let mut w = csv::Writer::from_writer(create(&dir.join("history.csv"))?);
            w.write_record(["epoch", "train_loss", "val_loss", "learning_rate"])?;
            for e in 0..history.val_loss.len() {
                w.write_record([
                    e.to_string(),
                    history.train_loss[e].to_string(),
                    history.val_loss[e].to_string(),
                    history.learning_rate[e].to_string(),
                ])?;
            }
            w.flush()?;
            log::info!(
                "best validation loss {:.4e} at epoch {}",
                history.val_loss[history.best_epoch],
                history.best_epoch
            );
        }
        Command::Estimate {
            net,
            model,
            measurements,
            out,
        } => {
            let net = net.load()?;
            let model = MlpModel::load(&model)?;
            if !model.metadata.net_hash.is_empty() && model.metadata.net_hash != net.content_hash()
            {
                bail!("model was trained on a different network");
            }
            let labels: Vec<&str> = model.metadata.sites.iter().map(String::as_str).collect();
            let layout = SmdPlacement::from_labels(&labels).resolve(&net)?;
            let z = read_measurements_csv(open(&measurements)?, &layout)?;
            let inputs: Vec<Vec<f64>> = z.into_iter().map(|m| m.features).collect();
            let est = model.predict_batch(&inputs)?;
            let out = match out {
                Some(p) => p,
                None => out_dir(&cli.out_dir)?.join("estimates.csv"),
            };
            eval::write_states_csv(create(&out)?, &net, &est)?;
        }
        Command::Lse {
            net,
            placement,
            z,
            out,
            tve,
        } => {
            let net = net.load()?;
            let dir = out_dir(&cli.out_dir)?;
            let layout = placement.load()?.resolve(&net)?;
            let nominal = solve(&net, &LoadScenario::nominal(&net), &SolveOptions::default())?;
            let noise = ChannelNoise::from_solution(&TveModel::new(tve), &layout, &nominal);
            let model = build_linear_model(&net, &layout, &noise)?;
            let report = check_observability(&net, &model);
            fs::write(
                dir.join("observability.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            println!(
                "rank {}/{}; full rank: {}",
                report.rank, report.columns, report.full_rank
            );
            if let Some(zp) = z {
                let wls = WlsEstimator::new(&net, &model)?;
                let rows = read_measurements_csv(open(&zp)?, &layout)?;
                let est = rows
                    .iter()
                    .map(|m| wls.estimate(&model, &m.phasors()))
                    .collect::<Result<Vec<_>, _>>()?;
                let out = out.unwrap_or_else(|| dir.join("lse_estimates.csv"));
                eval::write_states_csv(create(&out)?, &net, &est)?;
            }
        }
        Command::Eval {
            net,
            truth,
            estimates,
            run,
            method,
            error_model,
            smd_count,
        } => {
            let net = net.load()?;
            let dir = out_dir(&cli.out_dir)?;
            let truth = read_states(&truth, &net)?;
            let est = read_states(&estimates, &net)?;
            let report =
                MetricsReport::compute(&net, &run, &method, &error_model, smd_count, &truth, &est)?;
            eval::write_summary_csv(
                create(&dir.join("summary.csv"))?,
                std::slice::from_ref(&report),
            )?;
            eval::write_features_csv(
                create(&dir.join("features.csv"))?,
                std::slice::from_ref(&report),
            )?;
            println!(
                "phase MAE {:.4} deg, magnitude MAPE {:.4} %",
                report.phase_mae_deg, report.magnitude_mape_pct
            );
        }
        Command::Experiment {
            config,
            placement_cases,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if placement_cases {
                cfg = placement_cases_config(&cfg);
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(d) = &cli.out_dir {
                cfg.out_dir = d.clone();
            }
            let out = run_experiment(&cfg)?;
            println!(
                "{:<12} {:>6} {:>5} {:<16} {:>10} {:>10}",
                "run", "method", "SMDs", "errors", "MAE[deg]", "MAPE[%]"
            );
            for r in out.reports() {
                println!(
                    "{:<12} {:>6} {:>5} {:<16} {:>10.4} {:>10.4}",
                    r.run,
                    r.method,
                    r.smd_count,
                    r.error_model,
                    r.phase_mae_deg,
                    r.magnitude_mape_pct
                );
            }
        }
    }
    Ok(())
}
