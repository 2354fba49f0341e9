//! Command-line front end for the corridor estimation toolkit.
//!
//! The subcommands chain through files: `simulate` writes a full-resolution
//! grid CSV, `emit-data` aggregates it into detector rows, `corrupt` and
//! `subsample` degrade a detector file, `train` fits a model checkpoint,
//! `predict` writes estimates at requested cells, `evaluate` scores an
//! estimate file against truth, `run-scenario` does a whole study in one
//! call, and `report` pretty-prints a metrics CSV. Every command takes the
//! same `--config` INI and a `--seed`, and all randomness is seeded, so any
//! command rerun with the same inputs writes byte-identical files.

use std::error::Error;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use prgp::data::{Dataset, GridPoint, UnitSpec};
use prgp::ekf::EkfConfig;
use prgp::experiments::{
    emit_report, gp_initial_params, gp_train_config, ingest_csv, inject_bias, load_config,
    lookup_estimates, render_metrics_csv, run_scenario, subsample, write_detector_csv, BiasSpec,
    DataSource, Method, MethodReport, Scenario, ScenarioReport, SplitSpec, SyntheticSpec,
};
use prgp::experiments::metrics::{compute_metrics, ScatterPoint};
use prgp::experiments::synthetic::{decalibrate, demand_profile, upstream_state, SyntheticRamp};
use prgp::metanet::{
    emit_detector_data, simulate, Boundary, InitialState, NoiseSpec, RampSpec, TrafficGrid,
};
use prgp::prgp::{load_checkpoint, predict, save_checkpoint, train};

#[derive(Parser)]
#[command(name = "prgp", version, about = "Physics-regularized traffic state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// INI configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the corridor under a morning-peak demand profile and write
    /// the full-resolution grid CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Steps to run; defaults to one day at the configured step size.
        #[arg(long)]
        steps: Option<usize>,
        /// Overnight upstream demand in veh/h.
        #[arg(long, default_value_t = 2000.0)]
        base_demand: f64,
        /// Morning-peak upstream demand in veh/h.
        #[arg(long, default_value_t = 7000.0)]
        peak_demand: f64,
        /// Flow noise std in veh/h; zero keeps the run deterministic.
        #[arg(long, default_value_t = 0.0)]
        noise_flow: f64,
        /// Speed noise std in km/h; zero keeps the run deterministic.
        #[arg(long, default_value_t = 0.0)]
        noise_speed: f64,
        /// Output grid file; defaults to <out-dir>/grid.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a grid CSV into detector rows in the configured units.
    EmitData {
        #[command(flatten)]
        common: Common,
        /// Grid CSV written by `simulate`.
        #[arg(long)]
        grid: PathBuf,
        /// Comma-separated detector segments.
        #[arg(long, default_value = "2,6,10,14,18")]
        detectors: String,
        /// Simulation steps per detector sample.
        #[arg(long, default_value_t = 30)]
        aggregation: usize,
        /// Output detector file; defaults to <out-dir>/detectors.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corrupt a fraction of detector rows with Gaussian sensor faults.
    Corrupt {
        #[command(flatten)]
        common: Common,
        /// Input detector file in the configured units.
        #[arg(long)]
        data: PathBuf,
        /// Fraction of rows to corrupt, in [0, 1].
        #[arg(long)]
        fraction: f64,
        /// Flow fault std in veh/5min.
        #[arg(long, default_value_t = 100.0)]
        flow_noise: f64,
        /// Speed fault std in mph.
        #[arg(long, default_value_t = 5.0)]
        speed_noise: f64,
        /// Output detector file; defaults to <out-dir>/corrupted.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep a seeded uniform sample of detector rows.
    Subsample {
        #[command(flatten)]
        common: Common,
        /// Input detector file in the configured units.
        #[arg(long)]
        data: PathBuf,
        /// Fraction of rows to keep, in (0, 1].
        #[arg(long)]
        ratio: f64,
        /// Output detector file; defaults to <out-dir>/sampled.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a model to detector data and save its checkpoint. For data read
    /// straight from CSV the configured step size T is taken to be the
    /// spacing of the file's time index.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training detector file in the configured units.
        #[arg(long)]
        data: PathBuf,
        /// pure-gp or prgp.
        #[arg(long, default_value = "prgp")]
        method: String,
        /// Draw residual estimates from the GP posterior instead of its mean.
        #[arg(long)]
        sample_posterior: bool,
        /// Output checkpoint; defaults to <out-dir>/model.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict flow and speed at the cells listed in a points file.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// The detector file the model was trained on.
        #[arg(long)]
        data: PathBuf,
        /// Cells to predict: either a `segment,k` file or a detector file
        /// whose values are ignored.
        #[arg(long)]
        points: PathBuf,
        /// Output detector-format file; defaults to <out-dir>/predictions.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score an estimate file against truth and write report files.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Truth detector file in the configured units.
        #[arg(long)]
        truth: PathBuf,
        /// Estimate detector file covering every truth cell.
        #[arg(long)]
        estimate: PathBuf,
        /// Scenario label for the metrics rows.
        #[arg(long, default_value = "evaluate")]
        scenario: String,
        /// Method label for the metrics rows.
        #[arg(long, default_value = "prgp")]
        method: String,
    },
    /// Run a full study end to end and write its report files.
    RunScenario {
        #[command(flatten)]
        common: Common,
        /// Scenario label for the metrics rows.
        #[arg(long, default_value = "study")]
        name: String,
        /// Detector file to study instead of a synthetic corridor;
        /// simulation-based methods are unavailable with file data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Days of synthetic corridor to generate.
        #[arg(long, default_value_t = 1)]
        days: usize,
        /// Simulation steps per detector sample.
        #[arg(long, default_value_t = 30)]
        aggregation: usize,
        /// Comma-separated detector segments.
        #[arg(long, default_value = "2,6,10,14,18")]
        detectors: String,
        /// Overnight upstream demand in veh/h.
        #[arg(long, default_value_t = 2000.0)]
        base_demand: f64,
        /// Morning-peak upstream demand in veh/h.
        #[arg(long, default_value_t = 7000.0)]
        peak_demand: f64,
        /// Detector measurement noise std in veh/h.
        #[arg(long, default_value_t = 120.0)]
        flow_noise: f64,
        /// Detector measurement noise std in km/h.
        #[arg(long, default_value_t = 3.0)]
        speed_noise: f64,
        /// Segment whose detector is held out entirely.
        #[arg(long, default_value_t = 10)]
        holdout: usize,
        /// Final windows withheld from the remaining detectors.
        #[arg(long, default_value_t = 24)]
        tail: usize,
        /// Fraction of training rows corrupted with sensor faults.
        #[arg(long, default_value_t = 0.0)]
        bias_fraction: f64,
        /// Corruption flow std in veh/5min.
        #[arg(long, default_value_t = 100.0)]
        bias_flow_noise: f64,
        /// Corruption speed std in mph.
        #[arg(long, default_value_t = 5.0)]
        bias_speed_noise: f64,
        /// Fraction of training rows kept after corruption; 1 keeps all.
        #[arg(long, default_value_t = 1.0)]
        sample_ratio: f64,
        /// Unobserved on-ramp of the generated corridor, as SEGMENT:SHARE
        /// where SHARE scales the demand profile. Repeatable.
        #[arg(long = "on-ramp", value_name = "SEG:SHARE")]
        on_ramps: Vec<String>,
        /// Unobserved off-ramp of the generated corridor, as SEGMENT:RATIO
        /// where RATIO is the exiting fraction of arriving flow. Repeatable.
        #[arg(long = "off-ramp", value_name = "SEG:RATIO")]
        off_ramps: Vec<String>,
        /// Relative miscalibration of the physical constants handed to the
        /// estimation methods.
        #[arg(long, default_value_t = 0.1)]
        perturb: f64,
        /// Comma-separated methods to run.
        #[arg(long, default_value = "metanet,metanet-ekf,pure-gp,prgp")]
        methods: String,
        /// Draw residual estimates from the GP posterior instead of its mean.
        #[arg(long)]
        sample_posterior: bool,
        /// Record wall-clock runtimes in the metrics rows. Off by default so
        /// reports are byte-stable.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Print a metrics CSV as an aligned table.
    Report {
        /// Metrics file written by `evaluate` or `run-scenario`.
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn Error>> {
    match cli.command {
        Command::Simulate {
            common,
            steps,
            base_demand,
            peak_demand,
            noise_flow,
            noise_speed,
            out,
        } => {
            let config = load_config(common.config.as_ref())?;
            let params = &config.metanet;
            let horizon = steps.unwrap_or_else(|| (24.0 / params.t_step).round() as usize);
            let mut upstream_flow = Vec::with_capacity(horizon);
            let mut upstream_speed = Vec::with_capacity(horizon);
            let mut downstream_rho = Vec::with_capacity(horizon);
            for k in 0..horizon {
                let hour = (k as f64 * params.t_step).rem_euclid(24.0);
                let demand = demand_profile(base_demand, peak_demand, hour);
                let (rho, vel) = upstream_state(params, demand)?;
                upstream_flow.push(rho * vel * params.lanes[0]);
                upstream_speed.push(vel);
                downstream_rho.push(rho);
            }
            let boundary = Boundary::Series { upstream_flow, upstream_speed, downstream_rho };
            let demand0 = demand_profile(base_demand, peak_demand, 0.0);
            let (rho0, vel0) = upstream_state(params, demand0)?;
            let initial = InitialState::uniform(params.n_segments, rho0, vel0);
            let noise = (noise_flow > 0.0 || noise_speed > 0.0).then_some(NoiseSpec {
                sigma_q: noise_flow,
                sigma_v: noise_speed,
                seed: common.seed,
            });
            let grid =
                simulate(params, &initial, &boundary, &RampSpec::None, horizon, noise.as_ref())?;
            let path = output_path(&common, out, "grid.csv")?;
            grid.save_csv(&path)?;
            println!("wrote {} ({} segments x {} steps)", path.display(), grid.n_segments(), horizon);
        }
        Command::EmitData { common, grid, detectors, aggregation, out } => {
            let config = load_config(common.config.as_ref())?;
            let grid = TrafficGrid::load_csv(&grid)?;
            let detectors = parse_index_list(&detectors)?;
            let data = emit_detector_data(&grid, &detectors, aggregation, config.units)?;
            let path = output_path(&common, out, "detectors.csv")?;
            write_detector_csv(&data, &path)?;
            println!("wrote {} ({} rows)", path.display(), data.len());
        }
        Command::Corrupt { common, data, fraction, flow_noise, speed_noise, out } => {
            let config = load_config(common.config.as_ref())?;
            let clean = ingest_csv(&data, config.units)?;
            let spec = BiasSpec {
                fraction,
                flow_noise_std: flow_noise,
                speed_noise_std: speed_noise,
            };
            let noisy = inject_bias(&clean, &spec, common.seed)?;
            let path = output_path(&common, out, "corrupted.csv")?;
            write_detector_csv(&noisy.with_units(config.units), &path)?;
            println!("wrote {} ({} of {} rows corrupted)", path.display(),
                (fraction * clean.len() as f64).floor() as usize, clean.len());
        }
        Command::Subsample { common, data, ratio, out } => {
            let config = load_config(common.config.as_ref())?;
            let full = ingest_csv(&data, config.units)?;
            let kept = subsample(&full, ratio, common.seed)?;
            let path = output_path(&common, out, "sampled.csv")?;
            write_detector_csv(&kept.with_units(config.units), &path)?;
            println!("wrote {} ({} of {} rows kept)", path.display(), kept.len(), full.len());
        }
        Command::Train { common, data, method, sample_posterior, out } => {
            let config = load_config(common.config.as_ref())?;
            let physics = match parse_method(&method)? {
                Method::Prgp => true,
                Method::PureGp => false,
                other => {
                    return Err(format!(
                        "method {} does not train from data; use pure-gp or prgp",
                        other.label()
                    )
                    .into())
                }
            };
            let training = ingest_csv(&data, config.units)?;
            let params = gp_initial_params(config.metanet.clone(), &training);
            let train_config =
                gp_train_config(&config.train, common.seed, physics, sample_posterior);
            let (model, trace) = train(&params, &training, &train_config)?;
            let path = output_path(&common, out, "model.ckpt")?;
            save_checkpoint(&path, &model, &train_config)?;
            let last = trace.records.last();
            println!(
                "wrote {} ({} iterations, objective {} + {}{})",
                path.display(),
                trace.records.len(),
                last.map_or(f64::NAN, |r| r.l_f),
                last.map_or(f64::NAN, |r| r.l_g),
                if trace.stopped_early.is_some() { ", stopped at plateau" } else { "" },
            );
        }
        Command::Predict { common, model, data, points, out } => {
            let config = load_config(common.config.as_ref())?;
            let (model, _) = load_checkpoint(&model)?;
            let training = ingest_csv(&data, config.units)?;
            let cells = read_points_file(&points, config.units)?;
            let prediction = predict(&model, &training, &cells)?;
            let estimates =
                Dataset::dense(cells, prediction.flow, prediction.vel, UnitSpec::internal())?;
            let path = output_path(&common, out, "predictions.csv")?;
            write_detector_csv(&estimates.with_units(config.units), &path)?;
            println!("wrote {} ({} cells)", path.display(), estimates.len());
        }
        Command::Evaluate { common, truth, estimate, scenario, method } => {
            let config = load_config(common.config.as_ref())?;
            let method = parse_method(&method)?;
            let truth = ingest_csv(&truth, config.units)?;
            let estimates = lookup_estimates(&ingest_csv(&estimate, config.units)?, &truth)?;
            let dims = compute_metrics(&truth, &estimates)?;
            let mut scatter = Vec::new();
            for d in &dims {
                let column = match d.dim {
                    prgp::data::OutputDim::Flow => &estimates.flow,
                    prgp::data::OutputDim::Speed => &estimates.speed,
                    prgp::data::OutputDim::Density => continue,
                };
                let mut rows = Vec::with_capacity(d.n);
                for (row, p) in truth.points().iter().enumerate() {
                    if let Some(t) = truth.value(row, d.dim) {
                        rows.push(ScatterPoint { i: p.i, k: p.k, truth: t, estimate: column[row] });
                    }
                }
                scatter.push((d.dim, rows));
            }
            let report = ScenarioReport {
                scenario,
                n_test: truth.len(),
                methods: vec![MethodReport { method, error: None, dims, scatter, runtime: None }],
            };
            finish_report(&report, &common.out_dir)?;
        }
        Command::RunScenario {
            common,
            name,
            data,
            days,
            aggregation,
            detectors,
            base_demand,
            peak_demand,
            flow_noise,
            speed_noise,
            holdout,
            tail,
            bias_fraction,
            bias_flow_noise,
            bias_speed_noise,
            sample_ratio,
            on_ramps,
            off_ramps,
            perturb,
            methods,
            sample_posterior,
            wall_clock,
        } => {
            let config = load_config(common.config.as_ref())?;
            let methods = parse_method_list(&methods)?;
            let mut ramps = Vec::new();
            for arg in &on_ramps {
                let (segment, share) = parse_ramp_arg(arg)?;
                ramps.push(SyntheticRamp { segment, inflow_share: share, exit_ratio: 0.0 });
            }
            for arg in &off_ramps {
                let (segment, ratio) = parse_ramp_arg(arg)?;
                ramps.push(SyntheticRamp { segment, inflow_share: 0.0, exit_ratio: ratio });
            }
            let source = match data {
                Some(path) => DataSource::Csv { path, units: config.units },
                None => DataSource::Synthetic(SyntheticSpec {
                    truth: config.metanet.clone(),
                    days,
                    aggregation,
                    detectors: parse_index_list(&detectors)?,
                    base_demand,
                    peak_demand,
                    flow_noise,
                    speed_noise,
                    ramps,
                    seed: common.seed,
                }),
            };
            let scenario = Scenario {
                name,
                source,
                split: SplitSpec { holdout_segment: holdout, test_tail: tail },
                bias: (bias_fraction > 0.0).then_some(BiasSpec {
                    fraction: bias_fraction,
                    flow_noise_std: bias_flow_noise,
                    speed_noise_std: bias_speed_noise,
                }),
                sample_ratio: (sample_ratio < 1.0).then_some(sample_ratio),
                methods,
                train: config.train,
                method_params: decalibrate(&config.metanet, perturb),
                ekf: EkfConfig::table_defaults(),
                seed: common.seed,
                sample_posterior,
                wall_clock,
            };
            let report = run_scenario(&scenario)?;
            finish_report(&report, &common.out_dir)?;
        }
        Command::Report { metrics } => {
            let text = std::fs::read_to_string(&metrics)
                .map_err(|e| format!("{}: {e}", metrics.display()))?;
            print!("{}", render_table(&text));
        }
    }
    Ok(())
}

fn output_path(
    common: &Common,
    out: Option<PathBuf>,
    default_name: &str,
) -> Result<PathBuf, Box<dyn Error>> {
    let path = out.unwrap_or_else(|| common.out_dir.join(default_name));
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(path)
}

fn parse_index_list(text: &str) -> Result<Vec<usize>, Box<dyn Error>> {
    text.split(',')
        .map(|tok| {
            tok.trim().parse::<usize>().map_err(|_| format!("invalid segment '{tok}'").into())
        })
        .collect()
}

/// Ramp arguments look like `4:0.15`: a segment index, a colon, and a rate.
fn parse_ramp_arg(text: &str) -> Result<(usize, f64), Box<dyn Error>> {
    let bad = || -> Box<dyn Error> {
        format!("invalid ramp '{text}'; expected SEGMENT:VALUE like 4:0.15").into()
    };
    let (seg, value) = text.split_once(':').ok_or_else(bad)?;
    let segment = seg.trim().parse::<usize>().map_err(|_| bad())?;
    let value = value.trim().parse::<f64>().map_err(|_| bad())?;
    Ok((segment, value))
}

fn parse_method(label: &str) -> Result<Method, Box<dyn Error>> {
    Method::parse(label.trim()).ok_or_else(|| {
        format!("unknown method '{label}'; expected metanet, metanet-ekf, pure-gp, or prgp")
            .into()
    })
}

fn parse_method_list(text: &str) -> Result<Vec<Method>, Box<dyn Error>> {
    text.split(',').map(parse_method).collect()
}

/// Points files are either bare `segment,k` rows or full detector files
/// whose values are ignored.
fn read_points_file(path: &Path, units: UnitSpec) -> Result<Vec<GridPoint>, Box<dyn Error>> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let first = text.lines().next().map(str::trim_end).unwrap_or("");
    if first == "segment,k" {
        let mut points = Vec::new();
        for (idx, line) in text.lines().enumerate().skip(1) {
            let row = line.trim_end();
            if row.is_empty() {
                continue;
            }
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != 2 {
                return Err(format!("line {}: expected segment,k", idx + 1).into());
            }
            let i = fields[0].trim().parse::<usize>()?;
            let k = fields[1].trim().parse::<usize>()?;
            points.push(GridPoint::new(i, k));
        }
        Ok(points)
    } else {
        Ok(prgp::experiments::parse_detector_csv(&text, units)?.points().to_vec())
    }
}

fn finish_report(report: &ScenarioReport, out_dir: &Path) -> Result<(), Box<dyn Error>> {
    let written = emit_report(report, out_dir)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    for m in &report.methods {
        if let Some(e) = &m.error {
            println!("method {} failed: {e}", m.method.label());
        }
    }
    print!("{}", render_table(&render_metrics_csv(report)));
    Ok(())
}

/// Align CSV columns for reading; fractional cells are shown to three
/// decimals while everything else passes through unchanged.
fn render_table(csv: &str) -> String {
    let rows: Vec<Vec<String>> = csv
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|cell| match cell.contains('.').then(|| cell.parse::<f64>()) {
                    Some(Ok(v)) => format!("{v:.3}"),
                    _ => cell.to_string(),
                })
                .collect()
        })
        .collect();
    if rows.is_empty() {
        return String::new();
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in &rows {
        for (c, cell) in row.iter().enumerate() {
            widths[c] = widths[c].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{cell:<width$}", width = widths[c]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}
