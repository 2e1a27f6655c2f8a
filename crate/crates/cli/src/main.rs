//! `insram`: run the in-SRAM compute simulator from the command line.
//!
//! Exit codes: 0 success, 1 simulation failure, 2 usage error,
//! 3 invalid input (unreadable or malformed files, bad parameters),
//! 4 functional output differs from the reference.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use insram_core::costmodel::{
    breakdown_rows, calibrate, Phase, RunReport, MOVEMENT_SPLIT, PEAK_BATCH, PEAK_THROUGHPUT_PER_SOCKET,
};
use insram_core::engine::{plan_network, run_network, EngineError, ExecutionMode};
use insram_core::geometry::{CostCalibration, GeometryConfig, GeometryError};
use insram_core::model_io::{
    builtin, compare_outputs, load_descriptor, read_tensor, reference_inference, write_tensor, ModelError,
    NetworkDescriptor, NetworkTensors,
};
use insram_core::transpose::Layout;

const EXIT_SIMULATION: u8 = 1;
const EXIT_INPUT: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser)]
#[command(name = "insram", version, about = "Bit-serial in-SRAM DNN compute simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a network and write report.json, breakdown.csv and layers.csv.
    Simulate(SimulateArgs),
    /// Convert a regular-layout tensor file to transposed bit planes or back.
    TransposeWeights(TransposeArgs),
    /// Fit the data-movement parameters to a target latency and throughput.
    Calibrate(CalibrateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Analytic,
    Functional,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Built-in model name (`inception_v3`, `toy`) or path to a descriptor JSON.
    #[arg(long, default_value = "inception_v3")]
    model: String,
    /// Geometry JSON; defaults to the 14-slice cache.
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Override the slice count of the geometry.
    #[arg(long)]
    slices: Option<usize>,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "analytic")]
    mode: Mode,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Cost calibration JSON; defaults to the built-in constants.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Write plan.json: every layer, or only the layer with this key or name.
    #[arg(long, num_args = 0..=1, default_missing_value = "", value_name = "LAYER")]
    dump_plan: Option<String>,
    /// Compare the functional output with the scalar reference (functional mode).
    #[arg(long)]
    verify: bool,
    /// Comma-separated batch sizes; writes throughput.csv.
    #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
    sweep_batch: Option<Vec<usize>>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Cap on worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Seed for tensors not supplied by the descriptor.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct TransposeArgs {
    /// Tensor file with a `<file>.json` shape/layout sidecar.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Convert back to the regular layout instead.
    #[arg(long)]
    regular: bool,
}

#[derive(clap::Args)]
struct CalibrateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Starting calibration JSON; compute constants are kept as given.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Single-image latency to fit, in seconds.
    #[arg(long, default_value_t = 4.72e-3)]
    target_latency: f64,
    /// Throughput to fit at `--peak-batch`, in inferences per second.
    #[arg(long, default_value_t = PEAK_THROUGHPUT_PER_SOCKET)]
    target_throughput: f64,
    #[arg(long, default_value_t = PEAK_BATCH)]
    peak_batch: usize,
    #[arg(long, default_value = "calibration.json")]
    out: PathBuf,
}

/// An error paired with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        Failure {
            code: classify(&error),
            error,
        }
    }
}

fn classify(error: &anyhow::Error) -> u8 {
    for cause in error.chain() {
        if cause.is::<ModelError>() || cause.is::<GeometryError>() || cause.is::<std::io::Error>() {
            return EXIT_INPUT;
        }
        if let Some(e) = cause.downcast_ref::<EngineError>() {
            return match e {
                EngineError::Model(_) | EngineError::Geometry(_) => EXIT_INPUT,
                _ => EXIT_SIMULATION,
            };
        }
    }
    EXIT_SIMULATION
}

fn input_error(error: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_INPUT,
        error,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::TransposeWeights(a) => transpose_weights(a),
        Command::Calibrate(a) => calibrate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_model(name: &str) -> Result<NetworkDescriptor, Failure> {
    let path = Path::new(name);
    let net = if path.exists() || name.ends_with(".json") {
        load_descriptor(path)?
    } else {
        builtin(name)?
    };
    net.validate()?;
    Ok(net)
}

fn load_geometry(args: &ModelArgs) -> Result<GeometryConfig, Failure> {
    let mut cfg = match &args.geometry {
        Some(p) => GeometryConfig::from_json_file(p)?,
        None => GeometryConfig::default(),
    };
    if let Some(s) = args.slices {
        cfg = cfg.with_slices(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_calibration(path: Option<&Path>) -> Result<CostCalibration, Failure> {
    let cal = match path {
        Some(p) => CostCalibration::from_json_file(p)?,
        None => CostCalibration::default(),
    };
    cal.validate()?;
    Ok(cal)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(input_error)
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    if args.batch == 0 {
        return Err(input_error(anyhow!("--batch must be positive")));
    }
    if args.verify && args.mode != Mode::Functional {
        return Err(input_error(anyhow!("--verify requires --mode functional")));
    }
    if let Some(t) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .context("configuring worker pool")?;
    }
    let net = load_model(&args.model.model)?;
    let cfg = load_geometry(&args.model)?;
    let cal = load_calibration(args.calibration.as_deref())?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(input_error)?;

    if let Some(layer) = &args.dump_plan {
        let plans = plan_network(&net, &cfg)?;
        let selected: Vec<_> = if layer.is_empty() {
            plans
        } else {
            plans
                .into_iter()
                .filter(|(key, _)| key == layer || key.rsplit('/').next() == Some(layer.as_str()))
                .collect()
        };
        if selected.is_empty() {
            return Err(input_error(anyhow!("no layer `{layer}` in {}", net.name)));
        }
        let json: serde_json::Map<String, serde_json::Value> = selected
            .into_iter()
            .map(|(k, p)| Ok((k, serde_json::to_value(p)?)))
            .collect::<Result<_, serde_json::Error>>()?;
        write_file(&args.out.join("plan.json"), serde_json::to_string_pretty(&json)?)?;
    }

    let mode = match args.mode {
        Mode::Analytic => ExecutionMode::analytic(args.batch),
        Mode::Functional => ExecutionMode::functional(args.batch),
    };
    let tensors = match args.mode {
        Mode::Functional => Some(NetworkTensors::load(&net, args.seed)?),
        Mode::Analytic => None,
    };
    let run = run_network(&net, &cfg, &cal, &mode, tensors.as_ref())?;
    let report = &run.report;

    let json = serde_json::json!({
        "model": net.name,
        "mode": if args.mode == Mode::Analytic { "analytic" } else { "functional" },
        "geometry": cfg,
        "calibration": cal,
        "report": report,
    });
    write_file(&args.out.join("report.json"), serde_json::to_string_pretty(&json)?)?;
    write_breakdown(&args.out.join("breakdown.csv"), report)?;
    write_layers(&args.out.join("layers.csv"), report)?;
    print_summary(&net.name, &cfg, report);

    if let Some(sizes) = &args.sweep_batch {
        let path = args.out.join("throughput.csv");
        let mut w = csv::Writer::from_path(&path)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(input_error)?;
        w.write_record(["batch_size", "latency_s", "throughput_inferences_per_s", "energy_j"])?;
        println!("batch sweep:");
        for &n in sizes {
            if n == 0 {
                return Err(input_error(anyhow!("--sweep-batch sizes must be positive")));
            }
            let r = run_network(&net, &cfg, &cal, &ExecutionMode::analytic(n), None)?.report;
            w.write_record([
                n.to_string(),
                r.total_latency_s.to_string(),
                r.throughput_inferences_per_s.to_string(),
                r.total_energy_j.to_string(),
            ])?;
            println!("  N={n:<5} {:>10.1} inferences/s", r.throughput_inferences_per_s);
        }
        w.flush()?;
    }

    if args.verify {
        let tensors = tensors.as_ref().expect("functional mode loads tensors");
        let (_, expected) = reference_inference(&net, tensors)?;
        let actual = run.output.as_ref().expect("functional run has an output");
        let diff = compare_outputs(actual, &expected)?;
        write_file(&args.out.join("verify.json"), serde_json::to_string_pretty(&diff)?)?;
        if diff.matches {
            println!("verify: PASS ({} elements match the reference)", actual.data.len());
        } else {
            println!(
                "verify: FAIL ({} mismatches, first at {:?})",
                diff.mismatches, diff.first_divergence
            );
            return Err(Failure {
                code: EXIT_MISMATCH,
                error: anyhow!("functional output differs from the reference"),
            });
        }
    }
    Ok(())
}

fn write_breakdown(path: &Path, report: &RunReport) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(input_error)?;
    w.write_record(["phase", "cycles", "seconds", "joules", "fraction"])?;
    for (phase, cycles, s, j, f) in breakdown_rows(report) {
        w.write_record([phase, cycles.to_string(), s.to_string(), j.to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_layers(path: &Path, report: &RunReport) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(input_error)?;
    let mut header = vec!["block".to_string(), "layer".into(), "serial_iterations".into(), "utilization".into()];
    header.extend(Phase::ALL.iter().map(|p| format!("{}_cycles", p.name())));
    header.push("energy_pj".into());
    w.write_record(&header)?;
    for l in &report.per_layer {
        let mut row = vec![
            l.block.clone(),
            l.name.clone(),
            l.serial_iterations.to_string(),
            l.utilization.to_string(),
        ];
        row.extend(Phase::ALL.iter().map(|&p| l.cycles(p).to_string()));
        row.push(l.energy_pj().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn print_summary(model: &str, cfg: &GeometryConfig, report: &RunReport) {
    println!(
        "{model}: batch {} on {} slices, {} layers",
        report.batch_size,
        cfg.num_slices,
        report.per_layer.len()
    );
    println!("  latency    {:.4} ms", report.total_latency_s * 1e3);
    println!("  throughput {:.1} inferences/s", report.throughput_inferences_per_s);
    println!("  energy     {:.4} J", report.total_energy_j);
    println!("  power      {:.1} W", report.avg_power_w);
    for t in &report.phase_totals {
        println!("  {:<14} {:>6.2}%  {:>14} cycles", t.phase.name(), t.fraction * 100.0, t.cycles);
    }
}

fn transpose_weights(args: TransposeArgs) -> Result<(), Failure> {
    let (meta, data) = read_tensor(&args.input)?;
    let layout = if args.regular {
        Layout::Regular
    } else {
        Layout::Transposed
    };
    write_tensor(&args.output, &meta.shape, &data, layout)?;
    println!(
        "{} -> {} ({:?}, {} elements)",
        args.input.display(),
        args.output.display(),
        layout,
        data.len()
    );
    Ok(())
}

fn calibrate_cmd(args: CalibrateArgs) -> Result<(), Failure> {
    if !(args.target_latency > 0.0 && args.target_throughput > 0.0 && args.peak_batch > 0) {
        return Err(input_error(anyhow!("calibration targets must be positive")));
    }
    let net = load_model(&args.model.model)?;
    let cfg = load_geometry(&args.model)?;
    let base = load_calibration(args.calibration.as_deref())?;
    let fit = calibrate(
        &net,
        &cfg,
        &base,
        args.target_latency,
        MOVEMENT_SPLIT,
        args.peak_batch,
        args.target_throughput,
    )?;
    write_file(&args.out, serde_json::to_string_pretty(&fit)?)?;
    println!("dram_filter_bytes_per_cycle = {:.6}", fit.dram_filter_bytes_per_cycle);
    println!("dram_bound_fraction         = {:.6}", fit.dram_bound_fraction);
    println!("input_transfer_cycles       = {:.6}", fit.input_transfer_cycles);
    println!("output_transfer_cycles      = {:.6}", fit.output_transfer_cycles);
    Ok(())
}
