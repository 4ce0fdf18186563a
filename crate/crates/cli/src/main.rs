//! Experiment driver for fault-tolerant S-box networks.
//!
//! Subcommands cover the whole pipeline: `train` and `quantize` produce
//! model files, `faults` and `margins` measure them (by exhaustive
//! injection and by interval prediction respectively), `emulate` runs the
//! hardware datapath model, the `sweep-*` and `search` commands orchestrate
//! grids of the above, and `report` merges saved outputs into one bundle.
//!
//! Every output is deterministic: rerunning a command with the same
//! arguments (any `--jobs` value) writes byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nnsbox::datapath::{
    calibrate_latencies, emulate, DatapathConfig, CYCLE_CALIBRATION_ROWS,
};
use nnsbox::experiments::{
    build_bundle, bundle_json, constrained_search, fault_map, sweep_hidden, sweep_precision,
    SearchSpec, SpacePolicy, SweepSpec, SweepTable,
};
use nnsbox::fault::{
    per_site_counts_csv, per_site_csv, run_campaign, CampaignOptions, FaultReport,
};
use nnsbox::margin::{predict_campaign, validate_predictions_subset};
use nnsbox::model::{aes_dataset, Topology};
use nnsbox::modelfile::{
    load_model, save_float_model, save_quant_model, LoadedModel, TrainingMetadata,
};
use nnsbox::quantizer::{quantize, verify_quantized};
use nnsbox::trainer::{loss_history_csv, train, TrainConfig};

#[derive(Parser)]
#[command(name = "nnsbox", version, about = "Fault-tolerance experiments for S-box networks")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a float model on the 256 byte pairs of one key.
    Train(TrainArgs),
    /// Fixed-point quantize a trained float model.
    Quantize(QuantizeArgs),
    /// Exhaustive single-fault injection campaign.
    Faults(FaultsArgs),
    /// Margin-interval prediction of the same campaign.
    Margins(MarginsArgs),
    /// Run the hardware datapath emulator on one input.
    Emulate(EmulateArgs),
    /// Quantization-precision sweep across keys.
    SweepPrecision(SweepArgs),
    /// Hidden-layer-size sweep across keys.
    SweepHidden(SweepArgs),
    /// Regularized-model search with an unregularized baseline.
    Search(SearchArgs),
    /// Merge saved outputs into one reproducibility bundle.
    Report(ReportArgs),
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("rayon pool already initialized")?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Faults(a) => cmd_faults(a),
        Command::Margins(a) => cmd_margins(a),
        Command::Emulate(a) => cmd_emulate(a),
        Command::SweepPrecision(a) => cmd_sweep(a, true),
        Command::SweepHidden(a) => cmd_sweep(a, false),
        Command::Search(a) => cmd_search(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Accepts `0x25` or plain decimal.
fn parse_byte(s: &str) -> Result<u8, String> {
    let parsed = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u8::from_str_radix(hex, 16)
    } else {
        s.parse()
    };
    parsed.map_err(|e| format!("invalid byte '{s}': {e}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn pretty_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn load_quant(path: &Path) -> Result<(LoadedModel, nnsbox::model::QuantParams)> {
    let model = load_model(path).with_context(|| format!("loading {}", path.display()))?;
    let quant = model.require_quant()?.clone();
    Ok((model, quant))
}

#[derive(Args)]
struct TrainArgs {
    /// Key byte, e.g. 0x25.
    #[arg(long, value_parser = parse_byte, default_value = "0x25")]
    key: u8,
    /// Hidden layer size.
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    /// L2 strength (0 disables).
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 8.0)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 20_000)]
    max_epochs: usize,
    /// Stop only once this precision quantizes exactly (0 disables the
    /// gate; stopping then needs only sustained accuracy).
    #[arg(long, default_value_t = 1)]
    gate_precision: u32,
    /// Where to write the float model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional epoch,loss,accuracy CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let samples = aes_dataset(a.key).samples();
    let mut cfg = TrainConfig::new(Topology::aes(a.hidden), a.seed);
    cfg.lambda = a.lambda;
    cfg.learning_rate = a.learning_rate;
    cfg.momentum = a.momentum;
    cfg.max_epochs = a.max_epochs;
    if a.gate_precision == 0 {
        cfg.target.quant_gate = None;
    } else if let Some(gate) = &mut cfg.target.quant_gate {
        gate.precision = a.gate_precision;
    }

    let result = train(&samples, &cfg)?;
    let metadata = TrainingMetadata {
        seed: a.seed,
        lambda: a.lambda,
        epochs: result.epochs_run,
        learning_rate: a.learning_rate,
    };
    save_float_model(&a.out, &result.params, a.key, &metadata)?;
    if let Some(history) = &a.history {
        write_text(history, &loss_history_csv(&result.loss_history))?;
    }
    println!(
        "trained key=0x{:02x} hidden={} lambda={}: accuracy {:.4} after {} epochs (loss {:.6}) -> {}",
        a.key,
        a.hidden,
        a.lambda,
        result.final_accuracy,
        result.epochs_run,
        result.final_loss,
        a.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct QuantizeArgs {
    /// Float model JSON from `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1)]
    precision: u32,
    /// Where to write the quantized model JSON.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_quantize(a: QuantizeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let float = model.require_float()?;
    let q = quantize(float, a.precision);
    let samples = aes_dataset(model.key_byte).samples();
    let report = verify_quantized(&q, &samples);
    save_quant_model(&a.out, &q, model.key_byte, &model.metadata)?;
    println!(
        "quantized p={} -> {}: accuracy {:.4}, {} ties, min margin {}, widths w1={} b1={} w2={} b2={}",
        a.precision,
        a.out.display(),
        report.accuracy,
        report.tie_count,
        report.min_margin,
        q.widths.w1,
        q.widths.b1,
        q.widths.w2,
        q.widths.b2
    );
    if report.accuracy != 1.0 || report.tie_count != 0 {
        bail!("quantization broke the model (accuracy {:.4}, {} ties)", report.accuracy, report.tie_count);
    }
    Ok(())
}

#[derive(Args)]
struct FaultsArgs {
    /// Quantized model JSON.
    #[arg(long)]
    model: PathBuf,
    /// full8, min, or range.
    #[arg(long, default_value = "full8")]
    space: SpacePolicy,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-site counts CSV path.
    #[arg(long)]
    per_site: Option<PathBuf>,
    /// Fraction of verdicts re-checked against a full recomputation.
    #[arg(long, default_value_t = 1e-3)]
    sample_oracle: f64,
    /// Evaluate every n-th site only.
    #[arg(long, default_value_t = 1)]
    site_stride: usize,
}

fn cmd_faults(a: FaultsArgs) -> Result<()> {
    let (model, q) = load_quant(&a.model)?;
    let samples = aes_dataset(model.key_byte).samples();
    let space = a.space.space_for(&q);
    let options =
        CampaignOptions { oracle_sample_rate: a.sample_oracle, site_stride: a.site_stride };
    let report = run_campaign(&q, &space, &samples, &options)?;
    print_campaign("injection", &report.totals, report.total_faulty, report.denominator);
    println!(
        "  oracle: {} of {} sampled verdicts re-checked, {} mismatches",
        report.oracle_checked,
        report.denominator,
        report.oracle_mismatches
    );
    if let Some(out) = &a.out {
        write_text(out, &pretty_json(&report)?)?;
    }
    if let Some(per_site) = &a.per_site {
        write_text(per_site, &per_site_csv(&report))?;
    }
    if report.oracle_mismatches != 0 {
        bail!("oracle disagreed with the incremental engine {} times", report.oracle_mismatches);
    }
    Ok(())
}

fn print_campaign(kind: &str, totals: &nnsbox::fault::GroupCounts, faulty: u64, denominator: u64) {
    println!(
        "{kind}: {faulty} faulty of {denominator} ({:.6}%) | W1 {} b1 {} W2 {} b2 {}",
        100.0 * faulty as f64 / denominator as f64,
        totals.w1,
        totals.b1,
        totals.w2,
        totals.b2
    );
}

#[derive(Args)]
struct MarginsArgs {
    /// Quantized model JSON.
    #[arg(long)]
    model: PathBuf,
    /// full8, min, or range.
    #[arg(long, default_value = "full8")]
    space: SpacePolicy,
    /// Margin report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-site predicted counts CSV path.
    #[arg(long)]
    per_site: Option<PathBuf>,
    /// Cross-check every prediction against brute-force injection; any
    /// disagreement is a hard failure.
    #[arg(long)]
    validate: bool,
    /// With --validate: check every n-th site only.
    #[arg(long, default_value_t = 1)]
    site_stride: usize,
}

fn cmd_margins(a: MarginsArgs) -> Result<()> {
    let (model, q) = load_quant(&a.model)?;
    let samples = aes_dataset(model.key_byte).samples();
    let space = a.space.space_for(&q);

    if a.validate {
        let report = validate_predictions_subset(&q, &space, &samples, a.site_stride)?;
        print_campaign(
            "margin prediction",
            &report.margin.totals,
            report.margin.total_faulty,
            report.margin.denominator,
        );
        println!(
            "  validation: {} tuples against brute force, {} disagreements",
            report.tuples_checked, report.disagreements
        );
        if let Some(out) = &a.out {
            write_text(out, &pretty_json(&report.margin)?)?;
        }
        if let Some(per_site) = &a.per_site {
            write_text(per_site, &per_site_counts_csv(&report.margin.per_site_counts()))?;
        }
        if !report.agrees() {
            let c = report.first_counterexample.expect("disagreement recorded");
            bail!(
                "prediction disagrees with injection at site {:?} value {} input 0x{:02x}: margin says {}, engine says {}",
                c.site,
                c.value,
                c.input,
                if c.margin_says_safe { "safe" } else { "faulty" },
                if c.engine_says_faulty { "faulty" } else { "safe" }
            );
        }
        return Ok(());
    }

    let report = predict_campaign(&q, &space, &samples)?;
    print_campaign("margin prediction", &report.totals, report.total_faulty, report.denominator);
    if let Some(out) = &a.out {
        write_text(out, &pretty_json(&report)?)?;
    }
    if let Some(per_site) = &a.per_site {
        write_text(per_site, &per_site_counts_csv(&report.per_site_counts()))?;
    }
    Ok(())
}

#[derive(Args)]
struct EmulateArgs {
    /// Quantized model JSON (required unless --calibrate).
    #[arg(long, required_unless_present = "calibrate")]
    model: Option<PathBuf>,
    /// Input byte, e.g. 0x25.
    #[arg(long, value_parser = parse_byte, required_unless_present = "calibrate")]
    input: Option<u8>,
    /// Where to write the full trace JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Wrap intermediates at stage widths instead of failing.
    #[arg(long)]
    wraparound: bool,
    /// Fit per-stage latencies to the published cycle counts and print the
    /// residuals.
    #[arg(long)]
    calibrate: bool,
}

fn cmd_emulate(a: EmulateArgs) -> Result<()> {
    if a.calibrate {
        let cal = calibrate_latencies(&CYCLE_CALIBRATION_ROWS, 256, 8);
        println!(
            "calibrated latencies: base={} hidden={} output={} (sse {})",
            cal.base_cycles, cal.hidden_cycles, cal.output_cycles, cal.sum_squared_error
        );
        for ((m, published), residual) in CYCLE_CALIBRATION_ROWS.iter().zip(&cal.residuals) {
            println!("  m={m:>3}: published {published:>6}, formula residual {residual:+}");
        }
        if !cal.exact {
            println!("  note: no non-negative-latency fit is exact; residuals are informational");
        }
        if a.model.is_none() {
            return Ok(());
        }
    }

    let model_path = a.model.as_ref().expect("clap enforces presence");
    let (_, q) = load_quant(model_path)?;
    let input = a.input.expect("clap enforces presence");
    let cfg = DatapathConfig { wraparound: a.wraparound, ..DatapathConfig::default() };
    let trace = emulate(&q, input, &cfg)?;
    println!(
        "input 0x{input:02x}: decision {} (tie: {}), {} hidden iterations, {} output iterations x {} executions, {} cycles",
        trace.decision,
        trace.tie,
        trace.hidden_iterations,
        trace.output_iterations,
        trace.executions_per_output,
        trace.total_cycles
    );
    if let Some(path) = &a.trace {
        write_text(path, &pretty_json(&trace)?)?;
    }
    Ok(())
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated key bytes.
    #[arg(long, value_delimiter = ',', value_parser = parse_byte)]
    keys: Option<Vec<u8>>,
    /// Comma-separated hidden sizes.
    #[arg(long, value_delimiter = ',')]
    hidden_sizes: Option<Vec<usize>>,
    /// Comma-separated precisions.
    #[arg(long, value_delimiter = ',')]
    precisions: Option<Vec<u32>>,
    /// Training L2 strength.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Comma-separated seeds, tried in order per cell.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// full8, min, or range (defaults differ per sweep).
    #[arg(long)]
    space: Option<SpacePolicy>,
    /// Directory for sweep.csv and sweep.json.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_sweep(a: SweepArgs, precision_sweep: bool) -> Result<()> {
    let mut spec =
        if precision_sweep { SweepSpec::precision_defaults() } else { SweepSpec::hidden_defaults() };
    if let Some(keys) = a.keys {
        spec.keys = keys;
    }
    if let Some(h) = a.hidden_sizes {
        spec.hidden_sizes = h;
    }
    if let Some(p) = a.precisions {
        spec.precisions = p;
    }
    spec.lambdas = vec![a.lambda];
    if let Some(seeds) = a.seeds {
        spec.seeds = seeds;
    }
    if let Some(space) = a.space {
        spec.space = space;
    }

    let table = if precision_sweep { sweep_precision(&spec)? } else { sweep_hidden(&spec)? };
    write_text(&a.out.join("sweep.csv"), &table.csv())?;
    write_text(&a.out.join("sweep.json"), &pretty_json(&table)?)?;

    let slopes = if precision_sweep { table.precision_slopes() } else { table.hidden_slopes() };
    let axis = if precision_sweep { "precision" } else { "hidden size" };
    println!("{} rows, {} failed cells -> {}", table.rows.len(), table.failures.len(), a.out.display());
    for (group, slope) in slopes {
        println!("  %faults slope vs {axis} for {}: {slope:+.6}", group.name());
    }
    for f in &table.failures {
        println!(
            "  absent cell key=0x{:02x} hidden={} precision={}: {}",
            f.key_byte, f.hidden, f.precision, f.reason
        );
    }
    Ok(())
}

#[derive(Args)]
struct SearchArgs {
    /// Key byte, e.g. 0x25.
    #[arg(long, value_parser = parse_byte, default_value = "0x25")]
    key: u8,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 3)]
    precision: u32,
    /// Comma-separated L2 strengths for the constrained side.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Comma-separated seeds used for both sides.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Learning rate shared by the baseline and the constrained grid.
    #[arg(long, default_value_t = 0.5)]
    learning_rate: f64,
    /// Extra epochs each constrained run trains past its stopping gate.
    #[arg(long, default_value_t = 6000)]
    sustain: usize,
    /// full8, min, or range.
    #[arg(long, default_value = "range")]
    space: SpacePolicy,
    /// Brute-force spot-validation stride on the winner (1 = every site).
    #[arg(long, default_value_t = 97)]
    validate_stride: usize,
    /// Directory for the winner models and comparison JSON.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_search(a: SearchArgs) -> Result<()> {
    let mut spec = SearchSpec::new(a.key);
    spec.topology = Topology::aes(a.hidden);
    spec.precision = a.precision;
    if let Some(lambdas) = a.lambdas {
        spec.lambdas = lambdas;
    }
    if let Some(seeds) = a.seeds {
        spec.seeds = seeds;
    }
    spec.learning_rate = a.learning_rate;
    spec.sustain_epochs = a.sustain;
    spec.space = a.space;
    spec.validate_stride = a.validate_stride;

    let outcome = constrained_search(&spec)?;
    let report = &outcome.report;

    let metadata = |side: &nnsbox::experiments::ModelOutcome| TrainingMetadata {
        seed: side.seed,
        lambda: side.lambda,
        epochs: side.epochs,
        learning_rate: spec.learning_rate,
    };
    save_quant_model(
        &a.out.join("constrained.json"),
        &outcome.best_quant,
        a.key,
        &metadata(&report.constrained),
    )?;
    save_float_model(
        &a.out.join("constrained_float.json"),
        &outcome.best_float,
        a.key,
        &metadata(&report.constrained),
    )?;
    save_quant_model(
        &a.out.join("baseline.json"),
        &outcome.baseline_quant,
        a.key,
        &metadata(&report.baseline),
    )?;
    write_text(&a.out.join("comparison.json"), &pretty_json(report)?)?;

    println!(
        "baseline    lambda=0 seed={}: {} faulty ({:.6}%) | W1 {} b1 {} W2 {} b2 {}",
        report.baseline.seed,
        report.baseline.faulty_pairs,
        report.baseline.percent_faults,
        report.baseline.by_group.w1,
        report.baseline.by_group.b1,
        report.baseline.by_group.w2,
        report.baseline.by_group.b2
    );
    println!(
        "constrained lambda={} seed={}: {} faulty ({:.6}%) | W1 {} b1 {} W2 {} b2 {}",
        report.constrained.lambda,
        report.constrained.seed,
        report.constrained.faulty_pairs,
        report.constrained.percent_faults,
        report.constrained.by_group.w1,
        report.constrained.by_group.b1,
        report.constrained.by_group.w2,
        report.constrained.by_group.b2
    );
    println!(
        "improvement: {} (published reference: {:.0}x); winner spot-validated on {} tuples, {} disagreements",
        report.improvement_display(),
        report.reference_factor,
        report.validation_tuples,
        report.validation_disagreements
    );
    if report.validation_disagreements != 0 {
        bail!("margin predictions disagreed with brute force on the winner");
    }
    Ok(())
}

#[derive(Args)]
struct ReportArgs {
    /// Seeds to record in the bundle.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// faults report JSON.
    #[arg(long)]
    campaign: Option<PathBuf>,
    /// margins report JSON.
    #[arg(long)]
    margins: Option<PathBuf>,
    /// sweep.json files (repeatable).
    #[arg(long)]
    sweep: Vec<PathBuf>,
    /// search comparison JSON.
    #[arg(long)]
    comparison: Option<PathBuf>,
    /// Embed the cycle-latency calibration.
    #[arg(long)]
    with_calibration: bool,
    /// Also write per-group fault-map grids derived from the campaign.
    #[arg(long)]
    fault_maps: Option<PathBuf>,
    /// Bundle JSON path.
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let campaign: Option<FaultReport> = a.campaign.as_deref().map(read_json).transpose()?;
    let margins = a.margins.as_deref().map(read_json).transpose()?;
    let sweeps: Vec<SweepTable> =
        a.sweep.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let comparison = a.comparison.as_deref().map(read_json).transpose()?;
    let calibration =
        a.with_calibration.then(|| calibrate_latencies(&CYCLE_CALIBRATION_ROWS, 256, 8));

    if let (Some(dir), Some(campaign)) = (&a.fault_maps, &campaign) {
        let topology = grid_topology(campaign)?;
        for grid in fault_map(topology, &campaign.per_site) {
            write_text(
                &dir.join(format!("map_{}.csv", grid.group.name())),
                &grid.matrix_csv(),
            )?;
        }
    }

    let bundle = build_bundle(
        a.seeds.unwrap_or_default(),
        campaign,
        margins,
        sweeps,
        comparison,
        calibration,
    );
    write_text(&a.out, &bundle_json(&bundle))?;
    println!(
        "bundle -> {}: denominator {:?}, improvement {:?}, {} model hash(es)",
        a.out.display(),
        bundle.denominator,
        bundle.improvement_factor,
        bundle.model_hashes.len()
    );
    Ok(())
}

/// Recovers the topology from a campaign's site list (reports do not store
/// it directly).
fn grid_topology(report: &FaultReport) -> Result<Topology> {
    use nnsbox::model::ParamGroup;
    let mut inputs = 0usize;
    let mut hidden = 0usize;
    let mut outputs = 0usize;
    for p in &report.per_site {
        match p.site.group {
            ParamGroup::W1 => {
                inputs = inputs.max(p.site.i + 1);
                hidden = hidden.max(p.site.j + 1);
            }
            ParamGroup::B1 => hidden = hidden.max(p.site.i + 1),
            ParamGroup::W2 => {
                hidden = hidden.max(p.site.i + 1);
                outputs = outputs.max(p.site.j + 1);
            }
            ParamGroup::B2 => outputs = outputs.max(p.site.i + 1),
        }
    }
    if inputs == 0 || hidden == 0 || outputs == 0 {
        bail!("campaign report has no per-site data to derive grids from");
    }
    Ok(Topology::new(inputs, hidden, outputs))
}
