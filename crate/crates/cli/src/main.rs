use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use aras::config::{validate_config, AcceleratorConfig, CheckedConfig};
use aras::model::{load_network_spec, LayerKind, NetworkModel};
use aras::report::{analyze_reuse, Comparison, RunReport};
use aras::schedule::{aras_schedule, naive_schedule, ScheduleOptions, Variant};
use aras::sim::{simulate_with, timed_trace, SimOptions};
use aras::synth;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Write-aware scheduling and simulation for ReRAM crossbar accelerators.
#[derive(Parser)]
#[command(name = "aras", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Schedule and simulate one variant; writes report.toml, trace.txt and
    /// timed_trace.txt to the output directory.
    Simulate {
        #[command(flatten)]
        input: Input,
        #[arg(long, value_enum, default_value = "brw")]
        variant: VariantArg,
        #[arg(long, default_value = "aras-out")]
        out: PathBuf,
        /// Also write report.csv.
        #[arg(long)]
        csv: bool,
    },
    /// Run several variants and tabulate them against a baseline; each
    /// variant's files go to their own subdirectory of the output directory.
    Compare {
        #[command(flatten)]
        input: Input,
        /// Comma-separated variants to run.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "naive,base,b,br,brw")]
        variant: Vec<VariantArg>,
        /// Variant the ratios are normalized to [default: first listed].
        #[arg(long, value_enum)]
        baseline: Option<VariantArg>,
        #[arg(long, default_value = "aras-out")]
        out: PathBuf,
        /// Number of variants run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Report per-center skipping ratios, the chosen center, per-layer
    /// offsets and clip fractions, and pulses with and without shifting.
    AnalyzeReuse {
        #[command(flatten)]
        input: Input,
        /// Also write reuse.toml and reuse.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one of the built-in synthetic networks as JSON.
    Generate {
        #[arg(long, value_enum)]
        kind: NetworkKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Encoder blocks for the BERT-like network.
        #[arg(long, default_value_t = 12)]
        blocks: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default accelerator configuration as TOML.
    Config {
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Input {
    /// Network description (JSON).
    #[arg(long)]
    network: PathBuf,
    /// Accelerator configuration (TOML); built-in defaults when absent.
    #[arg(long, env = "ARAS_CONFIG")]
    config: Option<PathBuf>,
    /// Re-seed every generated weight tensor of the network.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated candidate centers for weight shifting.
    #[arg(long, value_delimiter = ',')]
    centers: Option<Vec<u32>>,
    /// Largest clipped fraction of any layer a center may cause.
    #[arg(long)]
    clip_threshold: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Naive,
    Base,
    B,
    Br,
    Brw,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Naive => Variant::Naive,
            VariantArg::Base => Variant::Base,
            VariantArg::B => Variant::B,
            VariantArg::Br => Variant::Br,
            VariantArg::Brw => Variant::Brw,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NetworkKind {
    Vgg,
    Resnet,
    Bert,
    Pair,
    Random,
}

struct Loaded {
    network: NetworkModel,
    config: CheckedConfig,
}

impl Input {
    fn load(&self) -> Result<Loaded> {
        let config = match &self.config {
            Some(path) => {
                let raw = AcceleratorConfig::load(path)?;
                validate_config(raw).with_context(|| format!("{}", path.display()))?
            }
            None => CheckedConfig::default(),
        };
        let mut spec = load_network_spec(&self.network)?;
        if let Some(seed) = self.seed {
            spec.reseed(seed);
        }
        let base = self.network.parent().unwrap_or(Path::new("."));
        let network = spec
            .materialize(base)
            .with_context(|| format!("{}", self.network.display()))?;
        Ok(Loaded { network, config })
    }

    fn options(&self, variant: Variant) -> Option<ScheduleOptions> {
        let mut o = variant.options()?;
        if let Some(c) = &self.centers {
            o.centers = c.clone();
        }
        if let Some(t) = self.clip_threshold {
            o.clip_threshold = t;
        }
        Some(o)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Schedules and simulates `variant`, writing its report and traces to `out`.
fn run_variant(input: &Input, loaded: &Loaded, variant: Variant, out: &Path) -> Result<RunReport> {
    let Loaded { network, config } = loaded;
    log::info!("scheduling {}", variant.label());
    let schedule = match input.options(variant) {
        None => naive_schedule(network, config)?,
        Some(o) => aras_schedule(network, config, &o)?,
    };
    let sim = simulate_with(&schedule, network, config, &SimOptions::default())
        .with_context(|| format!("simulating {}", variant.label()))?;
    let report = RunReport::new(variant, network, &schedule, sim.metrics);
    create_dir(out)?;
    write(&out.join("trace.txt"), &schedule.to_trace())?;
    write(&out.join("timed_trace.txt"), &timed_trace(&schedule, &sim.timing))?;
    write(&out.join("report.toml"), &report.to_toml())?;
    Ok(report)
}

fn simulate(input: &Input, variant: Variant, out: &Path, csv: bool) -> Result<()> {
    let loaded = input.load()?;
    let mut report = run_variant(input, &loaded, variant, out)?;
    if variant != Variant::Naive {
        let naive = run_variant(input, &loaded, Variant::Naive, &out.join("naive"))?;
        report.normalize_to(&naive);
        write(&out.join("report.toml"), &report.to_toml())?;
    }
    if csv {
        write(&out.join("report.csv"), &report.to_csv())?;
    }
    let m = &report.metrics;
    println!("label {}", report.label);
    println!("planner {}", report.planner);
    println!("makespan {}", m.makespan);
    println!("energy_total {:e}", m.energy_total());
    println!("total_pulses {}", m.total_pulses);
    println!("overlap_cycles {}", m.overlap_cycles);
    println!("speedup_vs_{} {:.6}", report.ratios.baseline, report.ratios.speedup);
    Ok(())
}

fn compare(input: &Input, variants: &[Variant], baseline: Option<Variant>, out: &Path, jobs: usize) -> Result<()> {
    let mut unique = Vec::new();
    for &v in variants {
        if !unique.contains(&v) {
            unique.push(v);
        }
    }
    if unique.len() < 2 {
        bail!("compare needs at least two distinct variants");
    }
    let baseline = baseline.unwrap_or(unique[0]);
    let base_index = unique
        .iter()
        .position(|&v| v == baseline)
        .with_context(|| format!("baseline {} is not among the compared variants", baseline.flag()))?;
    let loaded = input.load()?;
    let results: Mutex<Vec<Option<Result<RunReport>>>> = Mutex::new((0..unique.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, unique.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&v) = unique.get(i) else { break };
                let r = run_variant(input, &loaded, v, &out.join(v.flag()));
                results.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    let runs = results
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every variant ran"))
        .collect::<Result<Vec<_>>>()?;
    let cmp = Comparison::new(runs, base_index)?;
    for run in &cmp.runs {
        write(&out.join(run.variant.flag()).join("report.toml"), &run.to_toml())?;
    }
    let table = cmp.to_table();
    write(&out.join("compare.toml"), &cmp.to_toml())?;
    write(&out.join("compare.csv"), &cmp.to_csv())?;
    write(&out.join("compare.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn analyze(input: &Input, out: Option<&Path>) -> Result<()> {
    let loaded = input.load()?;
    let options = input.options(Variant::Brw).expect("ARAS variant");
    let report = analyze_reuse(&loaded.network, &loaded.config, &options)?;
    let table = report.to_table();
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("reuse.toml"), &report.to_toml())?;
        write(&dir.join("reuse.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn generate(kind: NetworkKind, seed: u64, blocks: usize, out: &Path) -> Result<()> {
    let spec = match kind {
        NetworkKind::Vgg => synth::vgg16(seed),
        NetworkKind::Resnet => synth::resnet_like(seed),
        NetworkKind::Bert => synth::bert_like(blocks, seed),
        NetworkKind::Pair => synth::gaussian_pair(LayerKind::Conv, (64.0, 192.0), 12.0, seed),
        NetworkKind::Random => synth::random_network(seed, 20),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(out, &(spec.to_json() + "\n"))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match &cli.command {
        Command::Simulate {
            input,
            variant,
            out,
            csv,
        } => simulate(input, (*variant).into(), out, *csv),
        Command::Compare {
            input,
            variant,
            baseline,
            out,
            jobs,
        } => {
            let variants: Vec<Variant> = variant.iter().map(|&v| v.into()).collect();
            compare(input, &variants, baseline.map(Into::into), out, *jobs)
        }
        Command::AnalyzeReuse { input, out } => analyze(input, out.as_deref()),
        Command::Generate {
            kind,
            seed,
            blocks,
            out,
        } => generate(*kind, *seed, *blocks, out),
        Command::Config { out } => {
            let text = AcceleratorConfig::default().to_toml_string();
            match out {
                Some(path) => write(path, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}
