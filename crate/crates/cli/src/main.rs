//! `wtfpad`: fit histograms, pad traces, run baselines and score defenses.

mod config;
mod corpus_io;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wtfpad::baselines::{buflo, tamaraw, BufloParams, TamarawParams};
use wtfpad::evaluation::{evaluate_corpus, open_world_eval, EvalConfig, EvalReport, OpenWorldConfig};
use wtfpad::fitting::{materialize_histograms, split_burst_gap, FitFamily, MaterializeParams, Threshold};
use wtfpad::histograms::{HistogramSet, Rounding, DEFAULT_BINS};
use wtfpad::padding::{EndpointConfig, DEFAULT_CELL_SIZE};
use wtfpad::simulator::{corpus_overheads, median, simulate_corpus, LinkModel, OverheadReport};
use wtfpad::traces::{synth_corpus, Corpus, SynthParams, Trace};

use config::ConfigFile;
use corpus_io::{load_corpus, write_corpus};

#[derive(Parser)]
#[command(name = "wtfpad", version, about = "Adaptive padding simulator and evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Fit a corpus and write histograms.json and fit_report.txt.
    Fit(FitArgs),
    /// Pad a corpus and write the padded traces and overheads.csv.
    Simulate(SimulateArgs),
    /// Pad a corpus with BuFLO and Tamaraw.
    Baseline(BaselineArgs),
    /// Score a corpus with the k-NN attack.
    Evaluate(EvaluateArgs),
    /// Overhead and accuracy across a percentile grid.
    Sweep(SweepArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct Knobs {
    #[arg(long)]
    percentile: Option<f64>,
    /// normal or lognormal.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    bins: Option<usize>,
    /// Upper edge of the last finite bin, seconds; defaults to the 99th
    /// percentile of the fitted samples.
    #[arg(long)]
    max_iat: Option<f64>,
    /// Finite tokens per histogram.
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    pn_burst: Option<f64>,
    /// nearest or ceiling.
    #[arg(long)]
    rounding: Option<String>,
    #[arg(long)]
    cell_size: Option<u32>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pages: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    prefix: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    knobs: Knobs,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    knobs: Knobs,
    #[arg(long)]
    corpus: PathBuf,
    /// histograms.json from `fit`; fitted on the fly when absent.
    #[arg(long)]
    histograms: Option<PathBuf>,
    /// Never pad: the output equals the input.
    #[arg(long)]
    disable_padding: bool,
    /// Add a kind column (R, D or C) to every padded trace line.
    #[arg(long)]
    annotate: bool,
    /// One-way link delay, seconds.
    #[arg(long)]
    link_delay: Option<f64>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    annotate: bool,
    #[arg(long)]
    cell_size: Option<u32>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    rho_out: Option<f64>,
    #[arg(long)]
    rho_in: Option<f64>,
    #[arg(long)]
    pad_multiple: Option<u32>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    /// Non-monitored traces for the open-world experiment.
    #[arg(long)]
    background: Option<PathBuf>,
    /// Comma-separated background sizes.
    #[arg(long, value_delimiter = ',')]
    world_sizes: Vec<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    knobs: Knobs,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated percentiles.
    #[arg(long, value_delimiter = ',')]
    percentiles: Vec<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
}

const DEFAULT_SEED: u64 = 1;
const SWEEP_GRID: [f64; 7] = [0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.01];

/// Settings every subcommand resolves through flags, config and defaults.
struct Resolved {
    cfg: ConfigFile,
    seed: u64,
    out: PathBuf,
}

impl Resolved {
    fn new(common: &Common, default_out: &str) -> Result<Self> {
        let cfg = match &common.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        let seed = cfg.resolve("seed", common.seed, DEFAULT_SEED)?;
        let out = cfg.resolve("out", common.out.clone(), PathBuf::from(default_out))?;
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Resolved { cfg, seed, out })
    }

    fn header(&self, extra: &str) -> String {
        if extra.is_empty() {
            format!("# seed={}\n", self.seed)
        } else {
            format!("# seed={} {extra}\n", self.seed)
        }
    }

    fn write(&self, name: &str, body: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    }

    /// Materialization knobs; defaults are a normal fit at p = 0.4.
    fn materialize(&self, k: &Knobs) -> Result<MaterializeParams> {
        let family: String = self.cfg.resolve("family", k.family.clone(), "normal".into())?;
        let rounding: String = self.cfg.resolve("rounding", k.rounding.clone(), "nearest".into())?;
        let max_iat = match k.max_iat {
            Some(m) => Some(m),
            None => self.cfg.get("max-iat")?,
        };
        Ok(MaterializeParams {
            family: family.parse::<FitFamily>().map_err(anyhow::Error::msg)?,
            percentile: self.cfg.resolve("percentile", k.percentile, 0.4)?,
            bins: self.cfg.resolve("bins", k.bins, DEFAULT_BINS)?,
            max_iat,
            token_budget: self.cfg.resolve("tokens", k.tokens, 300)?,
            pn_burst: self.cfg.resolve("pn-burst", k.pn_burst, 0.1)?,
            rounding: match rounding.as_str() {
                "nearest" => Rounding::Nearest,
                "ceiling" => Rounding::Ceiling,
                other => bail!("unknown rounding {other:?}; expected nearest or ceiling"),
            },
        })
    }

    fn cell_size(&self, flag: Option<u32>) -> Result<u32> {
        self.cfg.resolve("cell-size", flag, DEFAULT_CELL_SIZE)
    }

    fn eval(&self, k: Option<usize>, folds: Option<usize>) -> Result<EvalConfig> {
        let d = EvalConfig::default();
        Ok(EvalConfig { k: self.cfg.resolve("k", k, d.k)?, folds: self.cfg.resolve("folds", folds, d.folds)?, ..d })
    }
}

fn fit(corpus: &Corpus, params: &MaterializeParams, seed: u64) -> Result<wtfpad::fitting::Materialized> {
    let split = split_burst_gap(corpus, 2, Threshold::Auto).context("splitting bursts and gaps")?;
    materialize_histograms(&split, params, &mut ChaCha8Rng::seed_from_u64(seed)).context("fitting histograms")
}

fn pad(corpus: &Corpus, set: HistogramSet, cell: u32, delay: f64, seed: u64) -> Result<Corpus> {
    let client = EndpointConfig::client(set.clone()).with_cell_size(cell);
    let bridge = EndpointConfig::bridge(set).with_cell_size(cell);
    Ok(simulate_corpus(corpus, &client, &bridge, LinkModel { one_way_delay: delay }, seed)?)
}

fn overhead_csv(header: String, original: &Corpus, reports: &[OverheadReport]) -> String {
    let mut out = header;
    out.push_str("label,instance,bw_overhead,lat_overhead,dummies,controls\n");
    for ((t, n), r) in original.traces.iter().zip(original.instance_numbers()).zip(reports) {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{},{}",
            t.label(),
            n,
            r.bandwidth_overhead,
            r.latency_overhead,
            r.dummy_count,
            r.control_count
        )
        .unwrap();
    }
    out
}

fn points_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("x,y\n");
    for (x, y) in points {
        writeln!(out, "{x:.6},{y:.6}").unwrap();
    }
    out
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let r = Resolved::new(&a.common, "corpus")?;
    let defaults = SynthParams::default();
    let params =
        SynthParams { label_prefix: r.cfg.resolve("prefix", a.prefix, defaults.label_prefix.clone())?, ..defaults };
    let pages = r.cfg.resolve("pages", a.pages, 20)?;
    let instances = r.cfg.resolve("instances", a.instances, 20)?;
    let corpus = synth_corpus(pages, instances, &params, r.seed)?;
    write_corpus(&corpus, &r.out, false)?;
    let mut manifest = r.header(&format!("pages={pages} instances={instances}"));
    for (k, v) in &corpus.metadata {
        writeln!(manifest, "{k}={v}").unwrap();
    }
    r.write("MANIFEST", &manifest)
}

fn run_fit(a: FitArgs) -> Result<()> {
    let r = Resolved::new(&a.common, "fit")?;
    let params = r.materialize(&a.knobs)?;
    let corpus = load_corpus(&a.corpus)?;
    let m = fit(&corpus, &params, r.seed)?;
    r.write("histograms.json", &m.histograms.to_json())?;
    let header = r.header(&format!("family={} percentile={}", params.family, params.percentile));
    r.write("fit_report.txt", &(header + &m.report.to_text()))
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let r = Resolved::new(&a.common, "padded")?;
    let params = r.materialize(&a.knobs)?;
    let cell = r.cell_size(a.knobs.cell_size)?;
    let delay = r.cfg.resolve("link-delay", a.link_delay, 0.0)?;
    let corpus = load_corpus(&a.corpus)?;
    let set = if a.disable_padding {
        HistogramSet::disabled(params.bins, 1.0)?
    } else if let Some(path) = &a.histograms {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        HistogramSet::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        fit(&corpus, &params, r.seed)?.histograms
    };
    let padded = pad(&corpus, set, cell, delay, r.seed)?;
    write_corpus(&padded, &r.out.join("traces"), a.annotate)?;
    let reports = corpus_overheads(&corpus, &padded)?;
    r.write("overheads.csv", &overhead_csv(r.header(&format!("link_delay={delay}")), &corpus, &reports))
}

fn run_baseline(a: BaselineArgs) -> Result<()> {
    let r = Resolved::new(&a.common, "baselines")?;
    let cell = r.cell_size(a.cell_size)?;
    let bd = BufloParams::default();
    let bp = BufloParams {
        tau: r.cfg.resolve("tau", a.tau, bd.tau)?,
        rho: r.cfg.resolve("rho", a.rho, bd.rho)?,
        cell_size: cell,
    };
    let td = TamarawParams::default();
    let tp = TamarawParams {
        rho_out: r.cfg.resolve("rho-out", a.rho_out, td.rho_out)?,
        rho_in: r.cfg.resolve("rho-in", a.rho_in, td.rho_in)?,
        cell_size: cell,
        pad_multiple: r.cfg.resolve("pad-multiple", a.pad_multiple, td.pad_multiple)?,
    };
    let corpus = load_corpus(&a.corpus)?;
    type Defense<'a> = Box<dyn Fn(&Trace) -> Result<Trace, wtfpad::baselines::BaselineError> + 'a>;
    let defenses: [(&str, Defense); 2] =
        [("buflo", Box::new(|t| buflo(t, &bp))), ("tamaraw", Box::new(|t| tamaraw(t, &tp)))];
    for (name, defense) in defenses {
        let traces = corpus.traces.iter().map(&defense).collect::<Result<Vec<_>, _>>()?;
        let padded = Corpus::new(traces)?;
        write_corpus(&padded, &r.out.join(name), a.annotate)?;
        let reports = corpus_overheads(&corpus, &padded)?;
        r.write(&format!("{name}_overheads.csv"), &overhead_csv(r.header(name), &corpus, &reports))?;
    }
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let r = Resolved::new(&a.common, "eval")?;
    let cfg = r.eval(a.k, a.folds)?;
    let corpus = load_corpus(&a.corpus)?;
    let mut rows = vec![evaluate_corpus(&corpus, &cfg, r.seed)?];
    let first = &rows[0];
    r.write("roc.csv", &points_csv(&first.roc.as_ref().expect("binarized report").points))?;
    r.write("proc.csv", &points_csv(&first.proc.as_ref().expect("binarized report").points))?;
    if let Some(bg) = &a.background {
        let background = load_corpus(bg)?;
        let sizes = if a.world_sizes.is_empty() { vec![background.len()] } else { a.world_sizes.clone() };
        let ow = OpenWorldConfig { folds: cfg.folds, ..OpenWorldConfig::default() };
        let reports = open_world_eval(&corpus, &background, &ow, &sizes, r.seed)?;
        for rep in &reports {
            if let Some(p) = &rep.proc {
                r.write(&format!("proc_open_{}.csv", rep.world_size), &points_csv(&p.points))?;
            }
        }
        rows.extend(reports);
    } else if !a.world_sizes.is_empty() {
        bail!("--world-sizes needs --background");
    }
    let mut out = r.header(&format!("k={} folds={}", cfg.k, cfg.folds));
    out.push_str(EvalReport::CSV_HEADER);
    out.push('\n');
    for row in &rows {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    r.write("eval.csv", &out)
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let r = Resolved::new(&a.common, "sweep")?;
    let base = r.materialize(&a.knobs)?;
    let cell = r.cell_size(a.knobs.cell_size)?;
    let cfg = r.eval(a.k, a.folds)?;
    let grid = if a.percentiles.is_empty() { SWEEP_GRID.to_vec() } else { a.percentiles.clone() };
    let corpus = load_corpus(&a.corpus)?;
    let raw = evaluate_corpus(&corpus, &cfg, r.seed)?;
    let mut out = r.header(&format!("family={} raw_accuracy={:.6}", base.family, raw.accuracy));
    out.push_str("p,median_bw_overhead,mean_accuracy\n");
    for p in grid {
        let params = MaterializeParams { percentile: p, ..base };
        let m = fit(&corpus, &params, r.seed).with_context(|| format!("percentile {p}"))?;
        let padded = pad(&corpus, m.histograms, cell, 0.0, r.seed)?;
        let bw: Vec<f64> = corpus_overheads(&corpus, &padded)?.iter().map(|o| o.bandwidth_overhead).collect();
        let acc = evaluate_corpus(&padded, &cfg, r.seed)?.accuracy;
        writeln!(out, "{p},{:.6},{acc:.6}", median(&bw).expect("corpus is non-empty")).unwrap();
    }
    r.write("sweep.csv", &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Fit(a) => run_fit(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Baseline(a) => run_baseline(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Sweep(a) => run_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
