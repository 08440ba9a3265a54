use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use classaware::experiment::{evaluate_split, partition};
use classaware::fusion::fuse_indicators;
use classaware::indicators::IndicatorTriple;
use classaware::model::checkpoint;
use classaware::phantom::Split;
use classaware::{
    generate_phantoms, load_dataset, run_ablation, save_dataset, train, Error, ExperimentConfig, FusionConfig,
    PhantomConfig,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "classaware", version, about = "Class-aware semi-supervised segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset directory.
    Gen(GenArgs),
    /// Train one configuration and write its report, traces and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the five-row ablation grid over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seeds; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Directory for ablation.csv and ablation.json; CSV goes to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
        /// Seed used to rebuild the validation split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Fuse per-class indicators (CSV: class,E,V,Con) into confidence scores.
    Fuse {
        #[arg(long)]
        indicators: PathBuf,
        /// JSON fusion settings; every field is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Test,
    Validation,
    Labelled,
    Unlabelled,
    All,
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON phantom settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    n_labelled: Option<usize>,
    #[arg(long)]
    n_unlabelled: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    ring_dropout: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn gen(args: GenArgs) -> Result<()> {
    let mut cfg: PhantomConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => PhantomConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.height {
        cfg.h = v;
    }
    if let Some(v) = args.width {
        cfg.w = v;
    }
    if let Some(v) = args.n_labelled {
        cfg.n_labelled = v;
    }
    if let Some(v) = args.n_unlabelled {
        cfg.n_unlabelled = v;
    }
    if let Some(v) = args.n_test {
        cfg.n_test = v;
    }
    if let Some(v) = args.ring_dropout {
        cfg.ring_dropout = v;
    }
    if let Some(v) = args.noise_sigma {
        cfg.noise_sigma = v;
    }
    let data = generate_phantoms(&cfg)?;
    save_dataset(&data, &args.out)?;
    let fractions: Vec<String> = data.class_fractions().iter().map(|f| format!("{f:.4}")).collect();
    eprintln!(
        "wrote {} images to {} (class fractions {})",
        data.samples.len(),
        args.out.display(),
        fractions.join(", ")
    );
    Ok(())
}

fn train_cmd(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = load_dataset(data)?;
    let outcome = train(&cfg, &data)?;
    let report = &outcome.report;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), report.to_json()? + "\n")?;
    if let Some(m) = report.final_metrics() {
        m.write_csv(create(&out.join("metrics.csv"))?)?;
    }
    report.write_cc_trace_csv(create(&out.join("cc_trace.csv"))?)?;
    report.write_rate_trace_csv(create(&out.join("rate_trace.csv"))?)?;
    report.write_loss_csv(create(&out.join("loss_curve.csv"))?)?;
    checkpoint::save(&outcome.student, &out.join("student.ckpt"))?;
    checkpoint::save(&outcome.teacher, &out.join("teacher.ckpt"))?;
    if let Some(m) = report.final_metrics() {
        let per_class: Vec<String> = m.classes.iter().map(|c| format!("{:.4}", c.dsc)).collect();
        eprintln!(
            "macro DSC {:.4}, per-class DSC [{}], {:.1}s",
            m.macro_dsc,
            per_class.join(", "),
            report.wall_clock_seconds
        );
    }
    Ok(())
}

fn ablate(config: Option<&Path>, data: &Path, seeds: Option<Vec<u64>>, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let seeds = seeds.unwrap_or_else(|| cfg.seeds.clone());
    let data = load_dataset(data)?;
    let result = run_ablation(&cfg, &data, &seeds, |variant, seed, report| {
        let dsc = report.final_metrics().map(|m| m.macro_dsc).unwrap_or(f64::NAN);
        eprintln!("{:<20} seed {seed:<4} macro DSC {dsc:.4} ({:.1}s)", variant.name, report.wall_clock_seconds);
    })?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            result.write_csv(create(&dir.join("ablation.csv"))?)?;
            fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&result)? + "\n")?;
        }
        None => result.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

fn eval(checkpoint_path: &Path, data: &Path, split: EvalSplit, seed: u64, json: Option<&Path>) -> Result<()> {
    let params = checkpoint::load(checkpoint_path)?;
    let data = load_dataset(data)?;
    if params.arch.classes != data.classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, dataset has {}",
            params.arch.classes, data.classes
        ))
        .into());
    }
    let indices = match split {
        EvalSplit::Test => data.indices(Split::Test),
        EvalSplit::Labelled => data.indices(Split::Labelled),
        EvalSplit::Unlabelled => data.indices(Split::Unlabelled),
        EvalSplit::All => (0..data.samples.len()).collect(),
        EvalSplit::Validation => partition(&data, &ExperimentConfig { seed, ..ExperimentConfig::default() })?.validation,
    };
    if indices.is_empty() {
        return Err(Error::Config("the selected split is empty".into()).into());
    }
    let report = evaluate_split(&params, &data, &indices)?;
    report.write_csv(io::stdout().lock())?;
    if let Some(path) = json {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    Ok(Some(s.parse::<f64>().map_err(|e| Error::Config(format!("bad indicator value {s:?}: {e}")))?))
}

fn fuse(indicators: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg: FusionConfig = match config {
        Some(p) => read_json(p)?,
        None => FusionConfig::default(),
    };
    let mut rdr = csv::Reader::from_path(indicators).with_context(|| format!("reading {}", indicators.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != ["class", "E", "V", "Con"] {
        return Err(Error::Config(format!("expected header class,E,V,Con, found {}", header.join(","))).into());
    }
    let mut rows: Vec<(usize, [Option<f64>; 3])> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let class: usize = rec[0].trim().parse().map_err(|e| Error::Config(format!("bad class {:?}: {e}", &rec[0])))?;
        rows.push((class, [parse_cell(&rec[1])?, parse_cell(&rec[2])?, parse_cell(&rec[3])?]));
    }
    rows.sort_by_key(|r| r.0);
    if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
        return Err(Error::Config("classes must be numbered 0..C without gaps".into()).into());
    }
    let column = |k: usize| rows.iter().map(|r| r.1[k]).collect::<Vec<_>>();
    let triple = IndicatorTriple::from_values(column(0), column(1), column(2))?;
    cfg.validate(triple.classes())?;
    let fused = fuse_indicators(&triple, &cfg)?;
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut wtr = csv::Writer::from_writer(sink);
    wtr.write_record(["class", "ccf", "fr", "cc"])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for c in 0..triple.classes() {
        wtr.write_record([c.to_string(), opt(fused.ccf[c]), opt(fused.fr[c]), opt(fused.cc[c])])?;
    }
    wtr.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => gen(args),
        Command::Train { config, data, out, seed } => train_cmd(config.as_deref(), &data, &out, seed),
        Command::Ablate { config, data, seeds, out } => ablate(config.as_deref(), &data, seeds, out.as_deref()),
        Command::Eval { checkpoint, data, split, seed, json } => eval(&checkpoint, &data, split, seed, json.as_deref()),
        Command::Fuse { indicators, config, out } => fuse(&indicators, config.as_deref(), out.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InfeasibleGeometry(_)) => EXIT_CONFIG,
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if let Some(Error::Divergence { dump, .. }) = err.downcast_ref::<Error>() {
                eprintln!("state: {dump}");
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
