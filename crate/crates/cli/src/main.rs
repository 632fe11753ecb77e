//! `flowmix`: train, evaluate and inspect mixtures of normalizing flows.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flowmix::checkpoint;
use flowmix::config::{DatasetFile, ExperimentConfig};
use flowmix::eval::{self, DensityModel};
use flowmix::experiment::{self, METRICS_HEADER};
use flowmix::mixture::MixtureModel;
use flowmix::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "flowmix", version, about = "Mixtures of normalizing flows fitted by an exact discrete ELBO")]
struct Cli {
    /// Overrides every seed taken from configs and defaults.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory that relative dataset paths are resolved against.
    #[arg(long, global = true, env = "FLOWMIX_DATA_DIR", default_value = "data/mnist")]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model described by a config file.
    Train {
        config: PathBuf,
        /// Output directory, overriding the config's.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Print a line per epoch.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate a checkpoint on a dataset and print metrics as JSON.
    Eval {
        checkpoint: PathBuf,
        dataset_config: PathBuf,
        /// Also write the JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from one component or from all of them.
    Sample {
        checkpoint: PathBuf,
        /// Component index or `all`.
        #[arg(long, default_value = "all")]
        component: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a density or partition grid over a 2D box.
    Grid {
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: GridKind,
        /// `lo,hi` for both axes or `xlo,xhi,ylo,yhi`.
        #[arg(long, default_value = "-3,3", allow_hyphen_values = true)]
        bounds: String,
        #[arg(long, default_value_t = 200)]
        res: usize,
        /// CSV path; the raster goes next to it with a `.pgm` or `.ppm` extension.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GridKind {
    Density,
    Partition,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> flowmix::Result<()> {
    match cli.command {
        Command::Train { config, out_dir, verbose } => train(&config, out_dir, verbose, cli.seed, &cli.data_dir),
        Command::Eval { checkpoint, dataset_config, out } => evaluate(&checkpoint, &dataset_config, out, cli.seed, &cli.data_dir),
        Command::Sample { checkpoint, component, n, out } => sample(&checkpoint, &component, n, cli.seed.unwrap_or(0), &out),
        Command::Grid { checkpoint, kind, bounds, res, out } => grid(&checkpoint, kind, &bounds, res, &out),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn train(config: &Path, out_dir: Option<PathBuf>, verbose: bool, seed: Option<u64>, data_dir: &Path) -> flowmix::Result<()> {
    let echo = fs::read_to_string(config).map_err(io_err(config))?;
    let mut cfg = ExperimentConfig::from_toml(&echo)?;
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    if let Some(dir) = out_dir {
        cfg.output.dir = dir;
    }
    fs::create_dir_all(&cfg.output.dir).map_err(io_err(&cfg.output.dir))?;
    let metrics_path = cfg.output.metrics_path();
    let mut metrics = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;
    let outcome = experiment::train(&cfg, data_dir, |m, _| {
        if verbose {
            eprintln!("epoch {:>4} {:<12} elbo {:>12.5} T {:.3}", m.epoch, m.phase.as_str(), m.elbo, m.temperature);
        }
        writeln!(metrics, "{}", m.csv_row()).map_err(io_err(&metrics_path))
    })?;
    let ckpt = cfg.output.checkpoint_path();
    checkpoint::save(&ckpt, &outcome.model, &echo, outcome.history.len() as u64, Some(&outcome.rng))?;
    println!("wrote {} and {}", ckpt.display(), metrics_path.display());
    Ok(())
}

fn evaluate(ckpt: &Path, dataset_config: &Path, out: Option<PathBuf>, seed: Option<u64>, data_dir: &Path) -> flowmix::Result<()> {
    let model = checkpoint::load(ckpt)?.model;
    let mut dataset = DatasetFile::from_file(dataset_config)?;
    if let Some(s) = seed {
        dataset = dataset.with_seed(s);
    }
    let data = dataset.load(data_dir)?;
    if data.dim() != model.dim() {
        return Err(Error::Contract(format!("checkpoint has dimension {}, dataset {}", model.dim(), data.dim())));
    }
    if data.is_empty() {
        return Err(Error::Contract("evaluation dataset is empty".into()));
    }
    let report = metrics_report(&model, &data)?;
    let text = serde_json::to_string_pretty(&report).expect("plain JSON values");
    println!("{text}");
    if let Some(path) = out {
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
    }
    Ok(())
}

fn metrics_report(model: &MixtureModel, data: &flowmix::datasets::LabeledDataset) -> flowmix::Result<serde_json::Value> {
    let evidence = model.log_density(&data.points)?;
    let terms = model.elbo_values(&data.points, 1.0)?;
    let mut report = json!({
        "points": data.len(),
        "mean_log_evidence": evidence.sum() / data.len() as f64,
        "elbo": terms.mean_elbo(),
        "reconstruction": terms.mean_reconstruction(),
        "prior": terms.mean_prior(),
        "entropy": terms.mean_entropy(),
    });
    if let Some(labels) = &data.labels {
        let assigned = model.assign_cluster(&data.points)?;
        let rows = data.num_classes.max(labels.iter().max().map_or(0, |m| m + 1));
        let table = eval::contingency_sized(labels, &assigned, rows, model.num_components())?;
        report["contingency"] = json!(table.normalized);
        report["counts"] = json!(table.counts);
        match eval::cluster_accuracy(labels, &assigned) {
            Ok(m) => {
                report["cluster_accuracy"] = json!(m.accuracy);
                report["mapping"] = json!(m.mapping);
            }
            Err(Error::Unsupported(_)) => report["cluster_accuracy"] = serde_json::Value::Null,
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

fn sample(ckpt: &Path, component: &str, n: usize, seed: u64, out: &Path) -> flowmix::Result<()> {
    let model = checkpoint::load(ckpt)?.model;
    if component == "all" {
        return eval::sample_dump(&model, n, seed, out);
    }
    let k: usize = component
        .parse()
        .map_err(|_| Error::Contract(format!("component must be an index or `all`, got `{component}`")))?;
    let x = model.sample_component(k, n, seed)?;
    let d = model.dim();
    let mut text: String = (0..d).map(|j| format!("x{j},")).collect();
    text.push_str("component\n");
    for r in 0..n {
        for v in x.row(r) {
            text.push_str(&format!("{v},"));
        }
        text.push_str(&format!("{k}\n"));
    }
    fs::write(out, text).map_err(io_err(out))
}

fn parse_bounds(s: &str) -> flowmix::Result<((f64, f64), (f64, f64))> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Contract(format!("bounds `{s}` are not numbers")))?;
    match vals[..] {
        [lo, hi] => Ok(((lo, hi), (lo, hi))),
        [a, b, c, d] => Ok(((a, b), (c, d))),
        _ => Err(Error::Contract(format!("bounds `{s}` need 2 or 4 values"))),
    }
}

fn grid(ckpt: &Path, kind: GridKind, bounds: &str, res: usize, out: &Path) -> flowmix::Result<()> {
    let model = checkpoint::load(ckpt)?.model;
    let (xb, yb) = parse_bounds(bounds)?;
    match kind {
        GridKind::Density => {
            let g = eval::density_grid(&model, xb, yb, res)?;
            g.write_csv(out)?;
            eval::write_pgm(&out.with_extension("pgm"), res, res, &g.values)?;
            println!("mass {:.6}", g.mass());
        }
        GridKind::Partition => {
            let g = eval::partition_grid(&model, xb, yb, res)?;
            g.write_csv(out)?;
            eval::write_ppm(&out.with_extension("ppm"), res, res, &g.values)?;
        }
    }
    Ok(())
}
