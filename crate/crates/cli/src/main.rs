//! `nfad`: train flows and classifiers, score data, run experiment grids.
//!
//! Every command is a pure function of its configuration, input files and
//! seed. Errors are reported on stderr as a single line
//! `nfad: error[<code>]: <message>` with a nonzero exit status.

mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use config::Overrides;
use nfad_core::classifier::{write_scores_csv, MlpClassifier};
use nfad_core::dataeval::{density_grid, ingest_csv, GridBounds, GridSpace, Label, LabeledDataset, Standardizer};
use nfad_core::flows::FlowStack;
use nfad_core::modelfile::{Model, ModelFile};
use nfad_core::ndmath::RngState;
use nfad_core::pipeline::{fit_classifier, fit_flow, run_experiment, split_raw, standardize, test_auc, Method, RunConfig};
use nfad_core::tailgen::{gen_surrogates, TailSpec};

#[derive(Parser, Debug)]
#[command(name = "nfad", version, about = "Anomaly detection with flow-generated surrogate anomalies")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the train/test split as `train.csv` and `test.csv`.
    GenData,
    /// Fit the flow on training normals; writes `flow.nfad` and `flow_trace.csv`.
    TrainFlow {
        /// Training CSV (default: the configured dataset's train split).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Draw surrogate anomalies; writes `surrogates.csv` in data units.
    SampleSurrogates {
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Use an untrained (identity) flow of this dimension instead of a file.
        #[arg(long, conflicts_with = "flow")]
        identity_dim: Option<usize>,
    },
    /// Fit the classifier; writes `clf.nfad` and `clf_trace.csv`.
    TrainClf {
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score rows of a CSV; writes `scores.csv` (higher = more normal).
    Score {
        #[arg(long)]
        clf: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// ROC AUC on labeled data; writes `metrics.csv`.
    Evaluate {
        #[arg(long)]
        clf: Option<PathBuf>,
        /// Test CSV (default: the configured dataset's test split).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Flow log-density on a grid; writes `grid.csv` and `grid.pgm`.
    DensityGrid {
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        /// `xmin,xmax,ymin,ymax` in data units (default: ±4 standard deviations).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        bounds: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value_t = SpaceArg::Data)]
        space: SpaceArg,
        /// Log-density range mapped onto the grayscale heatmap.
        #[arg(long, default_value_t = 12.0)]
        span: f64,
    },
    /// Run the anomaly-count × seed grid; writes `metrics.csv` and `rows/`.
    Experiment,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SpaceArg {
    Data,
    Base,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.kind().as_str().unwrap_or("invalid command line");
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("nfad: error[usage]: {msg}: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.chain().find_map(|c| c.downcast_ref::<nfad_core::Error>()).map_or("io", |e| e.code());
            let msg = format!("{e:#}").split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("nfad: error[{code}]: {msg}");
            ExitCode::from(if code == "invalid_argument" { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.overrides.resolve()?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::TrainFlow { data } => train_flow_cmd(&cfg, data.as_deref()),
        Command::SampleSurrogates { flow, n, identity_dim } => sample_surrogates(&cfg, flow.as_deref(), n, identity_dim),
        Command::TrainClf { flow, data } => train_clf(&cfg, flow.as_deref(), data.as_deref()),
        Command::Score { clf, data } => score(&cfg, clf.as_deref(), &data),
        Command::Evaluate { clf, data } => evaluate(&cfg, clf.as_deref(), data.as_deref()),
        Command::DensityGrid { flow, resolution, bounds, space, span } => {
            grid(&cfg, flow.as_deref(), resolution, bounds.as_deref(), space, span)
        }
        Command::Experiment => experiment(&cfg),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn out_path(cfg: &RunConfig, given: Option<&Path>, default: &str) -> PathBuf {
    given.map_or_else(|| cfg.out.join(default), Path::to_path_buf)
}

fn read_csv(cfg: &RunConfig, path: &Path) -> anyhow::Result<LabeledDataset> {
    let map = nfad_core::dataeval::default_label_map();
    ingest_csv(path, &cfg.dataset.label_column, &map).with_context(|| format!("reading {}", path.display()))
}

fn train_split(cfg: &RunConfig, data: Option<&Path>) -> anyhow::Result<LabeledDataset> {
    match data {
        Some(p) => read_csv(cfg, p),
        None => Ok(split_raw(&cfg.dataset, cfg.seed)?.0),
    }
}

fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let (train, test) = split_raw(&cfg.dataset, cfg.seed)?;
    train.write_csv(create(&cfg.out.join("train.csv"))?)?;
    test.write_csv(create(&cfg.out.join("test.csv"))?)?;
    println!("train {} rows, test {} rows", train.len(), test.len());
    Ok(())
}

fn train_flow_cmd(cfg: &RunConfig, data: Option<&Path>) -> anyhow::Result<()> {
    let train = train_split(cfg, data)?;
    let normals = train.class(Label::Normal);
    let standardizer = Standardizer::fit(&normals)?;
    let (flow, trace) = fit_flow(cfg, &standardizer.transform(&normals)?, cfg.seed)?;
    let last = trace.last().expect("at least one epoch");
    ModelFile { model: Model::Flow(flow), standardizer }.save(&cfg.out.join("flow.nfad"))?;
    trace.write_csv(create(&cfg.out.join("flow_trace.csv"))?)?;
    println!("flow: nll {} l_j {}", last.nll, last.l_j);
    Ok(())
}

fn load_flow(cfg: &RunConfig, path: Option<&Path>) -> anyhow::Result<(FlowStack, Standardizer)> {
    let path = out_path(cfg, path, "flow.nfad");
    ModelFile::load_flow(&path).with_context(|| format!("loading {}", path.display()))
}

fn sample_surrogates(cfg: &RunConfig, flow: Option<&Path>, n: usize, identity_dim: Option<usize>) -> anyhow::Result<()> {
    let (flow, standardizer) = match identity_dim {
        Some(0) => bail!(nfad_core::Error::InvalidArgument("identity-dim must be >= 1".into())),
        Some(d) => (FlowStack::identity(d), Standardizer::identity(d)),
        None => load_flow(cfg, flow)?,
    };
    let tail = TailSpec::new(cfg.tail_p, flow.dim())?;
    let mut rng = RngState::new(cfg.seed).fork(50);
    let x = standardizer.inverse_transform(&gen_surrogates(&flow, &tail, n, &mut rng)?)?;
    LabeledDataset::new(x, vec![Label::Anomaly; n])?.write_csv(create(&cfg.out.join("surrogates.csv"))?)?;
    println!("{n} surrogates, tail threshold {}", tail.threshold());
    Ok(())
}

fn single_count(cfg: &RunConfig) -> anyhow::Result<usize> {
    match cfg.anomaly_counts.as_slice() {
        [c, ..] => Ok(*c),
        [] => bail!(nfad_core::Error::InvalidArgument("anomaly_counts is empty".into())),
    }
}

fn train_clf(cfg: &RunConfig, flow: Option<&Path>, data: Option<&Path>) -> anyhow::Result<()> {
    let (flow, standardizer) = load_flow(cfg, flow)?;
    let train = standardize(&standardizer, train_split(cfg, data)?)?;
    let count = single_count(cfg)?;
    let (clf, trace) = fit_classifier(cfg, &flow, &train, count, cfg.seed, Method::Nfad)?;
    ModelFile { model: Model::Classifier(clf), standardizer }.save(&cfg.out.join("clf.nfad"))?;
    trace.write_csv(create(&cfg.out.join("clf_trace.csv"))?)?;
    let last = trace.records.last().expect("at least one epoch");
    println!("classifier: {count} real anomalies, final loss {}", last.train_loss);
    Ok(())
}

fn load_clf(cfg: &RunConfig, path: Option<&Path>) -> anyhow::Result<(MlpClassifier, Standardizer)> {
    let path = out_path(cfg, path, "clf.nfad");
    ModelFile::load_classifier(&path).with_context(|| format!("loading {}", path.display()))
}

fn score(cfg: &RunConfig, clf: Option<&Path>, data: &Path) -> anyhow::Result<()> {
    let (clf, standardizer) = load_clf(cfg, clf)?;
    let ds = standardize(&standardizer, read_csv(cfg, data)?)?;
    let scores = clf.score(&ds.x)?;
    write_scores_csv(create(&cfg.out.join("scores.csv"))?, &scores)?;
    println!("scored {} rows", scores.len());
    Ok(())
}

fn evaluate(cfg: &RunConfig, clf: Option<&Path>, data: Option<&Path>) -> anyhow::Result<()> {
    let (clf, standardizer) = load_clf(cfg, clf)?;
    let test = match data {
        Some(p) => read_csv(cfg, p)?,
        None => split_raw(&cfg.dataset, cfg.seed)?.1,
    };
    let auc = test_auc(&clf, &standardize(&standardizer, test)?)?;
    let count = single_count(cfg)?;
    let mut w = create(&cfg.out.join("metrics.csv"))?;
    use std::io::Write;
    writeln!(w, "run_id,n_anomalies,seed,auc")?;
    writeln!(w, "k{count}_s{},{count},{},{auc}", cfg.seed, cfg.seed)?;
    println!("auc {auc}");
    Ok(())
}

fn grid(
    cfg: &RunConfig,
    flow: Option<&Path>,
    resolution: usize,
    bounds: Option<&[f64]>,
    space: SpaceArg,
    span: f64,
) -> anyhow::Result<()> {
    let (flow, s) = load_flow(cfg, flow)?;
    if flow.dim() != 2 {
        bail!(nfad_core::Error::InvalidArgument(format!("density-grid needs a 2-D flow, got dim {}", flow.dim())));
    }
    let raw = match bounds {
        Some(b) if b.len() != 4 => {
            bail!(nfad_core::Error::InvalidArgument("--bounds takes xmin,xmax,ymin,ymax".into()))
        }
        Some(b) => GridBounds { x_min: b[0], x_max: b[1], y_min: b[2], y_max: b[3] },
        None => GridBounds {
            x_min: s.mean[0] - 4.0 * s.std[0],
            x_max: s.mean[0] + 4.0 * s.std[0],
            y_min: s.mean[1] - 4.0 * s.std[1],
            y_max: s.mean[1] + 4.0 * s.std[1],
        },
    };
    // Standardization is an axis-aligned affine map, so cell centers map
    // onto cell centers and only a constant log-Jacobian term is added.
    let std_bounds = GridBounds {
        x_min: (raw.x_min - s.mean[0]) / s.std[0],
        x_max: (raw.x_max - s.mean[0]) / s.std[0],
        y_min: (raw.y_min - s.mean[1]) / s.std[1],
        y_max: (raw.y_max - s.mean[1]) / s.std[1],
    };
    let space = match space {
        SpaceArg::Data => GridSpace::Data,
        SpaceArg::Base => GridSpace::Base,
    };
    let mut g = density_grid(&flow, std_bounds, resolution, resolution, space)?;
    if space == GridSpace::Data {
        let shift = s.log_abs_det();
        g.logp.mapv_inplace(|v| v + shift);
    }
    g.bounds = raw;
    g.write_csv(create(&cfg.out.join("grid.csv"))?)?;
    g.write_pgm(create(&cfg.out.join("grid.pgm"))?, span)?;
    println!("grid {resolution}x{resolution}, mass {}", g.total_mass());
    Ok(())
}

fn experiment(cfg: &RunConfig) -> anyhow::Result<()> {
    let result = run_experiment(cfg, Some(&cfg.out))?;
    for a in &result.aggregates {
        println!("n_anomalies {:>4}: auc {:.4} ± {:.4} ({} runs)", a.n_anomalies, a.mean, a.std, a.runs);
    }
    let failed = result.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        println!("{failed} runs failed; see metrics.csv");
    }
    Ok(())
}
