//! End-to-end runs: data preparation, flow fitting, classifier fitting and
//! the anomaly-count × seed experiment grid.
//!
//! The flow only ever sees normal training data, so one flow per seed is
//! shared by every anomaly count in the grid.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{train_classifier, ClfData, ClfTrace, ClfTrainConfig, MlpClassifier};
use crate::dataeval::{
    default_label_map, ingest_csv, make_blob, make_moons, roc_auc, split, subsample_anomalies, Label, LabeledDataset,
    Standardizer,
};
use crate::flows::{FlowSpec, FlowStack};
use crate::ndmath::RngState;
use crate::nftrain::{train_flow, NfTrainConfig, TrainTrace};
use crate::tailgen::TailSpec;
use crate::{par, Error, Mat, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Moons,
    Csv,
}

/// Extra anomalies that only appear in the test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NovelBlob {
    pub n: usize,
    pub center: Vec<f64>,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Total moons samples (both moons).
    pub n: usize,
    pub noise: f64,
    pub csv: Option<PathBuf>,
    pub label_column: String,
    pub test_fraction: f64,
    pub novel_blob: Option<NovelBlob>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Moons,
            n: 2000,
            noise: 0.1,
            csv: None,
            label_column: "label".into(),
            test_fraction: 0.3,
            novel_blob: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub flow: FlowSpec,
    pub nf: NfTrainConfig,
    pub tail_p: f64,
    pub clf: ClfTrainConfig,
    pub anomaly_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            flow: FlowSpec::default(),
            nf: NfTrainConfig::default(),
            tail_p: 0.05,
            clf: ClfTrainConfig::default(),
            anomaly_counts: vec![0, 5, 20, 100],
            seeds: vec![0, 1, 2, 3, 4],
            seed: 0,
            out: PathBuf::from("nfad-out"),
        }
    }
}

impl RunConfig {
    /// Check every key and report all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        let mut sub = |prefix: &str, r: Result<()>| {
            if let Err(e) = r {
                bad.push(format!("{prefix}: {e}"));
            }
        };
        sub("nf", self.nf.validate());
        sub("clf", self.clf.validate());
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Moons => {
                if d.n < 2 {
                    bad.push("dataset.n must be >= 2".into());
                }
                if !(d.noise >= 0.0) {
                    bad.push("dataset.noise must be >= 0".into());
                }
            }
            DatasetKind::Csv => match &d.csv {
                None => bad.push("dataset.csv is required for kind = \"csv\"".into()),
                Some(p) if !p.exists() => bad.push(format!("dataset.csv: {} does not exist", p.display())),
                _ => {}
            },
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            bad.push("dataset.test_fraction must be in (0, 1)".into());
        }
        if !(self.tail_p > 0.0 && self.tail_p <= 1.0) {
            bad.push("tail_p must be in (0, 1]".into());
        }
        if self.flow.layers == 0 {
            bad.push("flow.layers must be >= 1".into());
        }
        if self.seeds.is_empty() {
            bad.push("seeds must not be empty".into());
        }
        if self.anomaly_counts.is_empty() {
            bad.push("anomaly_counts must not be empty".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(bad.join("; ")))
        }
    }
}

/// Raw dataset for the configured source. Moons data depends on `seed`.
pub fn load_dataset(cfg: &DatasetConfig, seed: u64) -> Result<LabeledDataset> {
    match cfg.kind {
        DatasetKind::Moons => make_moons(cfg.n, cfg.noise, &mut RngState::new(seed).fork(10)),
        DatasetKind::Csv => {
            let path = cfg.csv.as_ref().ok_or_else(|| Error::InvalidArgument("dataset.csv is not set".into()))?;
            ingest_csv(path, &cfg.label_column, &default_label_map())
        }
    }
}

/// Standardized train/test split for one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub standardizer: Standardizer,
}

impl Prepared {
    pub fn train_normals(&self) -> Mat {
        self.train.class(Label::Normal)
    }
}

/// Unstandardized train/test split for one seed; the novel blob, if any,
/// is appended to the test set.
pub fn split_raw(cfg: &DatasetConfig, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let raw = load_dataset(cfg, seed)?;
    let root = RngState::new(seed);
    let (train, mut test) = split(&raw, (1.0 - cfg.test_fraction, cfg.test_fraction), &mut root.fork(11))?;
    if train.count(Label::Normal) < 2 {
        return Err(Error::Data("training split has fewer than 2 normal samples".into()));
    }
    if let Some(b) = &cfg.novel_blob {
        if b.center.len() != raw.dim() {
            return Err(Error::Shape("novel_blob.center must match the feature count".into()));
        }
        let blob = make_blob(b.n, &b.center, b.sigma, Label::Anomaly, &mut root.fork(12))?;
        test = test.concat(&blob)?;
    }
    Ok((train, test))
}

/// Apply `standardizer` to the features of `ds`.
pub fn standardize(standardizer: &Standardizer, ds: LabeledDataset) -> Result<LabeledDataset> {
    Ok(LabeledDataset { x: standardizer.transform(&ds.x)?, ..ds })
}

/// [`split_raw`], then standardize both parts with statistics of the
/// training normals.
pub fn prepare(cfg: &DatasetConfig, seed: u64) -> Result<Prepared> {
    let (train, test) = split_raw(cfg, seed)?;
    let standardizer = Standardizer::fit(&train.class(Label::Normal))?;
    Ok(Prepared { train: standardize(&standardizer, train)?, test: standardize(&standardizer, test)?, standardizer })
}

fn derived_seed(seed: u64, stream: u64) -> u64 {
    RngState::new(seed).fork(stream).next_u64()
}

/// Fit the flow on standardized training normals.
pub fn fit_flow(cfg: &RunConfig, normals: &Mat, seed: u64) -> Result<(FlowStack, TrainTrace)> {
    let stack = cfg.flow.build(normals.ncols(), &mut RngState::new(derived_seed(seed, 30)))?;
    let nf = NfTrainConfig { seed: derived_seed(seed, 31), ..cfg.nf.clone() };
    train_flow(normals, stack, &nf)
}

/// Whether surrogate anomalies take part in classifier training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Nfad,
    /// Same classifier, real anomalies only.
    TwoClass,
}

/// Train the classifier on the standardized training set `train`, keeping
/// every normal and `count` of its anomalies.
pub fn fit_classifier(
    cfg: &RunConfig,
    flow: &FlowStack,
    train: &LabeledDataset,
    count: usize,
    seed: u64,
    method: Method,
) -> Result<(MlpClassifier, ClfTrace)> {
    let mut sub_rng = RngState::new(seed).fork(20).fork(count as u64);
    let train = subsample_anomalies(train, count, &mut sub_rng)?;
    let normals = train.class(Label::Normal);
    let anomalies = train.class(Label::Anomaly);
    let tail = TailSpec::new(cfg.tail_p, flow.dim())?;
    let mut clf_cfg = ClfTrainConfig { seed: derived_seed(seed, 40), ..cfg.clf.clone() };
    if method == Method::TwoClass {
        clf_cfg.surrogates_per_batch = 0;
    }
    train_classifier(flow, ClfData { normals: &normals, anomalies: &anomalies }, None, &tail, &clf_cfg)
}

/// ROC AUC of the classifier's logits, normal as the positive class.
pub fn test_auc(clf: &MlpClassifier, test: &LabeledDataset) -> Result<f64> {
    roc_auc(&clf.logits(&test.x)?, &test.y)
}

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: String,
    pub n_anomalies: usize,
    pub seed: u64,
    pub auc: Option<f64>,
    pub error: Option<String>,
}

impl RunRow {
    fn id(count: usize, seed: u64) -> String {
        format!("k{count}_s{seed}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub n_anomalies: usize,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentResult {
    pub fn aggregate(&self, count: usize) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.n_anomalies == count)
    }

    /// CSV `run_id,n_anomalies,seed,auc,error`, then `mean` and `std` rows
    /// per anomaly count (seed left empty).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "run_id,n_anomalies,seed,auc,error")?;
        for r in &self.rows {
            let auc = r.auc.map(|v| v.to_string()).unwrap_or_default();
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
            writeln!(w, "{},{},{},{auc},{err}", r.run_id, r.n_anomalies, r.seed)?;
        }
        for a in &self.aggregates {
            writeln!(w, "mean,{},,{},", a.n_anomalies, a.mean)?;
            writeln!(w, "std,{},,{},", a.n_anomalies, a.std)?;
        }
        Ok(())
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn aggregate(rows: &[RunRow], counts: &[usize]) -> Vec<Aggregate> {
    counts
        .iter()
        .filter_map(|&c| {
            let aucs: Vec<f64> = rows.iter().filter(|r| r.n_anomalies == c).filter_map(|r| r.auc).collect();
            if aucs.is_empty() {
                return None;
            }
            let (mean, std) = mean_std(&aucs);
            Some(Aggregate { n_anomalies: c, mean, std, runs: aucs.len() })
        })
        .collect()
}

fn row_path(dir: &Path, count: usize, seed: u64) -> PathBuf {
    dir.join("rows").join(format!("{}.json", RunRow::id(count, seed)))
}

/// A saved row counts as done only if it parses and matches its slot.
fn load_row(dir: &Path, count: usize, seed: u64) -> Option<RunRow> {
    let text = std::fs::read_to_string(row_path(dir, count, seed)).ok()?;
    let row: RunRow = serde_json::from_str(&text).ok()?;
    let valid = row.n_anomalies == count
        && row.seed == seed
        && row.error.is_none()
        && row.auc.is_some_and(|a| (0.0..=1.0).contains(&a));
    valid.then_some(row)
}

fn run_seed(cfg: &RunConfig, seed: u64, counts: &[usize]) -> Vec<RunRow> {
    let fail = |count: usize, e: &Error| RunRow {
        run_id: RunRow::id(count, seed),
        n_anomalies: count,
        seed,
        auc: None,
        error: Some(format!("{}: {e}", e.code())),
    };
    let setup = prepare(&cfg.dataset, seed).and_then(|p| fit_flow(cfg, &p.train_normals(), seed).map(|(f, _)| (p, f)));
    let (prepared, flow) = match setup {
        Ok(v) => v,
        Err(e) => return counts.iter().map(|&c| fail(c, &e)).collect(),
    };
    counts
        .iter()
        .map(|&c| match fit_classifier(cfg, &flow, &prepared.train, c, seed, Method::Nfad)
            .and_then(|(clf, _)| test_auc(&clf, &prepared.test))
        {
            Ok(auc) => RunRow { run_id: RunRow::id(c, seed), n_anomalies: c, seed, auc: Some(auc), error: None },
            Err(e) => fail(c, &e),
        })
        .collect()
}

/// Run the full (count × seed) grid, in parallel over seeds.
///
/// With `out_dir`, each finished row is stored under `rows/` and rows that
/// already exist and validate are skipped on a rerun; `metrics.csv` and the
/// effective `config.json` are written at the end. A rerun with a different
/// configuration in the same directory is refused. The stored config omits
/// `out`, so a results directory can be moved and still resumed.
pub fn run_experiment(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<ExperimentResult> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("rows"))?;
        let cfg_path = dir.join("config.json");
        let stored = RunConfig { out: PathBuf::new(), ..cfg.clone() };
        let json = serde_json::to_string_pretty(&stored).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        match std::fs::read_to_string(&cfg_path) {
            Ok(existing) if existing != json => {
                return Err(Error::InvalidArgument(format!(
                    "{} holds results of a different configuration",
                    dir.display()
                )))
            }
            Ok(_) => {}
            Err(_) => std::fs::write(&cfg_path, &json)?,
        }
    }
    let per_seed = par::map(&cfg.seeds, |&seed| -> Result<Vec<RunRow>> {
        let done: Vec<Option<RunRow>> =
            cfg.anomaly_counts.iter().map(|&c| out_dir.and_then(|d| load_row(d, c, seed))).collect();
        let todo: Vec<usize> =
            cfg.anomaly_counts.iter().zip(&done).filter(|(_, r)| r.is_none()).map(|(&c, _)| c).collect();
        let mut fresh = if todo.is_empty() { Vec::new() } else { run_seed(cfg, seed, &todo) }.into_iter();
        let mut rows = Vec::with_capacity(done.len());
        for d in done {
            let row = match d {
                Some(r) => r,
                None => {
                    let r = fresh.next().expect("one fresh row per missing slot");
                    if let Some(dir) = out_dir {
                        let json = serde_json::to_string(&r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                        std::fs::write(row_path(dir, r.n_anomalies, seed), json)?;
                    }
                    r
                }
            };
            rows.push(row);
        }
        Ok(rows)
    });
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    rows.sort_by_key(|r| (r.n_anomalies, r.seed));
    let result = ExperimentResult { aggregates: aggregate(&rows, &cfg.anomaly_counts), rows };
    if let Some(dir) = out_dir {
        result.write_csv(std::fs::File::create(dir.join("metrics.csv"))?)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::CouplingKind;

    fn tiny() -> RunConfig {
        RunConfig {
            dataset: DatasetConfig { n: 200, ..Default::default() },
            flow: FlowSpec { kind: CouplingKind::Affine, layers: 2, hidden: vec![8], ..Default::default() },
            nf: NfTrainConfig { epochs: 3, ..Default::default() },
            clf: ClfTrainConfig { epochs: 2, ..Default::default() },
            anomaly_counts: vec![0, 5],
            seeds: vec![1, 2],
            ..Default::default()
        }
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = RunConfig {
            tail_p: 0.0,
            seeds: vec![],
            nf: NfTrainConfig { epochs: 0, ..Default::default() },
            dataset: DatasetConfig { kind: DatasetKind::Csv, ..Default::default() },
            ..Default::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        for key in ["tail_p", "seeds", "nf:", "dataset.csv"] {
            assert!(msg.contains(key), "{key} missing from {msg}");
        }
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn prepare_standardizes_on_train_normals() {
        let cfg = DatasetConfig {
            novel_blob: Some(NovelBlob { n: 10, center: vec![0.0, 2.5], sigma: 0.1 }),
            ..Default::default()
        };
        let p = prepare(&cfg, 3).unwrap();
        assert_eq!(p.train.len(), 1400);
        assert_eq!(p.test.len(), 610);
        let n = p.train_normals();
        for col in n.columns() {
            assert!(col.mean().unwrap().abs() < 1e-10);
            assert!((col.std(0.0) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn grid_shape_resume_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let a = run_experiment(&cfg, Some(dir.path())).unwrap();
        assert_eq!(a.rows.len(), 4);
        assert_eq!(a.aggregates.len(), 2);
        assert!(a.rows.iter().all(|r| r.auc.is_some()));
        let first = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        let text = String::from_utf8(first.clone()).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 + 4);

        // a corrupted row is recomputed, the rest are reused
        std::fs::write(row_path(dir.path(), 5, 2), "garbage").unwrap();
        let b = run_experiment(&cfg, Some(dir.path())).unwrap();
        assert_eq!(a, b);
        assert_eq!(std::fs::read(dir.path().join("metrics.csv")).unwrap(), first);

        let other = RunConfig { tail_p: 0.2, ..cfg.clone() };
        assert!(run_experiment(&other, Some(dir.path())).is_err());
        let moved = RunConfig { out: "elsewhere".into(), ..cfg.clone() };
        assert_eq!(run_experiment(&moved, Some(dir.path())).unwrap(), a);

        // infeasible count is recorded per row, the run continues
        let cfg = RunConfig { anomaly_counts: vec![0, 10_000], ..tiny() };
        let r = run_experiment(&cfg, None).unwrap();
        assert!(r.rows.iter().filter(|r| r.n_anomalies == 10_000).all(|r| r.error.is_some()));
        assert!(r.rows.iter().filter(|r| r.n_anomalies == 0).all(|r| r.auc.is_some()));
        assert!(r.aggregate(10_000).is_none());
    }
}
