//! Datasets, standardization, ROC AUC and density grids.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::flows::FlowStack;
use crate::ndmath::{std_normal_logpdf_unchecked, RngState};
use crate::{par, Error, Mat, Result};

/// Class label. Normal is the positive class throughout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomaly,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomaly => "anomaly",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub x: Mat,
    pub y: Vec<Label>,
    pub feature_names: Option<Vec<String>>,
}

impl LabeledDataset {
    pub fn new(x: Mat, y: Vec<Label>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", x.nrows(), y.len())));
        }
        Ok(Self { x, y, feature_names: None })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.y[i] == label).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.y.iter().filter(|&&l| l == label).count()
    }

    pub fn rows(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Feature rows of one class.
    pub fn class(&self, label: Label) -> Mat {
        self.x.select(Axis(0), &self.indices_of(label))
    }

    /// Row-wise concatenation.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::Shape("datasets differ in feature count".into()));
        }
        let x = ndarray::concatenate(Axis(0), &[self.x.view(), other.x.view()]).expect("same width");
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Ok(Self { x, y, feature_names: self.feature_names.clone() })
    }

    /// CSV with header `x0,…,x{d-1},label` (or the stored feature names).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let names: Vec<String> = match &self.feature_names {
            Some(n) => n.clone(),
            None => (0..self.dim()).map(|j| format!("x{j}")).collect(),
        };
        writeln!(w, "{},label", names.join(","))?;
        for (row, label) in self.x.rows().into_iter().zip(&self.y) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{}", cells.join(","), label.as_str())?;
        }
        Ok(())
    }
}

/// Two interleaved half circles. Moon A `(cos t, sin t)` gets `⌈n/2⌉` points
/// and is labeled normal; moon B `(1 − cos t, 0.5 − sin t)` gets `⌊n/2⌋`
/// and is labeled anomaly; `t ~ U[0, π]`, then isotropic Gaussian noise.
pub fn make_moons(n: usize, noise_sigma: f64, rng: &mut RngState) -> Result<LabeledDataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("make_moons needs n >= 2".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise must be >= 0".into()));
    }
    let n_a = n.div_ceil(2);
    let mut x = Mat::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let t = std::f64::consts::PI * rng.uniform();
        let (px, py, label) = if i < n_a {
            (t.cos(), t.sin(), Label::Normal)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), Label::Anomaly)
        };
        x[[i, 0]] = px + noise_sigma * rng.std_normal();
        x[[i, 1]] = py + noise_sigma * rng.std_normal();
        y.push(label);
    }
    LabeledDataset::new(x, y)
}

/// Isotropic Gaussian blob around `center`, all rows labeled `label`.
pub fn make_blob(n: usize, center: &[f64], sigma: f64, label: Label, rng: &mut RngState) -> Result<LabeledDataset> {
    if center.is_empty() || !(sigma >= 0.0) {
        return Err(Error::InvalidArgument("blob needs a center and sigma >= 0".into()));
    }
    let x = Array2::from_shape_fn((n, center.len()), |(_, j)| center[j] + sigma * rng.std_normal());
    LabeledDataset::new(x, vec![label; n])
}

/// Default label vocabulary: `normal`/`0` and `anomaly`/`1`.
pub fn default_label_map() -> HashMap<String, Label> {
    [("normal", Label::Normal), ("0", Label::Normal), ("anomaly", Label::Anomaly), ("1", Label::Anomaly)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

/// Read a headered CSV; every column except `label_column` must be numeric.
pub fn ingest_csv(path: &Path, label_column: &str, label_map: &HashMap<String, Label>) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path)?;
    ingest_csv_reader(file, label_column, label_map)
}

pub fn ingest_csv_reader<R: std::io::Read>(
    reader: R,
    label_column: &str,
    label_map: &HashMap<String, Label>,
) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Data(format!("reading header: {e}")))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Data(format!("label column '{label_column}' not found")))?;
    let names: Vec<String> =
        headers.iter().enumerate().filter(|(j, _)| *j != label_idx).map(|(_, h)| h.to_string()).collect();
    let d = names.len();
    let mut data = Vec::new();
    let mut y = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2; // 1-based, after the header
        let rec = rec.map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        if rec.len() != headers.len() {
            return Err(Error::Data(format!("row {row}: expected {} fields, found {}", headers.len(), rec.len())));
        }
        for (j, cell) in rec.iter().enumerate() {
            if j == label_idx {
                let label = label_map
                    .get(cell)
                    .ok_or_else(|| Error::Data(format!("row {row}: label value '{cell}' is not in the label map")))?;
                y.push(*label);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Data(format!("row {row}, column '{}': non-numeric value '{cell}'", &headers[j]))
                })?;
                if !v.is_finite() {
                    return Err(Error::Data(format!("row {row}, column '{}': non-finite value", &headers[j])));
                }
                data.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    let x = Array2::from_shape_vec((y.len(), d), data).map_err(|e| Error::Shape(e.to_string()))?;
    let mut ds = LabeledDataset::new(x, y)?;
    ds.feature_names = Some(names);
    Ok(ds)
}

/// Per-feature affine standardization `(x − mean) / std` (population std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit(x: &Mat) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Data("cannot fit a standardizer on zero rows".into()));
        }
        let mean = x.mean_axis(Axis(0)).expect("nonempty").to_vec();
        let std: Vec<f64> = x.std_axis(Axis(0), 0.0).to_vec();
        if let Some(j) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Data(format!("feature {j} has zero variance")));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &Mat) -> Result<Mat> {
        self.check(x)?;
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, x: &Mat) -> Result<Mat> {
        self.check(x)?;
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * self.std[j] + self.mean[j]);
        }
        Ok(out)
    }

    /// `ln|det|` of the transform, i.e. `−Σ ln std`.
    pub fn log_abs_det(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }

    fn check(&self, x: &Mat) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::Shape(format!("standardizer has {} features, data has {}", self.dim(), x.ncols())));
        }
        Ok(())
    }
}

/// Area under the ROC curve with normal as the positive class: the chance
/// a random normal sample scores above a random anomaly, ties counting ½.
/// Computed from mid-ranks (Mann–Whitney U).
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("roc_auc scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == Label::Normal).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("roc_auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum stays an exact integer through ties.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j, mid-rank (i + 1 + j) / 2
        let twice_mid = (i + 1 + j) as u128;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k] == Label::Normal).count() as u128;
        twice_rank_sum += twice_mid * pos_in_tie;
        i = j;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    // 2U = 2R − n_pos(n_pos + 1)
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2 * np * nn) as f64)
}

/// Fractions `(train, test)` must sum to 1; train gets `⌊n·train + 1e-9⌋`
/// rows and test the rest. Rows are shuffled first.
pub fn split(ds: &LabeledDataset, fractions: (f64, f64), rng: &mut RngState) -> Result<(LabeledDataset, LabeledDataset)> {
    let (a, b) = fractions;
    if !(a >= 0.0 && b >= 0.0) || ((a + b) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let n = ds.len();
    let n_train = ((n as f64 * a + 1e-9).floor() as usize).min(n);
    let order = rng.permutation(n);
    Ok((ds.rows(&order[..n_train]), ds.rows(&order[n_train..])))
}

/// Keep every normal row and exactly `k` randomly chosen anomalies, in
/// original row order.
pub fn subsample_anomalies(ds: &LabeledDataset, k: usize, rng: &mut RngState) -> Result<LabeledDataset> {
    let anomalies = ds.indices_of(Label::Anomaly);
    if k > anomalies.len() {
        return Err(Error::InvalidArgument(format!("asked for {k} anomalies, only {} available", anomalies.len())));
    }
    let perm = rng.permutation(anomalies.len());
    let mut keep = vec![false; ds.len()];
    for &i in ds.indices_of(Label::Normal).iter() {
        keep[i] = true;
    }
    for &p in &perm[..k] {
        keep[anomalies[p]] = true;
    }
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| keep[i]).collect();
    Ok(ds.rows(&idx))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl GridBounds {
    pub fn square(half: f64) -> Self {
        Self { x_min: -half, x_max: half, y_min: -half, y_max: half }
    }
}

/// Which density a grid shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridSpace {
    /// `log p_f(x)` of the flow at data-space points.
    Data,
    /// `log N(f⁻¹(x))`: base density of the inverse image, without the
    /// Jacobian correction. Differences from `Data` show the distortion.
    Base,
}

/// Log-density on a cell-centered regular grid; `logp[[row, col]]` is at
/// `(x_min + (col + ½)·Δx, y_min + (row + ½)·Δy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub bounds: GridBounds,
    pub nx: usize,
    pub ny: usize,
    pub logp: Array2<f64>,
}

impl DensityGrid {
    pub fn cell_width(&self) -> (f64, f64) {
        (
            (self.bounds.x_max - self.bounds.x_min) / self.nx as f64,
            (self.bounds.y_max - self.bounds.y_min) / self.ny as f64,
        )
    }

    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        let (dx, dy) = self.cell_width();
        (self.bounds.x_min + (col as f64 + 0.5) * dx, self.bounds.y_min + (row as f64 + 0.5) * dy)
    }

    /// Midpoint-rule integral of `exp(logp)`.
    pub fn total_mass(&self) -> f64 {
        let (dx, dy) = self.cell_width();
        self.logp.iter().map(|l| l.exp()).sum::<f64>() * dx * dy
    }

    /// CSV of `(x, y, logp)` triples, row-major from the lower-left cell.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,logp")?;
        for r in 0..self.ny {
            for c in 0..self.nx {
                let (x, y) = self.center(r, c);
                writeln!(w, "{x},{y},{}", self.logp[[r, c]])?;
            }
        }
        Ok(())
    }

    /// Binary PGM (P5) heatmap. The top image row is the highest `y`.
    /// `logp` is clamped to `[max − span, max]` and mapped linearly onto
    /// `0..=255`, brightest at the maximum; non-finite cells are black.
    pub fn write_pgm<W: Write>(&self, mut w: W, span: f64) -> Result<()> {
        let hi = self.logp.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        let lo = hi - span;
        write!(w, "P5\n{} {}\n255\n", self.nx, self.ny)?;
        let mut pixels = Vec::with_capacity(self.nx * self.ny);
        for r in (0..self.ny).rev() {
            for c in 0..self.nx {
                let v = self.logp[[r, c]];
                let p = if v.is_finite() && span > 0.0 {
                    (((v.clamp(lo, hi) - lo) / span) * 255.0).round() as u8
                } else {
                    0
                };
                pixels.push(p);
            }
        }
        w.write_all(&pixels)?;
        Ok(())
    }
}

/// Evaluate a 2-D flow's log-density on a grid (rows in parallel).
pub fn density_grid(stack: &FlowStack, bounds: GridBounds, nx: usize, ny: usize, space: GridSpace) -> Result<DensityGrid> {
    if stack.dim() != 2 {
        return Err(Error::InvalidArgument(format!("density grids need a 2-D flow, got dim {}", stack.dim())));
    }
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument("grid resolution must be >= 1".into()));
    }
    if !(bounds.x_max > bounds.x_min && bounds.y_max > bounds.y_min) {
        return Err(Error::InvalidArgument("empty grid bounds".into()));
    }
    let dx = (bounds.x_max - bounds.x_min) / nx as f64;
    let dy = (bounds.y_max - bounds.y_min) / ny as f64;
    let rows: Vec<usize> = (0..ny).collect();
    let per_row = par::map(&rows, |&r| -> Result<Array1<f64>> {
        let y = bounds.y_min + (r as f64 + 0.5) * dy;
        let pts = Array2::from_shape_fn((nx, 2), |(c, j)| if j == 0 { bounds.x_min + (c as f64 + 0.5) * dx } else { y });
        match space {
            GridSpace::Data => stack.log_prob(&pts),
            GridSpace::Base => {
                let (z, _) = stack.inverse(&pts)?;
                Ok(z.rows().into_iter().map(|row| std_normal_logpdf_unchecked(&row.to_vec())).collect())
            }
        }
    });
    let mut logp = Array2::zeros((ny, nx));
    for (r, row) in per_row.into_iter().enumerate() {
        logp.row_mut(r).assign(&row?);
    }
    Ok(DensityGrid { bounds, nx, ny, logp })
}
