//! Ridge-regression linear probes over last-token activations.
//!
//! A probe is `score(h) = w·h + b`, fit by minimising
//!
//! ```text
//! (1/n) Σ (y_i - w·x_i - b)^2 + λ ||w||^2
//! ```
//!
//! with the bias left unregularized. The minimiser is computed in closed
//! form: centre X and y, solve `(XcᵀXc + nλI) w = Xcᵀyc` by Cholesky, then
//! `b = ȳ - w·x̄`. Because the data term is a mean, the normal equations
//! carry `n·λ`, which keeps λ comparable across dataset sizes. All solver
//! arithmetic is f64 regardless of the f32 storage in `.actv` files.
//!
//! Scores are raw regression outputs (no sigmoid); labels are 0/1, so the
//! default decision threshold is 0.5.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actv::{ActivationReader, ActvError, Kind};
use crate::dataprep::{stratified_split_indices, DataError};
use crate::Label;

pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TRAIN_FRAC: f64 = 0.8;

/// Pivot-to-diagonal ratio below which the normal matrix counts as singular.
const SINGULAR_RATIO: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("normal equations are singular (λ = 0 on rank-deficient data)")]
    SingularSystem,
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("lambda_ridge must be finite and >= 0, got {0}")]
    InvalidLambda(f64),
    #[error("expected a LAST_TOKEN activation file, got {0:?}")]
    WrongFileKind(Kind),
    #[error(transparent)]
    Actv(#[from] ActvError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("probe file: {0}")]
    BadProbeFile(String),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

/// A trained linear probe. Serialized as
/// `{model_id, layer_index, lambda_ridge, d, b, w, trained_on}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProbeFile", into = "ProbeFile")]
pub struct ProbeWeights {
    pub w: Vec<f64>,
    pub b: f64,
    pub layer_index: usize,
    pub lambda_ridge: f64,
    pub model_id: String,
    /// Fingerprint of the training set.
    pub trained_on: String,
}

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    model_id: String,
    layer_index: usize,
    lambda_ridge: f64,
    d: usize,
    b: f64,
    w: Vec<f64>,
    trained_on: String,
}

impl TryFrom<ProbeFile> for ProbeWeights {
    type Error = String;

    fn try_from(f: ProbeFile) -> std::result::Result<Self, String> {
        if f.w.len() != f.d {
            return Err(format!("d = {} but w has {} entries", f.d, f.w.len()));
        }
        if !f.b.is_finite() || f.w.iter().any(|v| !v.is_finite()) {
            return Err("non-finite weights".into());
        }
        Ok(ProbeWeights {
            w: f.w,
            b: f.b,
            layer_index: f.layer_index,
            lambda_ridge: f.lambda_ridge,
            model_id: f.model_id,
            trained_on: f.trained_on,
        })
    }
}

impl From<ProbeWeights> for ProbeFile {
    fn from(p: ProbeWeights) -> Self {
        ProbeFile {
            model_id: p.model_id,
            layer_index: p.layer_index,
            lambda_ridge: p.lambda_ridge,
            d: p.w.len(),
            b: p.b,
            w: p.w,
            trained_on: p.trained_on,
        }
    }
}

impl ProbeWeights {
    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// `w·h + b` for a single f32 activation row.
    pub fn score_f32(&self, h: &[f32]) -> f64 {
        self.w.iter().zip(h).map(|(w, x)| w * f64::from(*x)).sum::<f64>() + self.b
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| ProbeError::BadProbeFile(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    /// With λ = 0 and a rank-deficient design, return the minimum-norm
    /// least-squares solution instead of failing.
    pub min_norm_fallback: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            min_norm_fallback: true,
        }
    }
}

fn check_inputs(x: &DMatrix<f64>, y: &[Label], lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(ProbeError::InvalidLambda(lambda));
    }
    if x.nrows() != y.len() {
        return Err(ProbeError::DimensionMismatch(format!(
            "{} rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() < 2 {
        return Err(ProbeError::DegenerateLabels("need at least 2 samples".into()));
    }
    if !y.contains(&Label::Ad) || !y.contains(&Label::Control) {
        return Err(ProbeError::DegenerateLabels("both classes must be present".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFiniteInput);
    }
    Ok(())
}

pub fn train_probe(x: &DMatrix<f64>, y: &[Label], lambda_ridge: f64) -> Result<ProbeWeights> {
    train_probe_with(x, y, lambda_ridge, TrainOptions::default())
}

pub fn train_probe_with(x: &DMatrix<f64>, y: &[Label], lambda_ridge: f64, opts: TrainOptions) -> Result<ProbeWeights> {
    check_inputs(x, y, lambda_ridge)?;
    let n = x.nrows();
    let nf = n as f64;

    let x_mean: DVector<f64> = x.row_mean().transpose();
    let y_vec = DVector::from_iterator(n, y.iter().map(|l| l.as_f64()));
    let y_mean = y_vec.mean();

    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= x_mean.transpose();
    }
    let yc = y_vec.add_scalar(-y_mean);

    // Zero-variance columns are unidentifiable; their weight is exactly 0
    // (the minimum-norm and the ridge answer agree), so solve without them.
    let active: Vec<usize> = (0..xc.ncols())
        .filter(|&j| xc.column(j).iter().any(|v| *v != 0.0))
        .collect();
    let xa = xc.select_columns(&active);

    let mut a = xa.tr_mul(&xa);
    let reg = nf * lambda_ridge;
    for i in 0..a.nrows() {
        a[(i, i)] += reg;
    }
    let rhs = xa.tr_mul(&yc);

    let wa = if active.is_empty() {
        Some(DVector::zeros(0))
    } else {
        solve_spd(&a, &rhs).or_else(|| {
            opts.min_norm_fallback.then(|| {
                let svd = a.clone().svd(true, true);
                let eps = SINGULAR_RATIO * svd.singular_values.max();
                svd.solve(&rhs, eps).expect("svd computed with u and v")
            })
        })
    };
    let wa = wa.ok_or(ProbeError::SingularSystem)?;
    if wa.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFiniteInput);
    }
    let mut w = DVector::zeros(x.ncols());
    for (k, &j) in active.iter().enumerate() {
        w[j] = wa[k];
    }
    let b = y_mean - w.dot(&x_mean);

    Ok(ProbeWeights {
        w: w.iter().copied().collect(),
        b,
        layer_index: 0,
        lambda_ridge,
        model_id: String::new(),
        trained_on: String::new(),
    })
}

/// Cholesky solve; `None` if the matrix is not numerically positive definite.
fn solve_spd(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let max_diag = a.diagonal().max();
    if max_diag <= 0.0 {
        return None;
    }
    let chol = a.clone().cholesky()?;
    let l = chol.l_dirty();
    let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot <= SINGULAR_RATIO * max_diag {
        return None;
    }
    Some(chol.solve(rhs))
}

pub fn predict(p: &ProbeWeights, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.ncols() != p.dim() {
        return Err(ProbeError::DimensionMismatch(format!(
            "probe has d = {}, data has {} columns",
            p.dim(),
            x.ncols()
        )));
    }
    let w = DVector::from_column_slice(&p.w);
    Ok((x * w).iter().map(|s| s + p.b).collect())
}

/// Value of the training objective: MSE term plus `λ ||w||²`.
pub fn objective(p: &ProbeWeights, x: &DMatrix<f64>, y: &[Label]) -> Result<(f64, f64)> {
    let scores = predict(p, x)?;
    let mse = mean_squared_error(&scores, y);
    let ridge = p.w.iter().map(|v| v * v).sum::<f64>();
    Ok((mse, p.lambda_ridge * ridge))
}

fn mean_squared_error(scores: &[f64], y: &[Label]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores
        .iter()
        .zip(y)
        .map(|(s, l)| (l.as_f64() - s).powi(2))
        .sum::<f64>()
        / scores.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_scores(scores: &[f64], y: &[Label], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (s, l) in scores.iter().zip(y) {
            match (*s >= threshold, *l) {
                (true, Label::Ad) => c.tp += 1,
                (true, Label::Control) => c.fp += 1,
                (false, Label::Control) => c.tn += 1,
                (false, Label::Ad) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mse: f64,
    pub n_eval: usize,
    pub threshold: f64,
    pub confusion: Confusion,
}

impl ProbeMetrics {
    pub fn from_confusion(c: Confusion, mse: f64, threshold: f64) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ProbeMetrics {
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            recall,
            f1,
            mse,
            n_eval: c.total(),
            threshold,
            confusion: c,
        }
    }
}

/// Classification metrics with AD as the positive class; a sample is
/// predicted AD iff its raw score is `>= threshold`.
pub fn evaluate(p: &ProbeWeights, x: &DMatrix<f64>, y: &[Label], threshold: f64) -> Result<ProbeMetrics> {
    if x.nrows() != y.len() {
        return Err(ProbeError::DimensionMismatch(format!(
            "{} rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    let scores = predict(p, x)?;
    Ok(metrics_from_scores(&scores, y, threshold))
}

pub fn metrics_from_scores(scores: &[f64], y: &[Label], threshold: f64) -> ProbeMetrics {
    let c = Confusion::from_scores(scores, y, threshold);
    ProbeMetrics::from_confusion(c, mean_squared_error(scores, y), threshold)
}

/// FNV-1a over the given ids, used as a training-set fingerprint.
pub fn fingerprint<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for id in ids {
        for b in id.bytes().chain(std::iter::once(0)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("fnv1a:{h:016x}")
}

/// Labeled LAST_TOKEN samples loaded from an activation file.
#[derive(Debug, Clone)]
pub struct LastTokenSet {
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub sample_ids: Vec<String>,
    pub labels: Vec<Label>,
    /// Per sample, `num_layers * hidden_dim` values.
    acts: Vec<Vec<f32>>,
    /// Records skipped for having no label.
    pub unlabeled: usize,
}

impl LastTokenSet {
    pub fn load<R: std::io::Read>(reader: ActivationReader<R>) -> Result<Self> {
        let h = reader.header().clone();
        if h.kind != Kind::LastToken {
            return Err(ProbeError::WrongFileKind(h.kind));
        }
        let mut set = LastTokenSet {
            model_id: h.model_id,
            num_layers: h.num_layers,
            hidden_dim: h.hidden_dim,
            sample_ids: Vec::new(),
            labels: Vec::new(),
            acts: Vec::new(),
            unlabeled: 0,
        };
        for rec in reader {
            let rec = rec?;
            match rec.label {
                Some(l) => {
                    set.sample_ids.push(rec.sample_id);
                    set.labels.push(l);
                    set.acts.push(rec.activations);
                }
                None => set.unlabeled += 1,
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// f64 design matrix of `layer` for the given sample indices.
    pub fn design(&self, layer: usize, idx: &[usize]) -> DMatrix<f64> {
        let d = self.hidden_dim;
        DMatrix::from_row_iterator(
            idx.len(),
            d,
            idx.iter()
                .flat_map(|&i| self.acts[i][layer * d..(layer + 1) * d].iter().map(|v| f64::from(*v))),
        )
    }

    pub fn labels_at(&self, idx: &[usize]) -> Vec<Label> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Trains a probe on `layer` over the given samples and stamps metadata.
    pub fn train(&self, layer: usize, idx: &[usize], lambda_ridge: f64) -> Result<ProbeWeights> {
        if layer >= self.num_layers {
            return Err(ProbeError::DimensionMismatch(format!(
                "layer {layer} out of range for {} layers",
                self.num_layers
            )));
        }
        let mut p = train_probe(&self.design(layer, idx), &self.labels_at(idx), lambda_ridge)?;
        p.layer_index = layer;
        p.model_id = self.model_id.clone();
        p.trained_on = fingerprint(idx.iter().map(|&i| self.sample_ids[i].as_str()));
        Ok(p)
    }

    pub fn split(&self, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        Ok(stratified_split_indices(&self.labels, train_frac, seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub layer_index: usize,
    pub metrics: ProbeMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub layers: Vec<LayerResult>,
    pub selected_layer: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub unlabeled_skipped: usize,
    pub lambda_ridge: f64,
    pub seed: u64,
    pub train_frac: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepConfig {
    pub lambda_ridge: f64,
    pub seed: u64,
    pub train_frac: f64,
    pub threshold: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambda_ridge: DEFAULT_LAMBDA,
            seed: 0,
            train_frac: DEFAULT_TRAIN_FRAC,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Best layer by held-out F1, then accuracy, then lower index.
pub fn select_layer(layers: &[LayerResult]) -> Option<usize> {
    layers
        .iter()
        .min_by(|a, b| {
            b.metrics
                .f1
                .total_cmp(&a.metrics.f1)
                .then(b.metrics.accuracy.total_cmp(&a.metrics.accuracy))
                .then(a.layer_index.cmp(&b.layer_index))
        })
        .map(|r| r.layer_index)
}

/// Trains one probe per layer on the same stratified train split and scores
/// each on the same held-out split.
pub fn layer_sweep(set: &LastTokenSet, cfg: SweepConfig) -> Result<SweepResult> {
    let (train, eval) = set.split(cfg.train_frac, cfg.seed)?;
    for (name, idx) in [("train", &train), ("eval", &eval)] {
        let labels = set.labels_at(idx);
        if !labels.contains(&Label::Ad) || !labels.contains(&Label::Control) {
            return Err(ProbeError::DegenerateLabels(format!(
                "{name} split lacks one of the classes"
            )));
        }
    }
    let y_eval = set.labels_at(&eval);

    let layers = (0..set.num_layers)
        .into_par_iter()
        .map(|layer| {
            let p = set.train(layer, &train, cfg.lambda_ridge)?;
            let metrics = evaluate(&p, &set.design(layer, &eval), &y_eval, cfg.threshold)?;
            Ok(LayerResult {
                layer_index: layer,
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SweepResult {
        selected_layer: select_layer(&layers).expect("num_layers >= 1"),
        layers,
        n_train: train.len(),
        n_eval: eval.len(),
        unlabeled_skipped: set.unlabeled,
        lambda_ridge: cfg.lambda_ridge,
        seed: cfg.seed,
        train_frac: cfg.train_frac,
    })
}
