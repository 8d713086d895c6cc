//! Reference SFT loss objectives with exact gradients.
//!
//! Every classification loss takes raw logits and applies a max-shifted
//! softmax internally; gradients are w.r.t. the logits. The pairwise
//! contrastive loss differentiates w.r.t. the concatenation `[x1; x2]`.
//! All arithmetic is f64.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("point is on or next to a non-differentiable set: {0}")]
    DomainViolation(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Loss hyperparameters. Defaults follow the fine-tuning setup: ε = 0.1,
/// γ = 2.0, focal α = 0.25, contrastive α = 0.1, margin 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub num_classes: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub focal_alpha: f64,
    pub contrastive_alpha: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            num_classes: 2,
            epsilon: 0.1,
            gamma: 2.0,
            focal_alpha: 0.25,
            contrastive_alpha: 0.1,
            margin: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LossError::InvalidConfig(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must be in [0, 1]");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be >= 0");
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return bad("focal_alpha must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.contrastive_alpha) {
            return bad("contrastive_alpha must be in [0, 1]");
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("margin must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFiniteInput)
    }
}

fn check_class(logits: &[f64], true_class: usize) -> Result<()> {
    if true_class >= logits.len() {
        return Err(LossError::IndexOutOfRange {
            index: true_class,
            classes: logits.len(),
        });
    }
    Ok(())
}

/// Returns (max, log Σ exp(z - max)).
fn shifted_lse(logits: &[f64]) -> (f64, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    (max, sum.ln())
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(LossError::EmptyInput);
    }
    check_finite(logits)?;
    let (max, lse) = shifted_lse(logits);
    Ok(logits.iter().map(|z| (z - max - lse).exp()).collect())
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let (max, lse) = shifted_lse(logits);
    logits[i] - max - lse
}

/// Cross-entropy against a one-hot target.
pub fn ce_loss(logits: &[f64], true_class: usize) -> Result<LossResult> {
    check_class(logits, true_class)?;
    let p = softmax(logits)?;
    let mut grad = p;
    grad[true_class] -= 1.0;
    Ok(LossResult {
        value: -log_softmax_at(logits, true_class),
        grad,
    })
}

/// `1 - ε` on the true class, `ε / (C - 1)` elsewhere.
pub fn label_smooth_targets(true_class: usize, cfg: &LossConfig) -> Result<Vec<f64>> {
    let c = cfg.num_classes;
    if c < 2 {
        return Err(LossError::InvalidConfig("num_classes must be >= 2".into()));
    }
    if true_class >= c {
        return Err(LossError::IndexOutOfRange {
            index: true_class,
            classes: c,
        });
    }
    if !(0.0..=1.0).contains(&cfg.epsilon) {
        return Err(LossError::InvalidConfig("epsilon must be in [0, 1]".into()));
    }
    let off = cfg.epsilon / (c - 1) as f64;
    let mut y = vec![off; c];
    y[true_class] = 1.0 - cfg.epsilon;
    Ok(y)
}

fn check_num_classes(logits: &[f64], cfg: &LossConfig) -> Result<()> {
    if logits.len() != cfg.num_classes {
        return Err(LossError::DimensionMismatch(format!(
            "{} logits for {} classes",
            logits.len(),
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Cross-entropy against label-smoothed targets.
pub fn ls_loss(logits: &[f64], true_class: usize, cfg: &LossConfig) -> Result<LossResult> {
    check_num_classes(logits, cfg)?;
    let targets = label_smooth_targets(true_class, cfg)?;
    check_finite(logits)?;
    let (max, lse) = shifted_lse(logits);
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (z, y) in logits.iter().zip(&targets) {
        let log_p = z - max - lse;
        if *y != 0.0 {
            value -= y * log_p;
        }
        grad.push(log_p.exp() - y);
    }
    Ok(LossResult { value, grad })
}

/// α-balanced focal loss `-α (1 - p_t)^γ log p_t`.
///
/// The α prefactor scales the whole true-class term (the unweighted form is
/// recovered with `focal_alpha = 1`).
pub fn focal_loss(logits: &[f64], true_class: usize, cfg: &LossConfig) -> Result<LossResult> {
    check_class(logits, true_class)?;
    if cfg.gamma.is_nan() || cfg.gamma < 0.0 {
        return Err(LossError::InvalidConfig("gamma must be >= 0".into()));
    }
    let p = softmax(logits)?;
    let log_pt = log_softmax_at(logits, true_class);
    let pt = p[true_class];
    // 1 - p_t summed from the other classes, accurate when p_t ≈ 1.
    let q: f64 = p
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != true_class)
        .map(|(_, v)| v)
        .sum();
    let (a, g) = (cfg.focal_alpha, cfg.gamma);

    let mod_factor = q.powf(g);
    let value = -a * mod_factor * log_pt;

    // dL/dp_t * p_t = -a [ (1-p)^γ - γ (1-p)^(γ-1) p log p ]
    let slope = if q == 0.0 {
        // p_t == 1: the γ-term vanishes for γ > 0 (p log p → 0 faster).
        -a * mod_factor
    } else {
        -a * (mod_factor - g * q.powf(g - 1.0) * pt * log_pt)
    };
    // dp_t/dz_j = p_t (δ_tj - p_j)
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, pj)| slope * (f64::from(u8::from(j == true_class)) - pj))
        .collect();
    Ok(LossResult { value, grad })
}

/// `(1 - y)·D² + y·max(0, m - D)²` with `D = ||x1 - x2||`. `y = 0` for a
/// same-class pair, 1 for different classes. At `D = 0` with `y = 1` the
/// gradient is taken as 0.
pub fn contrastive_pair_loss(x1: &[f64], x2: &[f64], y: u8, cfg: &LossConfig) -> Result<LossResult> {
    if x1.len() != x2.len() {
        return Err(LossError::DimensionMismatch(format!(
            "x1 has {} entries, x2 has {}",
            x1.len(),
            x2.len()
        )));
    }
    if y > 1 {
        return Err(LossError::InvalidConfig(format!("pair label must be 0 or 1, got {y}")));
    }
    check_finite(x1)?;
    check_finite(x2)?;
    let diff: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| a - b).collect();
    let d2: f64 = diff.iter().map(|v| v * v).sum();
    let dist = d2.sqrt();
    let k = x1.len();
    let mut grad = vec![0.0; 2 * k];

    let value = if y == 0 {
        for (i, di) in diff.iter().enumerate() {
            grad[i] = 2.0 * di;
            grad[k + i] = -2.0 * di;
        }
        d2
    } else {
        let gap = cfg.margin - dist;
        if gap > 0.0 && dist > 0.0 {
            let s = -2.0 * gap / dist;
            for (i, di) in diff.iter().enumerate() {
                grad[i] = s * di;
                grad[k + i] = -s * di;
            }
        }
        gap.max(0.0).powi(2)
    };
    Ok(LossResult { value, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastivePair<'a> {
    pub x1: &'a [f64],
    pub x2: &'a [f64],
    pub y: u8,
}

/// Pairs items (0,1), (2,3), ...; a trailing odd item is dropped.
pub fn pair_batch<'a, L: PartialEq>(embeddings: &'a [Vec<f64>], labels: &[L]) -> Vec<ContrastivePair<'a>> {
    embeddings
        .chunks_exact(2)
        .zip(labels.chunks_exact(2))
        .map(|(e, l)| ContrastivePair {
            x1: &e[0],
            x2: &e[1],
            y: u8::from(l[0] != l[1]),
        })
        .collect()
}

/// Mean contrastive loss over a batch, as used by the combined objective.
pub fn batch_contrastive_loss(pairs: &[ContrastivePair<'_>], cfg: &LossConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in pairs {
        total += contrastive_pair_loss(p.x1, p.x2, p.y, cfg)?.value;
    }
    Ok(total / pairs.len() as f64)
}

/// `(1 - α)·L_LM + α·L_CL`.
pub fn combined_loss(l_lm: f64, l_cl: f64, cfg: &LossConfig) -> f64 {
    let a = cfg.contrastive_alpha;
    (1.0 - a) * l_lm + a * l_cl
}

/// `exp(mean NLL)`. The sum is compensated (Neumaier).
pub fn perplexity(nll_per_token: &[f64]) -> Result<f64> {
    if nll_per_token.is_empty() {
        return Err(LossError::EmptyInput);
    }
    if nll_per_token.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(LossError::NonFiniteInput);
    }
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in nll_per_token {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    Ok(((sum + comp) / nll_per_token.len() as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Ls,
    Focal,
    Contrastive,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Ce, LossKind::Ls, LossKind::Focal, LossKind::Contrastive];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Ls => "ls",
            LossKind::Focal => "focal",
            LossKind::Contrastive => "contrastive",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "ls" => Ok(LossKind::Ls),
            "focal" => Ok(LossKind::Focal),
            "contrastive" => Ok(LossKind::Contrastive),
            other => Err(format!("unknown loss {other:?} (expected ce, ls, focal, contrastive)")),
        }
    }
}

/// A point at which a loss is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LossPoint {
    Logits { logits: Vec<f64>, true_class: usize },
    Pair { x1: Vec<f64>, x2: Vec<f64>, y: u8 },
}

impl LossPoint {
    /// The differentiated argument as a flat vector.
    pub fn params(&self) -> Vec<f64> {
        match self {
            LossPoint::Logits { logits, .. } => logits.clone(),
            LossPoint::Pair { x1, x2, .. } => x1.iter().chain(x2).copied().collect(),
        }
    }

    fn with_params(&self, v: &[f64]) -> LossPoint {
        match self {
            LossPoint::Logits { true_class, .. } => LossPoint::Logits {
                logits: v.to_vec(),
                true_class: *true_class,
            },
            LossPoint::Pair { x1, y, .. } => LossPoint::Pair {
                x1: v[..x1.len()].to_vec(),
                x2: v[x1.len()..].to_vec(),
                y: *y,
            },
        }
    }
}

pub fn evaluate_loss(kind: LossKind, point: &LossPoint, cfg: &LossConfig) -> Result<LossResult> {
    match (kind, point) {
        (LossKind::Ce, LossPoint::Logits { logits, true_class }) => ce_loss(logits, *true_class),
        (LossKind::Ls, LossPoint::Logits { logits, true_class }) => {
            let cfg = LossConfig {
                num_classes: logits.len(),
                ..*cfg
            };
            ls_loss(logits, *true_class, &cfg)
        }
        (LossKind::Focal, LossPoint::Logits { logits, true_class }) => focal_loss(logits, *true_class, cfg),
        (LossKind::Contrastive, LossPoint::Pair { x1, x2, y }) => contrastive_pair_loss(x1, x2, *y, cfg),
        (k, _) => Err(LossError::DimensionMismatch(format!(
            "{} loss needs {} input",
            k.name(),
            if k == LossKind::Contrastive { "{x1, x2, y}" } else { "{logits, true_class}" }
        ))),
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central finite differences of `f` at `x`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(1, |a|, |n|)`, maximised over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Compares the analytic gradient with central differences at `point`.
/// Points within a few steps of the contrastive kinks (`D = m` or `D = 0`
/// for a different-class pair) are rejected.
pub fn grad_check(kind: LossKind, point: &LossPoint, cfg: &LossConfig, h: f64) -> Result<f64> {
    if let LossPoint::Pair { x1, x2, y: 1 } = point {
        if x1.len() == x2.len() {
            let dist = x1.iter().zip(x2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let guard = 10.0 * h;
            if (dist - cfg.margin).abs() <= guard {
                return Err(LossError::DomainViolation(format!("D = {dist} is at the margin")));
            }
            if dist <= guard {
                return Err(LossError::DomainViolation(format!("D = {dist} is at zero")));
            }
        }
    }
    let analytic = evaluate_loss(kind, point, cfg)?;
    let x = point.params();
    let f = |v: &[f64]| {
        evaluate_loss(kind, &point.with_params(v), cfg)
            .map(|r| r.value)
            .unwrap_or(f64::NAN)
    };
    let numeric = central_differences(f, &x, h);
    Ok(max_relative_error(&analytic.grad, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!(close(p[0], 0.25, 1e-15) && close(p[1], 0.75, 1e-15));
        assert_eq!(softmax(&[0.0, f64::NAN]), Err(LossError::NonFiniteInput));
    }

    #[test]
    fn ce_cases() {
        let r = ce_loss(&[0.0, 0.0], 1).unwrap();
        assert!(close(r.value, LN2, 1e-15));
        assert!(ce_loss(&[50.0, -50.0], 0).unwrap().value < 1e-40);
        assert_eq!(
            ce_loss(&[0.0, 0.0], 2),
            Err(LossError::IndexOutOfRange { index: 2, classes: 2 })
        );
    }

    #[test]
    fn smoothing_targets() {
        let cfg = LossConfig::default();
        assert_eq!(label_smooth_targets(1, &cfg).unwrap(), vec![0.1, 0.9]);
        let hard = LossConfig { epsilon: 0.0, ..cfg };
        assert_eq!(label_smooth_targets(0, &hard).unwrap(), vec![1.0, 0.0]);
        let five = LossConfig { num_classes: 5, epsilon: 0.2, ..cfg };
        let t = label_smooth_targets(0, &five).unwrap();
        assert!(close(t[0], 0.8, 1e-15));
        for v in &t[1..] {
            assert!(close(*v, 0.05, 1e-15));
        }
        assert!(label_smooth_targets(5, &five).is_err());
    }

    #[test]
    fn ls_reductions() {
        let cfg = LossConfig { num_classes: 4, epsilon: 0.3, ..Default::default() };
        let r = ls_loss(&[0.7; 4], 2, &cfg).unwrap();
        assert!(close(r.value, 4f64.ln(), 1e-12));
        let hard = LossConfig { epsilon: 0.0, ..cfg };
        let logits = [0.3, -1.2, 2.0, 0.1];
        assert_eq!(ls_loss(&logits, 1, &hard).unwrap(), ce_loss(&logits, 1).unwrap());
    }

    #[test]
    fn focal_reductions() {
        let cfg = LossConfig { gamma: 0.0, focal_alpha: 1.0, num_classes: 3, ..Default::default() };
        let logits = [0.3, -1.2, 2.0];
        let f = focal_loss(&logits, 0, &cfg).unwrap();
        let c = ce_loss(&logits, 0).unwrap();
        assert!(close(f.value, c.value, 1e-12));
        for (a, b) in f.grad.iter().zip(&c.grad) {
            assert!(close(*a, *b, 1e-12));
        }
        let easy = focal_loss(&[40.0, -40.0], 0, &LossConfig::default()).unwrap();
        assert_eq!(easy.value, 0.0);
        assert!(easy.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn focal_fractional_gamma_at_certainty() {
        let cfg = LossConfig { gamma: 0.5, ..Default::default() };
        let r = focal_loss(&[800.0, -800.0], 0, &cfg).unwrap();
        assert!(r.value.is_finite() && r.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn contrastive_cases() {
        let cfg = LossConfig::default();
        let r = contrastive_pair_loss(&[1.0, 2.0], &[1.0, 2.0], 0, &cfg).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.iter().all(|g| *g == 0.0));

        let r = contrastive_pair_loss(&[0.0, 0.0], &[3.0, 4.0], 1, &cfg).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.iter().all(|g| *g == 0.0));

        let r = contrastive_pair_loss(&[0.0], &[0.4], 1, &cfg).unwrap();
        assert!(close(r.value, 0.36, 1e-15));

        let r = contrastive_pair_loss(&[0.5], &[0.5], 1, &cfg).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.grad, vec![0.0, 0.0]);

        assert!(matches!(
            contrastive_pair_loss(&[0.0], &[0.0, 1.0], 0, &cfg),
            Err(LossError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn contrastive_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = LossConfig { margin: 2.0, ..Default::default() };
        for _ in 0..200 {
            let x1: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x2: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            for y in [0, 1] {
                let a = contrastive_pair_loss(&x1, &x2, y, &cfg).unwrap();
                let b = contrastive_pair_loss(&x2, &x1, y, &cfg).unwrap();
                assert_eq!(a.value, b.value);
            }
        }
    }

    #[test]
    fn pairing() {
        let e: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let pairs = pair_batch(&e, &[1, 1, 0, 1]);
        assert_eq!(pairs.iter().map(|p| p.y).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(pairs[1].x1, &[2.0][..]);
        assert!(pair_batch(&e[..1], &[1]).is_empty());
        let e5: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        assert_eq!(pair_batch(&e5, &[0, 0, 0, 0, 0]).len(), 2);
    }

    #[test]
    fn combined() {
        let mut cfg = LossConfig { contrastive_alpha: 0.0, ..Default::default() };
        assert_eq!(combined_loss(2.0, 10.0, &cfg), 2.0);
        cfg.contrastive_alpha = 1.0;
        assert_eq!(combined_loss(2.0, 10.0, &cfg), 10.0);
        assert!(close(combined_loss(2.0, 10.0, &LossConfig::default()), 2.8, 1e-15));
    }

    #[test]
    fn perplexity_cases() {
        assert_eq!(perplexity(&[0.0; 5]).unwrap(), 1.0);
        assert!(close(perplexity(&[LN2; 7]).unwrap(), 2.0, 1e-15));
        assert_eq!(perplexity(&[]), Err(LossError::EmptyInput));
        assert_eq!(perplexity(&[1.0, f64::INFINITY]), Err(LossError::NonFiniteInput));
        assert_eq!(perplexity(&[-0.5]), Err(LossError::NonFiniteInput));
    }

    #[test]
    fn ce_grad_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let c = rng.random_range(2..8);
            let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
            let r = ce_loss(&logits, rng.random_range(0..c)).unwrap();
            assert!(r.grad.iter().sum::<f64>().abs() <= 1e-12);
            assert!(r.value >= 0.0);
        }
    }

    #[test]
    fn grad_check_rejects_kinks() {
        let cfg = LossConfig::default();
        let at_margin = LossPoint::Pair { x1: vec![0.0, 0.0], x2: vec![0.6, 0.8], y: 1 };
        assert!(matches!(
            grad_check(LossKind::Contrastive, &at_margin, &cfg, DEFAULT_FD_STEP),
            Err(LossError::DomainViolation(_))
        ));
        let at_zero = LossPoint::Pair { x1: vec![0.3], x2: vec![0.3], y: 1 };
        assert!(grad_check(LossKind::Contrastive, &at_zero, &cfg, DEFAULT_FD_STEP).is_err());
        let same = LossPoint::Pair { x1: vec![0.3], x2: vec![0.3], y: 0 };
        assert!(grad_check(LossKind::Contrastive, &same, &cfg, DEFAULT_FD_STEP).unwrap() < 1e-6);
    }

    #[test]
    fn loss_point_json_shapes() {
        let p: LossPoint = serde_json::from_str(r#"{"logits":[0.0,1.0],"true_class":1}"#).unwrap();
        assert!(matches!(p, LossPoint::Logits { .. }));
        let p: LossPoint = serde_json::from_str(r#"{"x1":[0.0],"x2":[1.0],"y":1}"#).unwrap();
        assert!(matches!(p, LossPoint::Pair { .. }));
        assert!(evaluate_loss(LossKind::Ce, &p, &LossConfig::default()).is_err());
    }

    fn logits_and_class() -> impl Strategy<Value = (Vec<f64>, usize)> {
        prop::collection::vec(-30.0f64..30.0, 2..8)
            .prop_flat_map(|l| {
                let k = l.len();
                (Just(l), 0..k)
            })
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(l in prop::collection::vec(-500.0f64..500.0, 1..10)) {
            let p = softmax(&l).unwrap();
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn smoothed_targets_sum_to_one(k in 2usize..20, t in 0usize..20, eps in 0.0f64..1.0) {
            let cfg = LossConfig { num_classes: k, epsilon: eps, ..LossConfig::default() };
            let q = label_smooth_targets(t % k, &cfg).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(q.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn losses_are_nonnegative((l, t) in logits_and_class(), gamma in 0.0f64..5.0, eps in 0.0f64..1.0) {
            let cfg = LossConfig { num_classes: l.len(), epsilon: eps, gamma, ..LossConfig::default() };
            prop_assert!(ce_loss(&l, t).unwrap().value >= 0.0);
            prop_assert!(ls_loss(&l, t, &cfg).unwrap().value >= 0.0);
            prop_assert!(focal_loss(&l, t, &cfg).unwrap().value >= 0.0);
        }

        #[test]
        fn reductions_to_ce((l, t) in logits_and_class()) {
            let ce = ce_loss(&l, t).unwrap();
            let base = LossConfig { num_classes: l.len(), ..LossConfig::default() };
            let ls = ls_loss(&l, t, &LossConfig { epsilon: 0.0, ..base }).unwrap();
            let fl = focal_loss(&l, t, &LossConfig { gamma: 0.0, focal_alpha: 1.0, ..base }).unwrap();
            for r in [&ls, &fl] {
                prop_assert!((r.value - ce.value).abs() <= 1e-12 * ce.value.abs().max(1.0));
                for (a, b) in r.grad.iter().zip(&ce.grad) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn contrastive_is_nonnegative(
            x1 in prop::collection::vec(-3.0f64..3.0, 1..6),
            shift in -3.0f64..3.0,
            y in 0u8..2,
        ) {
            let x2: Vec<f64> = x1.iter().map(|v| v + shift).collect();
            let r = contrastive_pair_loss(&x1, &x2, y, &LossConfig::default()).unwrap();
            prop_assert!(r.value >= 0.0);
        }
    }
}
