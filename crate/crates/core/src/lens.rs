//! Token-level probe projections.
//!
//! A trained probe `(w, b)` is applied to every token row of a `TOKEN_LEVEL`
//! dump. Two dumps of the same inputs (fine-tuned and vanilla model) give
//! per-token differences, which can be rendered as a highlight report.
//! By default one probe scores both models; a separate vanilla probe may be
//! supplied.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actv::{ActivationReader, ActvError, Header, Kind, SampleRecord};
use crate::probe::ProbeWeights;
use crate::Label;

pub const DEFAULT_THRESHOLD: f64 = 0.02;
pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_TOL: f64 = 0.05;
/// Upper end of the HTML colour scale, as a percentile of highlighted |diff|.
pub const COLOR_PERCENTILE: f64 = 99.0;

#[derive(Debug, Error)]
pub enum LensError {
    #[error("expected a TOKEN_LEVEL file, got {0:?}")]
    WrongFileKind(Kind),
    #[error("probe was trained on layer {probe} but the file holds layer {file}")]
    LayerMismatch { probe: usize, file: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sample {0:?}: token strings differ between the two files")]
    TokenSequenceMismatch(String),
    #[error("sample {0:?} has no counterpart in the other file")]
    MissingCounterpart(String),
    #[error("sample {0:?} appears twice")]
    DuplicateSample(String),
    #[error("no token values")]
    EmptyInput,
    #[error(transparent)]
    Actv(#[from] ActvError),
}

pub type Result<T> = std::result::Result<T, LensError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenValueSeries {
    pub sample_id: String,
    pub label: Option<Label>,
    pub tokens: Vec<String>,
    pub values: Vec<f64>,
}

fn check_header(p: &ProbeWeights, h: &Header, allow_layer_mismatch: bool) -> Result<()> {
    if h.kind != Kind::TokenLevel {
        return Err(LensError::WrongFileKind(h.kind));
    }
    if h.hidden_dim != p.dim() {
        return Err(LensError::DimensionMismatch(format!(
            "probe has d = {}, file has d = {}",
            p.dim(),
            h.hidden_dim
        )));
    }
    if !allow_layer_mismatch && h.layer_index != p.layer_index {
        return Err(LensError::LayerMismatch {
            probe: p.layer_index,
            file: h.layer_index,
        });
    }
    Ok(())
}

/// `w·h_t + b` for every token row of one record.
pub fn project(p: &ProbeWeights, rec: &SampleRecord) -> TokenValueSeries {
    TokenValueSeries {
        sample_id: rec.sample_id.clone(),
        label: rec.label,
        tokens: rec.tokens.clone(),
        values: rec.row_iter().map(|h| p.score_f32(h)).collect(),
    }
}

/// Streams token values, one series per record.
pub struct TokenValues<'p, R: Read> {
    probe: &'p ProbeWeights,
    reader: ActivationReader<R>,
}

impl<R: Read> Iterator for TokenValues<'_, R> {
    type Item = Result<TokenValueSeries>;

    fn next(&mut self) -> Option<Self::Item> {
        let rec = self.reader.next()?;
        Some(rec.map(|r| project(self.probe, &r)).map_err(LensError::from))
    }
}

pub fn token_values<R: Read>(
    probe: &ProbeWeights,
    reader: ActivationReader<R>,
    allow_layer_mismatch: bool,
) -> Result<TokenValues<'_, R>> {
    check_header(probe, reader.header(), allow_layer_mismatch)?;
    Ok(TokenValues { probe, reader })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDiff {
    pub sample_id: String,
    pub label: Option<Label>,
    pub tokens: Vec<String>,
    /// Fine-tuned value minus vanilla value, per token.
    pub diffs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DiffOptions<'a> {
    /// Scores the vanilla file instead of the main probe.
    pub vanilla_probe: Option<&'a ProbeWeights>,
    pub allow_layer_mismatch: bool,
}

/// Pairs samples by id and returns per-token differences in fine-tuned file
/// order. The vanilla file is held in memory; the fine-tuned file is
/// streamed.
pub fn token_diff<R1: Read, R2: Read>(
    probe: &ProbeWeights,
    finetuned: ActivationReader<R1>,
    vanilla: ActivationReader<R2>,
    opts: DiffOptions<'_>,
) -> Result<Vec<TokenDiff>> {
    let van_probe = opts.vanilla_probe.unwrap_or(probe);
    check_header(probe, finetuned.header(), opts.allow_layer_mismatch)?;
    check_header(van_probe, vanilla.header(), opts.allow_layer_mismatch)?;
    if finetuned.header().layer_index != vanilla.header().layer_index && !opts.allow_layer_mismatch {
        return Err(LensError::LayerMismatch {
            probe: finetuned.header().layer_index,
            file: vanilla.header().layer_index,
        });
    }

    let mut van: HashMap<String, TokenValueSeries> = HashMap::new();
    for rec in vanilla {
        let s = project(van_probe, &rec?);
        if van.contains_key(&s.sample_id) {
            return Err(LensError::DuplicateSample(s.sample_id));
        }
        van.insert(s.sample_id.clone(), s);
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in finetuned {
        let ft = project(probe, &rec?);
        if !seen.insert(ft.sample_id.clone()) {
            return Err(LensError::DuplicateSample(ft.sample_id));
        }
        let v = van
            .get(&ft.sample_id)
            .ok_or_else(|| LensError::MissingCounterpart(ft.sample_id.clone()))?;
        if v.tokens != ft.tokens {
            return Err(LensError::TokenSequenceMismatch(ft.sample_id));
        }
        let diffs = ft.values.iter().zip(&v.values).map(|(a, b)| a - b).collect();
        out.push(TokenDiff {
            sample_id: ft.sample_id,
            label: ft.label,
            tokens: ft.tokens,
            diffs,
        });
    }
    if let Some(id) = van.keys().filter(|k| !seen.contains(*k)).min() {
        return Err(LensError::MissingCounterpart(id.clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Text,
    Html,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleHighlights {
    pub sample_id: String,
    pub tokens: usize,
    pub highlighted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighlightReport {
    pub threshold: f64,
    pub format: ReportFormat,
    pub samples: Vec<SampleHighlights>,
    pub total_highlighted: usize,
    /// Upper end of the colour scale (HTML only).
    pub color_scale_max: Option<f64>,
    pub document: String,
}

pub fn is_highlighted(diff: f64, threshold: f64) -> bool {
    diff.abs() >= threshold
}

/// Nearest-rank percentile of an unsorted slice.
fn percentile(values: &[f64], pct: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}

pub fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Colour intensity in `[0, 1]`: linear from `threshold` to `max`, clamped.
pub fn intensity(abs_diff: f64, threshold: f64, max: f64) -> f64 {
    if max <= threshold {
        return 1.0;
    }
    ((abs_diff - threshold) / (max - threshold)).clamp(0.0, 1.0)
}

pub fn highlight_report(diffs: &[TokenDiff], threshold: f64, format: ReportFormat) -> HighlightReport {
    let samples: Vec<SampleHighlights> = diffs
        .iter()
        .map(|d| SampleHighlights {
            sample_id: d.sample_id.clone(),
            tokens: d.tokens.len(),
            highlighted: d.diffs.iter().filter(|v| is_highlighted(**v, threshold)).count(),
        })
        .collect();
    let total_highlighted = samples.iter().map(|s| s.highlighted).sum();

    let (document, color_scale_max) = match format {
        ReportFormat::Text => (render_text(diffs, &samples, threshold), None),
        ReportFormat::Html => {
            let marked: Vec<f64> = diffs
                .iter()
                .flat_map(|d| d.diffs.iter())
                .filter(|v| is_highlighted(**v, threshold))
                .map(|v| v.abs())
                .collect();
            let max = percentile(&marked, COLOR_PERCENTILE).unwrap_or(threshold);
            (render_html(diffs, &samples, threshold, max), Some(max))
        }
    };

    HighlightReport {
        threshold,
        format,
        samples,
        total_highlighted,
        color_scale_max,
        document,
    }
}

fn label_name(l: Option<Label>) -> String {
    l.map_or_else(|| "unlabeled".to_string(), |l| l.to_string())
}

fn render_text(diffs: &[TokenDiff], samples: &[SampleHighlights], threshold: f64) -> String {
    let mut out = String::new();
    for (d, s) in diffs.iter().zip(samples) {
        let _ = writeln!(
            out,
            "# {} ({}) {}/{} tokens highlighted at |diff| >= {}",
            d.sample_id,
            label_name(d.label),
            s.highlighted,
            s.tokens,
            threshold
        );
        let words: Vec<String> = d
            .tokens
            .iter()
            .zip(&d.diffs)
            .map(|(t, v)| {
                if is_highlighted(*v, threshold) {
                    format!("{t} [{v:+.3}]")
                } else {
                    t.clone()
                }
            })
            .collect();
        out.push_str(&words.join(" "));
        out.push_str("\n\n");
    }
    out
}

fn render_html(diffs: &[TokenDiff], samples: &[SampleHighlights], threshold: f64, max: f64) -> String {
    let mut out = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Token probe differences</title>\n</head>\n\
         <body style=\"font-family: sans-serif; line-height: 1.8; max-width: 60em; margin: 2em auto;\">\n",
    );
    let _ = writeln!(
        out,
        "<p style=\"color: #555;\">Highlighted: |diff| &gt;= {threshold}. Red raises the probe value, blue lowers it. \
         Full intensity at |diff| &gt;= {max:.4}.</p>"
    );
    for (d, s) in diffs.iter().zip(samples) {
        let _ = writeln!(
            out,
            "<section style=\"margin-bottom: 1.5em;\">\n<h3 style=\"margin-bottom: 0.3em;\">{} <small style=\"color: #777;\">{} &middot; {}/{} highlighted</small></h3>\n<p>",
            html_escape(&d.sample_id),
            label_name(d.label),
            s.highlighted,
            s.tokens
        );
        for (t, v) in d.tokens.iter().zip(&d.diffs) {
            let tok = html_escape(t);
            if is_highlighted(*v, threshold) {
                let a = 0.15 + 0.85 * intensity(v.abs(), threshold, max);
                let rgb = if *v >= 0.0 { "220, 38, 38" } else { "37, 99, 235" };
                let _ = write!(
                    out,
                    "<span title=\"{v:+.4}\" style=\"background-color: rgba({rgb}, {a:.3}); padding: 0 2px; border-radius: 3px;\">{tok}</span> "
                );
            } else {
                let _ = write!(out, "<span>{tok}</span> ");
            }
        }
        out.push_str("</p>\n</section>\n");
    }
    out.push_str("</body>\n</html>\n");
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistStats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Vec<Bin>,
}

impl DistStats {
    pub fn from_values(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(LensError::EmptyInput);
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(DistStats {
            n,
            mean,
            std: var.sqrt(),
            min,
            max,
            histogram: histogram(values, min, max, bins.max(1)),
        })
    }
}

fn histogram(values: &[f64], min: f64, max: f64, bins: usize) -> Vec<Bin> {
    if min == max {
        return vec![Bin {
            lower: min,
            upper: max,
            count: values.len(),
        }];
    }
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let i = (((v - min) / width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| Bin {
            lower: min + i as f64 * width,
            upper: if i + 1 == bins { max } else { min + (i + 1) as f64 * width },
            count,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    All,
    Label,
}

/// Pools token values per group. Group keys are `all`, or `ad`, `control`
/// and `unlabeled`.
pub fn distribution<'a>(
    series: impl IntoIterator<Item = &'a TokenValueSeries>,
    group_by: GroupBy,
    bins: usize,
) -> Result<BTreeMap<String, DistStats>> {
    let mut pooled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in series {
        let key = match group_by {
            GroupBy::All => "all".to_string(),
            GroupBy::Label => label_name(s.label),
        };
        pooled.entry(key).or_default().extend_from_slice(&s.values);
    }
    pooled.retain(|_, v| !v.is_empty());
    if pooled.is_empty() {
        return Err(LensError::EmptyInput);
    }
    pooled
        .into_iter()
        .map(|(k, v)| Ok((k, DistStats::from_values(&v, bins)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Similar,
    Different,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub verdict: Verdict,
    /// `|a.mean - b.mean|`
    pub delta_mean: f64,
    /// `|a.std - b.std|`
    pub delta_std: f64,
    pub tol_mean: f64,
    pub tol_std: f64,
}

pub fn compare_distributions(a: &DistStats, b: &DistStats, tol_mean: f64, tol_std: f64) -> Comparison {
    let delta_mean = (a.mean - b.mean).abs();
    let delta_std = (a.std - b.std).abs();
    let verdict = if delta_mean <= tol_mean && delta_std <= tol_std {
        Verdict::Similar
    } else {
        Verdict::Different
    };
    Comparison {
        verdict,
        delta_mean,
        delta_std,
        tol_mean,
        tol_std,
    }
}
