//! `adlens` command-line interface.
//!
//! Analytic output is JSON (or JSON Lines) on stdout; diagnostics go to
//! stderr. Exit codes: 0 success, 1 operational failure, 2 usage error,
//! 3 data-validation failure.

mod config;
mod error;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adlens::actv::{self, ActivationReader};
use adlens::chat::{self, Transcript};
use adlens::dataprep::{self, DatasetManifest, LabelRule};
use adlens::lens::{self, DiffOptions, DistStats, GroupBy, ReportFormat, TokenDiff, TokenValueSeries};
use adlens::loss::{self, LossKind, LossPoint};
use adlens::markers::{self, MarkerOptions, MarkerSet};
use adlens::probe::{self, LastTokenSet, ProbeWeights, SweepConfig};
use adlens::Label;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::Config;
use crate::error::{AtPath, CliError, CliResult};

#[derive(Parser)]
#[command(name = "adlens", version, about = "Transcript, probe and loss toolkit for AD speech analysis")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for every seeded operation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the main output (or a human-readable report) to this file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress warnings and progress notes on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    /// Worker threads; 0 picks automatically.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse CHAT transcripts to JSON (one line per file).
    Parse(ParseArgs),
    /// Extract, strip or count linguistic markers.
    #[command(subcommand)]
    Markers(MarkersCmd),
    /// Inspect .actv activation files.
    #[command(subcommand)]
    Acts(ActsCmd),
    /// Train and evaluate ridge probes.
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// Token-level probe projections and reports.
    #[command(subcommand)]
    Lens(LensCmd),
    /// Evaluate reference losses and check their gradients.
    #[command(subcommand)]
    Loss(LossCmd),
    /// Manifests, splits and plain/marked pairs.
    #[command(subcommand)]
    Data(DataCmd),
}

#[derive(Args)]
struct ParseArgs {
    /// .cha files.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Emit JSON (the only format; accepted for clarity).
    #[arg(long)]
    json: bool,
    /// Keep only this speaker's utterances.
    #[arg(long)]
    speaker: Option<String>,
}

#[derive(Args)]
struct TextInput {
    /// Input text file; stdin when omitted or `-`.
    input: Option<PathBuf>,
    /// Also treat `((...))` non-verbal actions as markers.
    #[arg(long)]
    extended: bool,
}

#[derive(Subcommand)]
enum MarkersCmd {
    /// One JSON line per marker match.
    Extract(TextInput),
    /// Marker-free text plus the removed matches.
    Strip(TextInput),
    /// Match counts per category.
    Count(TextInput),
}

#[derive(Subcommand)]
enum ActsCmd {
    /// Header, label histogram and token statistics.
    Summarize { file: PathBuf },
    /// Read every record; exit 3 on the first problem.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct ProbeOpts {
    /// Ridge strength λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// Fraction of samples in the training split.
    #[arg(long)]
    train_frac: Option<f64>,
    /// Decision threshold on the raw probe output.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Subset {
    All,
    Train,
    Eval,
}

#[derive(Subcommand)]
enum ProbeCmd {
    /// Train a probe on one layer of a LAST_TOKEN file.
    Train {
        acts: PathBuf,
        #[arg(long)]
        layer: usize,
        /// Samples to train on.
        #[arg(long, value_enum, default_value = "train")]
        subset: Subset,
        #[command(flatten)]
        opts: ProbeOpts,
    },
    /// Train and score one probe per layer; report the best layer.
    Sweep {
        acts: PathBuf,
        #[command(flatten)]
        opts: ProbeOpts,
    },
    /// Score a trained probe on a LAST_TOKEN file.
    Eval {
        acts: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        /// Samples to score.
        #[arg(long, value_enum, default_value = "eval")]
        subset: Subset,
        #[command(flatten)]
        opts: ProbeOpts,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Html,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    All,
    Label,
}

#[derive(Subcommand)]
enum LensCmd {
    /// Per-token probe values of a TOKEN_LEVEL file (JSON Lines).
    Values {
        acts: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        /// Accept a file from a different layer than the probe's.
        #[arg(long)]
        allow_layer_mismatch: bool,
    },
    /// Fine-tuned minus vanilla token values (JSON Lines).
    Diff {
        finetuned: PathBuf,
        vanilla: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        /// Score the vanilla file with this probe instead.
        #[arg(long)]
        probe_vanilla: Option<PathBuf>,
        #[arg(long)]
        allow_layer_mismatch: bool,
    },
    /// Render a highlight report from `lens diff` output into --out.
    Report {
        /// JSON Lines from `lens diff`; stdin when omitted.
        diffs: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum, default_value = "html")]
        format: FormatArg,
    },
    /// Pooled value distributions from `lens values` output.
    Dist {
        /// JSON Lines from `lens values`; stdin when omitted.
        values: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        group_by: GroupArg,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Compare two distributions by mean and standard deviation.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Group to take from `lens dist` output.
        #[arg(long, default_value = "all")]
        group: String,
        #[arg(long)]
        tol_mean: Option<f64>,
        #[arg(long)]
        tol_std: Option<f64>,
    },
}

#[derive(Subcommand)]
enum LossCmd {
    /// Evaluate a loss on JSON test vectors; one {value, grad} line each.
    Eval {
        #[arg(long = "loss", value_parser = parse_loss_kind)]
        kind: LossKind,
        /// JSON array or JSON Lines of points; stdin when omitted.
        vectors: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every loss at random points.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = loss::DEFAULT_FD_STEP)]
        step: f64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

fn parse_loss_kind(s: &str) -> Result<LossKind, String> {
    s.parse()
}

#[derive(Subcommand)]
enum DataCmd {
    /// Build a manifest from a directory of .cha files.
    Manifest {
        corpus: PathBuf,
        /// Directory-name labels, e.g. `ad=1`; defaults to ad=1, control=0.
        #[arg(long = "subdir", value_name = "NAME=LABEL", conflicts_with = "labels_csv")]
        subdirs: Vec<String>,
        /// CSV with a `sample_id,label` header, joined on file stem.
        #[arg(long)]
        labels_csv: Option<PathBuf>,
    },
    /// Stratified train/eval split of a manifest.
    Split {
        manifest: PathBuf,
        #[arg(long)]
        train_frac: Option<f64>,
    },
    /// Plain/marked pairs as JSON Lines.
    Pairs {
        manifest: PathBuf,
        /// Keep only this speaker's utterances.
        #[arg(long)]
        speaker: Option<String>,
        #[arg(long)]
        extended: bool,
    },
}

struct Ctx {
    cfg: Config,
    seed: u64,
    out: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn warn(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("adlens: {}", msg.as_ref());
        }
    }

    fn sink(&self) -> CliResult<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(File::create(p).at(p)?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    fn emit<T: Serialize>(&self, value: &T) -> CliResult<()> {
        let mut w = self.sink()?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn probe_cfg(&self, o: &ProbeOpts) -> SweepConfig {
        let p = &self.cfg.probe;
        SweepConfig {
            lambda_ridge: o.lambda.or(p.lambda).unwrap_or(probe::DEFAULT_LAMBDA),
            seed: self.seed,
            train_frac: o.train_frac.or(p.train_frac).unwrap_or(probe::DEFAULT_TRAIN_FRAC),
            threshold: o.threshold.or(p.threshold).unwrap_or(probe::DEFAULT_THRESHOLD),
        }
    }

    fn markers(&self, extended: bool) -> MarkerOptions {
        MarkerOptions {
            extended: extended || self.cfg.markers.extended.unwrap_or(false),
        }
    }
}

fn write_jsonl<T: Serialize>(w: &mut dyn Write, value: &T) -> CliResult<()> {
    serde_json::to_writer(&mut *w, value)?;
    writeln!(w)?;
    Ok(())
}

fn read_text(input: Option<&Path>) -> CliResult<String> {
    let mut bytes = Vec::new();
    match input {
        Some(p) if p != Path::new("-") => {
            File::open(p).and_then(|mut f| f.read_to_end(&mut bytes)).at(p)?;
        }
        _ => {
            io::stdin().read_to_end(&mut bytes)?;
        }
    }
    String::from_utf8(bytes).map_err(|e| CliError::data(format!("input is not UTF-8 (byte {})", e.utf8_error().valid_up_to())))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(input: Option<&Path>) -> CliResult<Vec<T>> {
    let name = input.map_or_else(|| "<stdin>".to_string(), |p| p.display().to_string());
    let reader: Box<dyn BufRead> = match input {
        Some(p) if p != Path::new("-") => Box::new(BufReader::new(File::open(p).at(p)?)),
        _ => Box::new(BufReader::new(io::stdin().lock())),
    };
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::data(format!("{name}:{}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn read_probe(path: &Path) -> CliResult<ProbeWeights> {
    let text = std::fs::read_to_string(path).at(path)?;
    ProbeWeights::from_json(&text).at(path)
}

fn open_acts(path: &Path) -> CliResult<ActivationReader<BufReader<File>>> {
    actv::read_file(path).at(path)
}

fn load_last_token(path: &Path, ctx: &Ctx) -> CliResult<LastTokenSet> {
    let set = LastTokenSet::load(open_acts(path)?).at(path)?;
    if set.unlabeled > 0 {
        ctx.warn(format!("{}: skipped {} unlabeled samples", path.display(), set.unlabeled));
    }
    Ok(set)
}

fn subset_indices(set: &LastTokenSet, subset: Subset, cfg: &SweepConfig) -> CliResult<Vec<usize>> {
    if subset == Subset::All {
        return Ok((0..set.len()).collect());
    }
    let (train, eval) = set.split(cfg.train_frac, cfg.seed)?;
    Ok(if subset == Subset::Train { train } else { eval })
}

#[derive(Serialize)]
struct ParsedFile<'a> {
    path: String,
    id: &'a str,
    speakers: Vec<&'a str>,
    header_lines: Vec<&'a str>,
    utterances: Vec<ParsedUtterance<'a>>,
}

#[derive(Serialize)]
struct ParsedUtterance<'a> {
    speaker: &'a str,
    source_line: usize,
    raw_text: &'a str,
    tiers: BTreeMap<&'a str, &'a str>,
}

fn parsed_view<'a>(path: &Path, t: &'a Transcript) -> ParsedFile<'a> {
    let mut speakers: Vec<&str> = Vec::new();
    for s in t.speakers() {
        if !speakers.contains(&s) {
            speakers.push(s);
        }
    }
    ParsedFile {
        path: path.display().to_string(),
        id: &t.id,
        speakers,
        header_lines: t.header_lines.iter().map(|h| h.text.as_str()).collect(),
        utterances: t
            .utterances
            .iter()
            .map(|u| ParsedUtterance {
                speaker: &u.speaker,
                source_line: u.source_line,
                raw_text: &u.raw_text,
                tiers: u.tiers.iter().map(|x| (x.name.as_str(), x.text.as_str())).collect(),
            })
            .collect(),
    }
}

fn cmd_parse(a: ParseArgs, ctx: &Ctx) -> CliResult<()> {
    let mut w = ctx.sink()?;
    for path in &a.files {
        let mut t = chat::parse_chat_file(path)?;
        if let Some(s) = &a.speaker {
            t = chat::filter_speaker(&t, s);
        }
        write_jsonl(&mut *w, &parsed_view(path, &t))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_markers(c: MarkersCmd, ctx: &Ctx) -> CliResult<()> {
    let (input, kind) = match &c {
        MarkersCmd::Extract(i) => (i, 0),
        MarkersCmd::Strip(i) => (i, 1),
        MarkersCmd::Count(i) => (i, 2),
    };
    let text = read_text(input.input.as_deref())?;
    let set = MarkerSet::for_options(ctx.markers(input.extended));
    match kind {
        0 => {
            let mut w = ctx.sink()?;
            for m in set.extract(&text) {
                write_jsonl(&mut *w, &m)?;
            }
            w.flush()?;
            Ok(())
        }
        1 => {
            let r = set.strip(&text);
            ctx.emit(&json!({
                "plain": r.plain,
                "removed_count": r.removed_count(),
                "removed": r.removed,
            }))
        }
        _ => ctx.emit(&markers::count_by_category(&set.extract(&text))),
    }
}

fn cmd_acts(c: ActsCmd, ctx: &Ctx) -> CliResult<()> {
    match c {
        ActsCmd::Summarize { file } => ctx.emit(&actv::summarize(&file).at(&file)?),
        ActsCmd::Validate { files } => {
            let mut w = ctx.sink()?;
            let mut first_err = None;
            for path in &files {
                let res = open_acts(path).and_then(|r| {
                    let h = r.header().clone();
                    let mut n = 0usize;
                    for rec in r {
                        rec.at(path)?;
                        n += 1;
                    }
                    Ok((h, n))
                });
                match res {
                    Ok((h, n)) => write_jsonl(
                        &mut *w,
                        &json!({"path": path, "valid": true, "kind": h.kind, "records": n}),
                    )?,
                    Err(e) => {
                        write_jsonl(&mut *w, &json!({"path": path, "valid": false, "error": e.message}))?;
                        first_err.get_or_insert(e);
                    }
                }
            }
            w.flush()?;
            first_err.map_or(Ok(()), Err)
        }
    }
}

fn cmd_probe(c: ProbeCmd, ctx: &Ctx) -> CliResult<()> {
    match c {
        ProbeCmd::Train {
            acts,
            layer,
            subset,
            opts,
        } => {
            let cfg = ctx.probe_cfg(&opts);
            let set = load_last_token(&acts, ctx)?;
            let idx = subset_indices(&set, subset, &cfg)?;
            ctx.emit(&set.train(layer, &idx, cfg.lambda_ridge)?)
        }
        ProbeCmd::Sweep { acts, opts } => {
            let set = load_last_token(&acts, ctx)?;
            ctx.emit(&probe::layer_sweep(&set, ctx.probe_cfg(&opts))?)
        }
        ProbeCmd::Eval {
            acts,
            probe: probe_path,
            subset,
            opts,
        } => {
            let cfg = ctx.probe_cfg(&opts);
            let p = read_probe(&probe_path)?;
            let set = load_last_token(&acts, ctx)?;
            if p.layer_index >= set.num_layers || p.dim() != set.hidden_dim {
                return Err(CliError::data(format!(
                    "probe (layer {}, d = {}) does not fit {} (L = {}, d = {})",
                    p.layer_index,
                    p.dim(),
                    acts.display(),
                    set.num_layers,
                    set.hidden_dim
                )));
            }
            let idx = subset_indices(&set, subset, &cfg)?;
            let m = probe::evaluate(&p, &set.design(p.layer_index, &idx), &set.labels_at(&idx), cfg.threshold)?;
            ctx.emit(&m)
        }
    }
}

/// Accepts either a bare distribution or a `lens dist` map.
fn read_dist(path: &Path, group: &str) -> CliResult<DistStats> {
    let text = std::fs::read_to_string(path).at(path)?;
    if let Ok(d) = serde_json::from_str::<DistStats>(&text) {
        return Ok(d);
    }
    let mut map: HashMap<String, DistStats> = serde_json::from_str(&text).at(path)?;
    map.remove(group)
        .ok_or_else(|| CliError::data(format!("{}: no group {group:?}", path.display())))
}

fn cmd_lens(c: LensCmd, ctx: &Ctx) -> CliResult<()> {
    let lc = &ctx.cfg.lens;
    match c {
        LensCmd::Values {
            acts,
            probe: probe_path,
            allow_layer_mismatch,
        } => {
            let p = read_probe(&probe_path)?;
            let mut w = ctx.sink()?;
            for s in lens::token_values(&p, open_acts(&acts)?, allow_layer_mismatch).at(&acts)? {
                write_jsonl(&mut *w, &s.at(&acts)?)?;
            }
            w.flush()?;
            Ok(())
        }
        LensCmd::Diff {
            finetuned,
            vanilla,
            probe: probe_path,
            probe_vanilla,
            allow_layer_mismatch,
        } => {
            let p = read_probe(&probe_path)?;
            let pv = probe_vanilla.as_deref().map(read_probe).transpose()?;
            let opts = DiffOptions {
                vanilla_probe: pv.as_ref(),
                allow_layer_mismatch,
            };
            let diffs = lens::token_diff(&p, open_acts(&finetuned)?, open_acts(&vanilla)?, opts)?;
            let mut w = ctx.sink()?;
            for d in &diffs {
                write_jsonl(&mut *w, d)?;
            }
            w.flush()?;
            Ok(())
        }
        LensCmd::Report {
            diffs,
            threshold,
            format,
        } => {
            let Some(out) = &ctx.out else {
                return Err(CliError::usage("lens report writes its document to --out FILE"));
            };
            let diffs: Vec<TokenDiff> = read_jsonl(diffs.as_deref())?;
            let threshold = threshold.or(lc.threshold).unwrap_or(lens::DEFAULT_THRESHOLD);
            let format = match format {
                FormatArg::Text => ReportFormat::Text,
                FormatArg::Html => ReportFormat::Html,
            };
            let report = lens::highlight_report(&diffs, threshold, format);
            std::fs::write(out, &report.document).at(out)?;
            let summary = json!({
                "report": out,
                "format": report.format,
                "threshold": report.threshold,
                "total_highlighted": report.total_highlighted,
                "color_scale_max": report.color_scale_max,
                "samples": report.samples,
            });
            let mut w = BufWriter::new(io::stdout().lock());
            serde_json::to_writer_pretty(&mut w, &summary)?;
            writeln!(w)?;
            Ok(())
        }
        LensCmd::Dist { values, group_by, bins } => {
            let series: Vec<TokenValueSeries> = read_jsonl(values.as_deref())?;
            let group_by = match group_by {
                GroupArg::All => GroupBy::All,
                GroupArg::Label => GroupBy::Label,
            };
            let bins = bins.or(lc.bins).unwrap_or(lens::DEFAULT_BINS);
            ctx.emit(&lens::distribution(&series, group_by, bins)?)
        }
        LensCmd::Compare {
            a,
            b,
            group,
            tol_mean,
            tol_std,
        } => {
            let (da, db) = (read_dist(&a, &group)?, read_dist(&b, &group)?);
            if da.n == 0 || db.n == 0 {
                return Err(CliError::data("both distributions must be nonempty"));
            }
            let c = lens::compare_distributions(
                &da,
                &db,
                tol_mean.or(lc.tol_mean).unwrap_or(lens::DEFAULT_TOL),
                tol_std.or(lc.tol_std).unwrap_or(lens::DEFAULT_TOL),
            );
            ctx.emit(&c)
        }
    }
}

fn read_points(input: Option<&Path>) -> CliResult<Vec<LossPoint>> {
    let text = read_text(input)?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::data(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Uniform draws from a splitmix64 stream.
struct Uniform(dataprep::SplitMix64);

impl Uniform {
    fn next(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }

    fn index(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }
}

fn random_point(kind: LossKind, rng: &mut Uniform) -> LossPoint {
    if kind == LossKind::Contrastive {
        let d = 1 + rng.index(5);
        LossPoint::Pair {
            x1: (0..d).map(|_| rng.next(-1.5, 1.5)).collect(),
            x2: (0..d).map(|_| rng.next(-1.5, 1.5)).collect(),
            y: rng.index(2) as u8,
        }
    } else {
        let c = 2 + rng.index(5);
        LossPoint::Logits {
            logits: (0..c).map(|_| rng.next(-4.0, 4.0)).collect(),
            true_class: rng.index(c),
        }
    }
}

fn cmd_loss(c: LossCmd, ctx: &Ctx) -> CliResult<()> {
    let cfg = ctx.cfg.loss.unwrap_or_default();
    cfg.validate()?;
    match c {
        LossCmd::Eval { kind, vectors } => {
            let points = read_points(vectors.as_deref())?;
            let mut w = ctx.sink()?;
            for (i, p) in points.iter().enumerate() {
                let r = loss::evaluate_loss(kind, p, &cfg).map_err(|e| CliError::data(format!("vector {i}: {e}")))?;
                write_jsonl(&mut *w, &r)?;
            }
            w.flush()?;
            Ok(())
        }
        LossCmd::Gradcheck {
            points,
            step,
            tolerance,
        } => {
            let mut rng = Uniform(dataprep::SplitMix64::new(ctx.seed));
            let mut w = ctx.sink()?;
            let mut all_pass = true;
            for kind in LossKind::ALL {
                let (mut worst, mut done, mut skipped) = (0.0f64, 0, 0);
                while done < points {
                    match loss::grad_check(kind, &random_point(kind, &mut rng), &cfg, step) {
                        Ok(e) => {
                            worst = worst.max(e);
                            done += 1;
                        }
                        Err(loss::LossError::DomainViolation(_)) => skipped += 1,
                        Err(e) => return Err(e.into()),
                    }
                }
                let pass = worst <= tolerance;
                all_pass &= pass;
                write_jsonl(
                    &mut *w,
                    &json!({
                        "loss": kind.name(),
                        "points": done,
                        "skipped_near_kink": skipped,
                        "max_relative_error": worst,
                        "tolerance": tolerance,
                        "pass": pass,
                    }),
                )?;
            }
            w.flush()?;
            if all_pass {
                Ok(())
            } else {
                Err(CliError::operational("gradient check failed"))
            }
        }
    }
}

fn parse_subdir_rule(specs: &[String]) -> CliResult<LabelRule> {
    if specs.is_empty() {
        return Ok(LabelRule::BySubdir(HashMap::from([
            ("ad".to_string(), Label::Ad),
            ("control".to_string(), Label::Control),
        ])));
    }
    let mut map = HashMap::new();
    for s in specs {
        let (name, label) = s
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--subdir expects NAME=LABEL, got {s:?}")))?;
        let label = label
            .trim()
            .parse::<u8>()
            .ok()
            .and_then(|v| Label::try_from(v).ok())
            .ok_or_else(|| CliError::usage(format!("label in {s:?} must be 0 or 1")))?;
        map.insert(name.to_string(), label);
    }
    Ok(LabelRule::BySubdir(map))
}

fn read_manifest(path: &Path) -> CliResult<DatasetManifest> {
    let text = std::fs::read_to_string(path).at(path)?;
    let m: DatasetManifest = serde_json::from_str(&text).at(path)?;
    m.check_unique_ids().at(path)?;
    Ok(m)
}

fn cmd_data(c: DataCmd, ctx: &Ctx) -> CliResult<()> {
    match c {
        DataCmd::Manifest {
            corpus,
            subdirs,
            labels_csv,
        } => {
            let rule = match labels_csv {
                Some(p) => LabelRule::ByCsv(p),
                None => parse_subdir_rule(&subdirs)?,
            };
            let mut m = dataprep::build_manifest(&corpus, &rule)?;
            m.seed = ctx.seed;
            ctx.emit(&m)
        }
        DataCmd::Split { manifest, train_frac } => {
            let m = read_manifest(&manifest)?;
            let frac = train_frac
                .or(ctx.cfg.probe.train_frac)
                .unwrap_or(probe::DEFAULT_TRAIN_FRAC);
            let (train, eval) = dataprep::split(&m, frac, ctx.seed)?;
            ctx.emit(&json!({"train": train, "eval": eval}))
        }
        DataCmd::Pairs {
            manifest,
            speaker,
            extended,
        } => {
            let m = read_manifest(&manifest)?;
            let mut w = ctx.sink()?;
            let mut failures = 0;
            let mut first_code = None;
            for r in dataprep::make_pairs(&m, speaker.as_deref(), ctx.markers(extended)) {
                match r {
                    Ok(p) => write_jsonl(&mut *w, &p)?,
                    Err(e) => {
                        failures += 1;
                        eprintln!("adlens: {e}");
                        first_code.get_or_insert(CliError::from(e).code);
                    }
                }
            }
            w.flush()?;
            if let Some(code) = first_code {
                return Err(CliError {
                    code,
                    message: format!("{failures} transcripts failed"),
                });
            }
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = Config::load(cli.global.config.as_deref())?;
    let threads = cli.global.threads.or(cfg.threads).unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::operational(e.to_string()))?;
    let ctx = Ctx {
        seed: cli.global.seed.or(cfg.seed).unwrap_or(0),
        out: cli.global.out,
        quiet: cli.global.quiet,
        cfg,
    };
    match cli.command {
        Command::Parse(a) => cmd_parse(a, &ctx),
        Command::Markers(c) => cmd_markers(c, &ctx),
        Command::Acts(c) => cmd_acts(c, &ctx),
        Command::Probe(c) => cmd_probe(c, &ctx),
        Command::Lens(c) => cmd_lens(c, &ctx),
        Command::Loss(c) => cmd_loss(c, &ctx),
        Command::Data(c) => cmd_data(c, &ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { error::EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("adlens: {e}");
            ExitCode::from(e.code)
        }
    }
}
