//! Dataset preparation: manifests, stratified splits, plain/marked pairs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{self, ChatError};
use crate::markers::{MarkerOptions, MarkerSet};
use crate::Label;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no label for {0}")]
    UnlabeledFile(String),
    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),
    #[error("class {0} has no entries; cannot stratify")]
    DegenerateClass(Label),
    #[error("train fraction must be in [0, 1], got {0}")]
    BadFraction(f64),
    #[error("label csv: {0}")]
    Csv(String),
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: ChatError,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sample_id: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub notes: String,
}

impl DatasetManifest {
    pub fn label_counts(&self) -> BTreeMap<Label, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.label).or_insert(0) += 1;
        }
        m
    }

    pub fn check_unique_ids(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(DataError::DuplicateSampleId(e.sample_id.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum LabelRule {
    /// Directory name (any ancestor below the corpus root, nearest first) to label.
    BySubdir(HashMap<String, Label>),
    /// CSV with a `sample_id,label` header, joined on file stem.
    ByCsv(PathBuf),
}

fn read_label_csv(path: &Path) -> Result<HashMap<String, Label>, DataError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| DataError::Csv(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::Csv(format!("missing {name:?} column in header")))
    };
    let (id_col, label_col) = (col("sample_id")?, col("label")?);
    let mut out = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| DataError::Csv(e.to_string()))?;
        let id = row.get(id_col).unwrap_or_default().trim().to_string();
        let raw = row.get(label_col).unwrap_or_default().trim();
        let label = raw
            .parse::<u8>()
            .ok()
            .and_then(|v| Label::try_from(v).ok())
            .ok_or_else(|| DataError::Csv(format!("bad label {raw:?} for {id:?}")))?;
        if out.insert(id.clone(), label).is_some() {
            return Err(DataError::DuplicateSampleId(id));
        }
    }
    Ok(out)
}

/// One entry per `.cha` file under `corpus_dir`, in path order.
pub fn build_manifest(corpus_dir: impl AsRef<Path>, rule: &LabelRule) -> Result<DatasetManifest, DataError> {
    let root = corpus_dir.as_ref();
    if !root.is_dir() {
        return Err(DataError::Io {
            path: root.display().to_string(),
            message: "not a directory".into(),
        });
    }
    let csv_labels = match rule {
        LabelRule::ByCsv(p) => Some(read_label_csv(p)?),
        LabelRule::BySubdir(_) => None,
    };

    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "cha"))
        .map(|e| e.into_path())
        .collect();
    files.sort();

    let mut entries = Vec::with_capacity(files.len());
    let mut seen = HashSet::new();
    for path in files {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let label = match rule {
            LabelRule::BySubdir(map) => path
                .strip_prefix(root)
                .ok()
                .and_then(|rel| rel.parent())
                .and_then(|dir| {
                    dir.components()
                        .rev()
                        .find_map(|c| map.get(c.as_os_str().to_string_lossy().as_ref()).copied())
                }),
            LabelRule::ByCsv(_) => csv_labels.as_ref().and_then(|m| m.get(&stem).copied()),
        }
        .ok_or_else(|| DataError::UnlabeledFile(path.display().to_string()))?;

        if !seen.insert(stem.clone()) {
            return Err(DataError::DuplicateSampleId(stem));
        }
        entries.push(ManifestEntry {
            path: path.display().to_string(),
            sample_id: stem,
            label,
        });
    }
    Ok(DatasetManifest {
        entries,
        seed: 0,
        notes: String::new(),
    })
}

/// splitmix64 output stream.
///
/// `state += 0x9E3779B97F4A7C15`, then the standard xor-shift-multiply
/// finalizer. Entry `i` in manifest order receives the `(i+1)`-th output as
/// its shuffle key.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Per-class train quotas: `floor(frac * n_c)` each, plus one for the
/// classes with the largest fractional remainders until the total reaches
/// `round(frac * n)`. Remainder ties go to the lower class.
fn class_quotas(counts: &BTreeMap<Label, usize>, frac: f64) -> BTreeMap<Label, usize> {
    const EPS: f64 = 1e-9;
    let n: usize = counts.values().sum();
    let target = (frac * n as f64 + EPS).round() as usize;
    let mut quotas: BTreeMap<Label, usize> = BTreeMap::new();
    let mut rems: Vec<(f64, Label)> = Vec::new();
    for (&label, &c) in counts {
        let exact = frac * c as f64;
        let base = ((exact + EPS).floor() as usize).min(c);
        quotas.insert(label, base);
        rems.push((exact - base as f64, label));
    }
    rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut assigned: usize = quotas.values().sum();
    for (_, label) in rems {
        if assigned >= target {
            break;
        }
        let q = quotas.get_mut(&label).unwrap();
        if *q < counts[&label] {
            *q += 1;
            assigned += 1;
        }
    }
    quotas
}

/// Stratified split over a label sequence. Returns (train, eval) index lists,
/// each in ascending (original) order.
pub fn stratified_split_indices(labels: &[Label], train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(DataError::BadFraction(train_frac));
    }
    let mut rng = SplitMix64::new(seed);
    let keys: Vec<u64> = labels.iter().map(|_| rng.next_u64()).collect();

    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    for class in [Label::Control, Label::Ad] {
        if !labels.is_empty() && !by_class.contains_key(&class) {
            return Err(DataError::DegenerateClass(class));
        }
    }
    let counts = by_class.iter().map(|(l, v)| (*l, v.len())).collect();
    let quotas = class_quotas(&counts, train_frac);

    let mut is_train = vec![false; labels.len()];
    for (label, mut idx) in by_class {
        idx.sort_by_key(|&i| (keys[i], i));
        for &i in idx.iter().take(quotas[&label]) {
            is_train[i] = true;
        }
    }
    let (train, eval): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| is_train[i]);
    Ok((train, eval))
}

/// Stratified, seeded split of a manifest. Entry order is preserved within
/// each half.
pub fn split(manifest: &DatasetManifest, train_frac: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    let labels: Vec<Label> = manifest.entries.iter().map(|e| e.label).collect();
    let (train_idx, eval_idx) = stratified_split_indices(&labels, train_frac, seed)?;
    let pick = |idx: &[usize], part: &str| DatasetManifest {
        entries: idx.iter().map(|&i| manifest.entries[i].clone()).collect(),
        seed,
        notes: format!("{part} split, train_frac={train_frac}, seed={seed}"),
    };
    Ok((pick(&train_idx, "train"), pick(&eval_idx, "eval")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub sample_id: String,
    pub plain: String,
    pub marked: String,
    pub label: Label,
    pub removed_marker_count: usize,
}

/// Builds the plain/marked pair for one parsed transcript.
pub fn pair_from_transcript(
    t: &chat::Transcript,
    sample_id: &str,
    label: Label,
    speaker_filter: Option<&str>,
    opts: MarkerOptions,
) -> PairRecord {
    let marked = t
        .utterances
        .iter()
        .filter(|u| speaker_filter.is_none_or(|s| u.speaker == s))
        .map(|u| u.raw_text.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    let stripped = MarkerSet::for_options(opts).strip(&marked);
    PairRecord {
        sample_id: sample_id.to_string(),
        removed_marker_count: stripped.removed_count(),
        plain: stripped.plain,
        marked,
        label,
    }
}

/// Pairs for every manifest entry, in manifest order. Files are parsed in
/// parallel; a failing file yields an `Err` in its slot.
pub fn make_pairs(
    manifest: &DatasetManifest,
    speaker_filter: Option<&str>,
    opts: MarkerOptions,
) -> Vec<Result<PairRecord, DataError>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let t = chat::parse_chat_file(&e.path).map_err(|source| DataError::Parse {
                path: e.path.clone(),
                source,
            })?;
            Ok(pair_from_transcript(&t, &e.sample_id, e.label, speaker_filter, opts))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn manifest(n_ad: usize, n_ctl: usize) -> DatasetManifest {
        let entries = (0..n_ad + n_ctl)
            .map(|i| ManifestEntry {
                path: format!("f{i}.cha"),
                sample_id: format!("s{i}"),
                label: if i % (n_ad + n_ctl).max(1) < n_ad { Label::Ad } else { Label::Control },
            })
            .collect();
        DatasetManifest {
            entries,
            seed: 0,
            notes: String::new(),
        }
    }

    #[test]
    fn splitmix_reference_values() {
        // Published splitmix64 outputs for seed 1234567.
        let mut r = SplitMix64::new(1234567);
        assert_eq!(r.next_u64(), 6457827717110365317);
        assert_eq!(r.next_u64(), 3203168211198807973);
        assert_eq!(r.next_u64(), 9817491932198370423);
    }

    #[test]
    fn balanced_ten() {
        let m = manifest(5, 5);
        for seed in 0..20 {
            let (tr, ev) = split(&m, 0.8, seed).unwrap();
            assert_eq!(tr.entries.len(), 8);
            assert_eq!(ev.entries.len(), 2);
            assert_eq!(tr.label_counts()[&Label::Ad], 4);
            assert_eq!(ev.label_counts()[&Label::Control], 1);
        }
    }

    #[test]
    fn deterministic_and_partition() {
        let m = manifest(1044, 247);
        let a = split(&m, 0.8, 7).unwrap();
        let b = split(&m, 0.8, 7).unwrap();
        assert_eq!(a, b);
        let c = split(&m, 0.8, 8).unwrap();
        assert_ne!(a.0.entries, c.0.entries);

        let (tr, ev) = a;
        assert_eq!(tr.entries.len(), 1033);
        let counts = tr.label_counts();
        assert_eq!(counts[&Label::Ad], 835);
        assert_eq!(counts[&Label::Control], 198);
        let ids: HashSet<_> = tr.entries.iter().chain(&ev.entries).map(|e| &e.sample_id).collect();
        assert_eq!(ids.len(), 1291);
    }

    #[test]
    fn degenerate_class() {
        let m = manifest(4, 0);
        assert!(matches!(split(&m, 0.8, 1), Err(DataError::DegenerateClass(Label::Control))));
    }

    #[test]
    fn subdir_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("ad")).unwrap();
        fs::create_dir_all(dir.path().join("control")).unwrap();
        fs::write(dir.path().join("ad/a1.cha"), "*PAR:\thi\n").unwrap();
        fs::write(dir.path().join("ad/a2.cha"), "*PAR:\thi\n").unwrap();
        fs::write(dir.path().join("control/c1.cha"), "*PAR:\thi\n").unwrap();
        fs::write(dir.path().join("control/notes.txt"), "x").unwrap();
        let rule = LabelRule::BySubdir(HashMap::from([
            ("ad".to_string(), Label::Ad),
            ("control".to_string(), Label::Control),
        ]));
        let m = build_manifest(dir.path(), &rule).unwrap();
        let labels: Vec<_> = m.entries.iter().map(|e| e.label).collect();
        assert_eq!(labels, vec![Label::Ad, Label::Ad, Label::Control]);

        fs::write(dir.path().join("stray.cha"), "").unwrap();
        assert!(matches!(build_manifest(dir.path(), &rule), Err(DataError::UnlabeledFile(_))));

        fs::remove_file(dir.path().join("stray.cha")).unwrap();
        fs::create_dir_all(dir.path().join("control/sub")).unwrap();
        fs::write(dir.path().join("control/sub/a1.cha"), "").unwrap();
        assert!(matches!(build_manifest(dir.path(), &rule), Err(DataError::DuplicateSampleId(_))));
    }

    #[test]
    fn empty_dir_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_manifest(dir.path(), &LabelRule::BySubdir(HashMap::new())).unwrap();
        assert!(m.entries.is_empty());
    }

    #[test]
    fn csv_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x.cha"), "").unwrap();
        fs::write(dir.path().join("y.cha"), "").unwrap();
        let csv_path = dir.path().join("labels.csv");
        fs::write(&csv_path, "sample_id,label\nx,1\ny,0\n").unwrap();
        let m = build_manifest(dir.path(), &LabelRule::ByCsv(csv_path.clone())).unwrap();
        assert_eq!(m.entries[0].label, Label::Ad);
        assert_eq!(m.entries[1].label, Label::Control);

        fs::write(&csv_path, "x,1\ny,0\n").unwrap();
        assert!(matches!(
            build_manifest(dir.path(), &LabelRule::ByCsv(csv_path)),
            Err(DataError::Csv(_))
        ));
    }

    #[test]
    fn pairs_on_excerpt() {
        let t = chat::parse_chat(chat::EXCERPT).unwrap();
        let p = pair_from_transcript(&t, "ex", Label::Ad, Some("PAR"), MarkerOptions::default());
        assert!(p.marked.contains("uh uh ((laughs))"));
        assert!(p.plain.contains("((laughs))"));
        assert!(!p.marked.contains("What is he doing"));
        assert_eq!(p.removed_marker_count, 0);

        let p = pair_from_transcript(&t, "ex", Label::Ad, Some("PAR"), MarkerOptions { extended: true });
        assert!(!p.plain.contains("((laughs))"));
        assert_eq!(p.removed_marker_count, 2);
        assert_eq!(crate::markers::MarkerSet::extended().strip(&p.marked).plain, p.plain);
    }

    #[test]
    fn planted_markers_counted() {
        let src = "@Begin\n*PAR:\tthe &-uh boy [/] boy is\n%mor:\tdet|the [x]\n*INV:\tmhm <yes> +<\n*PAR:\txxx &=laughs [+ gram]\n@End\n";
        let t = chat::parse_chat(src).unwrap();
        let p = pair_from_transcript(&t, "s", Label::Ad, None, MarkerOptions::default());
        assert_eq!(p.removed_marker_count, 7);
        assert_eq!(p.plain, "the boy boy is\nmhm\n");
        assert_eq!(p.marked.lines().count(), 3);
    }

    #[test]
    fn make_pairs_reports_parse_failures_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.cha");
        let bad = dir.path().join("bad.cha");
        fs::write(&good, "*PAR:\tclean words\n").unwrap();
        fs::write(&bad, "%mor:\tx\n").unwrap();
        let m = DatasetManifest {
            entries: vec![
                ManifestEntry { path: good.display().to_string(), sample_id: "good".into(), label: Label::Control },
                ManifestEntry { path: bad.display().to_string(), sample_id: "bad".into(), label: Label::Ad },
            ],
            seed: 0,
            notes: String::new(),
        };
        let out = make_pairs(&m, None, MarkerOptions::default());
        assert_eq!(out.len(), 2);
        let p = out[0].as_ref().unwrap();
        assert_eq!(p.plain, p.marked);
        assert!(matches!(out[1], Err(DataError::Parse { .. })));
    }
}
