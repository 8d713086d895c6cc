//! The linguistic marker set: extraction, stripping and category counts.
//!
//! Patterns are applied in id order. Bytes claimed by an earlier pattern are
//! removed from view for all later ones: each later pattern only searches the
//! maximal unclaimed segments, and segment edges behave like text edges
//! (including for `\b`). This is what keeps `[+ gram]` in the
//! "Grammatical/exclamation" category instead of the catch-all bracket
//! pattern 7.
//!
//! Regexes are compiled in ASCII mode: `\w` is `[A-Za-z0-9_]` and `\s` is
//! ASCII whitespace. Every pattern starts and ends on an ASCII byte, so match
//! spans are always valid `str` boundaries. Note that pattern 4 also accepts
//! the empty bracket `[]`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::bytes::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

/// Source of one builtin marker pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatternSpec {
    pub id: u8,
    pub regex: &'static str,
    pub category: &'static str,
    pub description: &'static str,
}

pub const BUILTIN_PATTERNS: [PatternSpec; 10] = [
    PatternSpec {
        id: 1,
        regex: r"&-\w+",
        category: "Filled pauses",
        description: "filled pause such as &-uh, &-um",
    },
    PatternSpec {
        id: 2,
        regex: r"&=\w+[:\w]*",
        category: "Non-verbal sounds",
        description: "non-verbal sound such as &=clears_throat, &=sighs",
    },
    PatternSpec {
        id: 3,
        regex: r"\[\+\s*[^\]]*\]",
        category: "Grammatical/exclamation",
        description: "post-code such as [+ gram], [+ exc]",
    },
    PatternSpec {
        id: 4,
        regex: r"\[/?/?\]",
        category: "Retracing",
        description: "repetition/retracing such as [/], [//]",
    },
    PatternSpec {
        id: 5,
        regex: r"\[:\s*[^\]]*\]",
        category: "Replacement",
        description: "target replacement such as [: word]",
    },
    PatternSpec {
        id: 6,
        regex: r"<[^>]*>",
        category: "Uncertain/omitted",
        description: "angle-bracket scope such as <word>",
    },
    PatternSpec {
        id: 7,
        regex: r"\[[^\]]*\]",
        category: "Any brackets",
        description: "any other square-bracket code such as [xxx]",
    },
    PatternSpec {
        id: 8,
        regex: r"\+<|\+>",
        category: "Other markers",
        description: "linkers +< and +>",
    },
    PatternSpec {
        id: 9,
        regex: r"\(\.+\)",
        category: "Pause markers",
        description: "pauses (.), (..), (...)",
    },
    PatternSpec {
        id: 10,
        regex: r"\bxxx\b",
        category: "Unintelligible",
        description: "unintelligible word xxx",
    },
];

/// Opt-in pattern for CHAT non-verbal actions such as `((laughs))`.
pub const NONVERBAL_ACTION_PATTERN: PatternSpec = PatternSpec {
    id: 11,
    regex: r"\(\([^)]*\)\)",
    category: "Non-verbal actions",
    description: "non-verbal action such as ((laughs)) (extended mode only)",
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerMatch {
    pub pattern_id: u8,
    pub category: String,
    /// Byte offset, inclusive.
    pub start: usize,
    /// Byte offset, exclusive.
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MarkerOptions {
    /// Also strip `((...))` non-verbal actions.
    pub extended: bool,
}

#[derive(Debug)]
struct CompiledPattern {
    spec: PatternSpec,
    re: Regex,
}

/// An ordered, compiled marker set. Order is priority.
#[derive(Debug)]
pub struct MarkerSet {
    patterns: Vec<CompiledPattern>,
}

fn compile(spec: PatternSpec) -> CompiledPattern {
    let re = RegexBuilder::new(spec.regex)
        .unicode(false)
        .build()
        .expect("builtin marker regex compiles");
    CompiledPattern { spec, re }
}

impl MarkerSet {
    pub fn builtin() -> &'static MarkerSet {
        static SET: OnceLock<MarkerSet> = OnceLock::new();
        SET.get_or_init(|| MarkerSet {
            patterns: BUILTIN_PATTERNS.iter().copied().map(compile).collect(),
        })
    }

    pub fn extended() -> &'static MarkerSet {
        static SET: OnceLock<MarkerSet> = OnceLock::new();
        SET.get_or_init(|| MarkerSet {
            patterns: BUILTIN_PATTERNS
                .iter()
                .copied()
                .chain(std::iter::once(NONVERBAL_ACTION_PATTERN))
                .map(compile)
                .collect(),
        })
    }

    pub fn for_options(opts: MarkerOptions) -> &'static MarkerSet {
        if opts.extended {
            Self::extended()
        } else {
            Self::builtin()
        }
    }

    pub fn specs(&self) -> impl Iterator<Item = &PatternSpec> {
        self.patterns.iter().map(|p| &p.spec)
    }

    pub fn category(&self, id: u8) -> Option<&'static str> {
        self.specs().find(|s| s.id == id).map(|s| s.category)
    }

    pub fn extract(&self, text: &str) -> Vec<MarkerMatch> {
        let bytes = text.as_bytes();
        // Claimed spans, kept sorted by start.
        let mut claimed: Vec<(usize, usize, u8)> = Vec::new();

        for pat in &self.patterns {
            let mut found = Vec::new();
            let mut seg_start = 0;
            for &(cs, ce, _) in claimed.iter().chain(std::iter::once(&(bytes.len(), bytes.len(), 0))) {
                if cs > seg_start {
                    let seg = &bytes[seg_start..cs];
                    found.extend(
                        pat.re
                            .find_iter(seg)
                            .filter(|m| m.end() > m.start())
                            .map(|m| (seg_start + m.start(), seg_start + m.end(), pat.spec.id)),
                    );
                }
                seg_start = ce;
            }
            if !found.is_empty() {
                claimed.extend(found);
                claimed.sort_unstable();
            }
        }

        claimed
            .into_iter()
            .map(|(start, end, id)| MarkerMatch {
                pattern_id: id,
                category: self.category(id).unwrap_or_default().to_string(),
                start,
                end,
                text: text[start..end].to_string(),
            })
            .collect()
    }

    /// Removes every marker, then normalizes horizontal whitespace.
    ///
    /// Deleting a marker can splice a new one together (`&-[/]uh` becomes
    /// `&-uh`), so extraction is repeated until the text is marker-free.
    /// `removed` holds the matches of the first pass, i.e. `extract(text)`;
    /// `cascaded` counts matches removed by later passes.
    pub fn strip(&self, text: &str) -> StripResult {
        let removed = self.extract(text);
        let mut plain = normalize_whitespace(&delete_spans(text, &removed));
        let mut cascaded = 0;
        loop {
            let again = self.extract(&plain);
            if again.is_empty() {
                break;
            }
            cascaded += again.len();
            plain = normalize_whitespace(&delete_spans(&plain, &again));
        }
        StripResult {
            plain,
            removed,
            cascaded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripResult {
    pub plain: String,
    pub removed: Vec<MarkerMatch>,
    pub cascaded: usize,
}

impl StripResult {
    pub fn removed_count(&self) -> usize {
        self.removed.len() + self.cascaded
    }
}

fn delete_spans(text: &str, matches: &[MarkerMatch]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pos = 0;
    for m in matches {
        out.push_str(&text[pos..m.start]);
        pos = m.end;
    }
    out.push_str(&text[pos..]);
    out
}

/// Collapses runs of spaces/tabs to one space and trims them at both ends
/// of every line. Line terminators are left alone.
fn normalize_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for (i, line) in text.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let (body, cr) = match line.strip_suffix('\r') {
            Some(b) => (b, "\r"),
            None => (line, ""),
        };
        let mut first = true;
        for word in body.split([' ', '\t']).filter(|w| !w.is_empty()) {
            if !first {
                out.push(' ');
            }
            out.push_str(word);
            first = false;
        }
        out.push_str(cr);
    }
    out
}

/// [`MarkerSet::extract`] with the builtin set.
pub fn extract(text: &str) -> Vec<MarkerMatch> {
    MarkerSet::builtin().extract(text)
}

/// [`MarkerSet::strip`] with the builtin set.
pub fn strip(text: &str) -> StripResult {
    MarkerSet::builtin().strip(text)
}

pub fn count_by_category(matches: &[MarkerMatch]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for m in matches {
        *counts.entry(m.category.clone()).or_insert(0) += 1;
    }
    counts
}
