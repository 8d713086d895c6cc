//! CHAT transcript parsing with lossless re-serialization.
//!
//! Only the constructs that matter for the analysis pipeline are modeled:
//! `*SPK:` utterance lines, `%tier:` dependent tiers, `@` headers and
//! continuation lines. Inline marks (`[//]`, `&-uh`, `((laughs))`, ...) are
//! left untouched in the utterance text; see [`crate::markers`].
//!
//! Every byte of the input is kept somewhere in the [`Transcript`] (line
//! terminators, the whitespace after the speaker colon, trailing spaces), so
//! `serialize(&parse_chat(x)?) == x` for any accepted input.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Label;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChatError {
    #[error("line {line}: dependent tier appears before any speaker line")]
    MalformedTierLine { line: usize },
    #[error("input is not valid UTF-8 (byte offset {offset})")]
    InvalidUtf8 { offset: usize },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// A `%name:` line attached to the preceding utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tier {
    pub name: String,
    /// Whitespace between the colon and the tier text, kept verbatim.
    pub separator: String,
    /// Tier text; continuation lines are joined with their original line breaks.
    pub text: String,
    /// Terminator of the last physical line ("\n", "\r\n" or "" at EOF).
    pub line_end: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub separator: String,
    /// Everything after the `*SPK:` prefix and separator, continuation lines
    /// included with their recorded line breaks.
    pub raw_text: String,
    pub tiers: Vec<Tier>,
    /// 1-based line number of the `*` line.
    pub source_line: usize,
    pub line_end: String,
}

/// Where a header line sits relative to the utterance/tier structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Anchor {
    /// Number of utterances that precede the header.
    pub utterances: usize,
    /// Number of tiers of the last preceding utterance that precede the header.
    pub tiers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderLine {
    pub text: String,
    pub line_end: String,
    pub anchor: Anchor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Transcript {
    pub id: String,
    pub header_lines: Vec<HeaderLine>,
    pub utterances: Vec<Utterance>,
    pub label: Option<Label>,
}

impl Transcript {
    pub fn speakers(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().map(|u| u.speaker.as_str())
    }
}

/// Splits `text` into (content, terminator) pairs. A trailing "\r" before
/// "\n" belongs to the terminator.
fn split_lines(text: &str) -> Vec<(&str, &str)> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        match rest.find('\n') {
            Some(i) => {
                let (content, term) = if i > 0 && rest.as_bytes()[i - 1] == b'\r' {
                    (&rest[..i - 1], &rest[i - 1..=i])
                } else {
                    (&rest[..i], &rest[i..=i])
                };
                out.push((content, term));
                rest = &rest[i + 1..];
            }
            None => {
                out.push((rest, ""));
                rest = "";
            }
        }
    }
    out
}

/// Splits `*NAME:<ws>rest` / `%NAME:<ws>rest` into (name, separator, rest).
/// The sigil has already been stripped.
fn split_labeled(line: &str) -> Option<(&str, &str, &str)> {
    let colon = line.find(':')?;
    let name = &line[..colon];
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return None;
    }
    let after = &line[colon + 1..];
    let sep_len = after
        .bytes()
        .take_while(|b| *b == b' ' || *b == b'\t')
        .count();
    Some((name, &after[..sep_len], &after[sep_len..]))
}

#[derive(Clone, Copy)]
enum Open {
    Nothing,
    Header(usize),
    Utterance,
    Tier,
}

/// Parses CHAT text into a [`Transcript`].
///
/// Line classes: `*SPK:` opens an utterance, `%tier:` attaches to the most
/// recent utterance, `@...` and anything before the first `*` line are header
/// lines. Any other line continues whatever was opened last (tier if one is
/// open, else utterance, else header). A `*` line without a well-formed
/// `SPK:` prefix is treated as a continuation line.
pub fn parse_chat(text: &str) -> Result<Transcript, ChatError> {
    let mut t = Transcript::default();
    let mut open = Open::Nothing;

    for (idx, (content, term)) in split_lines(text).into_iter().enumerate() {
        let lineno = idx + 1;

        if let Some(rest) = content.strip_prefix('*') {
            if let Some((speaker, sep, body)) = split_labeled(rest) {
                t.utterances.push(Utterance {
                    speaker: speaker.to_string(),
                    separator: sep.to_string(),
                    raw_text: body.to_string(),
                    tiers: Vec::new(),
                    source_line: lineno,
                    line_end: term.to_string(),
                });
                open = Open::Utterance;
                continue;
            }
        } else if let Some(rest) = content.strip_prefix('%') {
            let Some(utt) = t.utterances.last_mut() else {
                return Err(ChatError::MalformedTierLine { line: lineno });
            };
            if let Some((name, sep, body)) = split_labeled(rest) {
                utt.tiers.push(Tier {
                    name: name.to_string(),
                    separator: sep.to_string(),
                    text: body.to_string(),
                    line_end: term.to_string(),
                });
                open = Open::Tier;
                continue;
            }
        } else if content.starts_with('@') || t.utterances.is_empty() {
            let anchor = Anchor {
                utterances: t.utterances.len(),
                tiers: t.utterances.last().map_or(0, |u| u.tiers.len()),
            };
            // Lines before the first utterance that are not '@' lines continue
            // an open header, if any; otherwise they stand alone.
            if !content.starts_with('@') {
                if let Open::Header(h) = open {
                    let hl = &mut t.header_lines[h];
                    append_continuation(&mut hl.text, &mut hl.line_end, content, term);
                    continue;
                }
            }
            t.header_lines.push(HeaderLine {
                text: content.to_string(),
                line_end: term.to_string(),
                anchor,
            });
            open = Open::Header(t.header_lines.len() - 1);
            continue;
        }

        // Continuation line.
        match open {
            Open::Tier => {
                let tier = t
                    .utterances
                    .last_mut()
                    .and_then(|u| u.tiers.last_mut())
                    .expect("open tier");
                append_continuation(&mut tier.text, &mut tier.line_end, content, term);
            }
            Open::Utterance => {
                let u = t.utterances.last_mut().expect("open utterance");
                append_continuation(&mut u.raw_text, &mut u.line_end, content, term);
            }
            Open::Header(h) => {
                let hl = &mut t.header_lines[h];
                append_continuation(&mut hl.text, &mut hl.line_end, content, term);
            }
            // A malformed '*' line at the very top.
            Open::Nothing => {
                t.header_lines.push(HeaderLine {
                    text: content.to_string(),
                    line_end: term.to_string(),
                    anchor: Anchor::default(),
                });
                open = Open::Header(t.header_lines.len() - 1);
            }
        }
    }

    t.id = media_id(&t).unwrap_or_default();
    Ok(t)
}

fn append_continuation(text: &mut String, line_end: &mut String, content: &str, term: &str) {
    text.push_str(line_end);
    text.push_str(content);
    *line_end = term.to_string();
}

/// First field of an `@Media:` header, if present.
fn media_id(t: &Transcript) -> Option<String> {
    t.header_lines.iter().find_map(|h| {
        let rest = h.text.strip_prefix("@Media:")?;
        let first = rest.trim().split(',').next()?.trim();
        (!first.is_empty()).then(|| first.to_string())
    })
}

pub fn parse_chat_bytes(bytes: &[u8]) -> Result<Transcript, ChatError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ChatError::InvalidUtf8 {
        offset: e.valid_up_to(),
    })?;
    parse_chat(text)
}

/// Reads and parses a `.cha` file; the transcript id is the file stem.
pub fn parse_chat_file(path: impl AsRef<Path>) -> Result<Transcript, ChatError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| ChatError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut t = parse_chat_bytes(&bytes)?;
    if let Some(stem) = path.file_stem() {
        t.id = stem.to_string_lossy().into_owned();
    }
    Ok(t)
}

fn push_header(out: &mut String, h: &HeaderLine) {
    out.push_str(&h.text);
    out.push_str(&h.line_end);
}

/// Reproduces the original CHAT text of a parsed transcript.
pub fn serialize(t: &Transcript) -> String {
    let mut out = String::new();
    let mut headers = t.header_lines.iter().peekable();

    let flush = |out: &mut String, anchor: Anchor, headers: &mut std::iter::Peekable<std::slice::Iter<'_, HeaderLine>>| {
        while let Some(h) = headers.next_if(|h| h.anchor == anchor) {
            push_header(out, h);
        }
    };

    for (ui, u) in t.utterances.iter().enumerate() {
        flush(&mut out, Anchor { utterances: ui, tiers: 0 }, &mut headers);
        // Headers anchored inside the previous utterance that were not
        // flushed (out-of-range tier counts) are emitted here, in order.
        while let Some(h) = headers.next_if(|h| h.anchor.utterances <= ui) {
            push_header(&mut out, h);
        }
        out.push('*');
        out.push_str(&u.speaker);
        out.push(':');
        out.push_str(&u.separator);
        out.push_str(&u.raw_text);
        out.push_str(&u.line_end);
        for (ti, tier) in u.tiers.iter().enumerate() {
            flush(&mut out, Anchor { utterances: ui + 1, tiers: ti }, &mut headers);
            out.push('%');
            out.push_str(&tier.name);
            out.push(':');
            out.push_str(&tier.separator);
            out.push_str(&tier.text);
            out.push_str(&tier.line_end);
        }
    }
    for h in headers {
        push_header(&mut out, h);
    }
    out
}

/// Keeps only utterances spoken by `speaker`. Header lines are kept and
/// re-anchored so that serialization stays well-formed.
pub fn filter_speaker(t: &Transcript, speaker: &str) -> Transcript {
    // kept[i] = number of kept utterances among the first i utterances
    let mut kept = Vec::with_capacity(t.utterances.len() + 1);
    kept.push(0usize);
    for u in &t.utterances {
        let prev = *kept.last().unwrap();
        kept.push(prev + usize::from(u.speaker == speaker));
    }

    let header_lines = t
        .header_lines
        .iter()
        .map(|h| {
            let n = h.anchor.utterances;
            let tiers = match t.utterances[..n].iter().rposition(|u| u.speaker == speaker) {
                Some(i) if i + 1 == n => h.anchor.tiers,
                // The header follows a dropped utterance: place it after all
                // tiers of the last kept one.
                Some(i) => t.utterances[i].tiers.len(),
                None => 0,
            };
            HeaderLine {
                anchor: Anchor {
                    utterances: kept[n],
                    tiers,
                },
                ..h.clone()
            }
        })
        .collect();

    Transcript {
        id: t.id.clone(),
        header_lines,
        utterances: t
            .utterances
            .iter()
            .filter(|u| u.speaker == speaker)
            .cloned()
            .collect(),
        label: t.label,
    }
}

#[cfg(test)]
pub(crate) use tests::EXCERPT;
