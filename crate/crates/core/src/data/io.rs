//! Plain-text file formats.
//!
//! * corpus / hypotheses: one sentence per line, whitespace-separated tokens
//! * traces: `src_len<TAB>tgt_len<TAB>actions`, actions over `{R, W}`
//! * alignments: one line per sentence of space-separated
//!   `role:src_idx:tgt_idx` triples, 1-based

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::grammar::{AlignmentLink, Role};
use crate::error::{Error, Result};
use crate::latency::DecodingTrace;

fn display(path: &Path) -> String {
    path.display().to_string()
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(String::from).collect()
}

/// Reads a tokenized corpus. Empty lines are rejected unless `allow_empty`
/// (hypothesis files may legitimately contain empty translations).
pub fn read_sentences(path: impl AsRef<Path>, allow_empty: bool) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let toks = tokenize(line);
            if toks.is_empty() && !allow_empty {
                Err(Error::parse(display(path), i + 1, "empty sentence"))
            } else {
                Ok(toks)
            }
        })
        .collect()
}

pub fn format_sentences<S: AsRef<str>>(sentences: &[Vec<S>]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (i, t) in s.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(t.as_ref());
        }
        out.push('\n');
    }
    out
}

pub fn write_sentences<S: AsRef<str>>(path: impl AsRef<Path>, sentences: &[Vec<S>]) -> Result<()> {
    fs::write(path, format_sentences(sentences))?;
    Ok(())
}

pub fn format_trace(trace: &DecodingTrace) -> String {
    format!("{}\t{}\t{}", trace.src_len, trace.tgt_len(), trace.actions())
}

pub fn parse_trace(line: &str) -> std::result::Result<DecodingTrace, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(format!("expected 3 tab-separated fields, found {}", fields.len()));
    }
    let src_len: usize = fields[0]
        .parse()
        .map_err(|_| format!("bad src_len `{}`", fields[0]))?;
    let tgt_len: usize = fields[1]
        .parse()
        .map_err(|_| format!("bad tgt_len `{}`", fields[1]))?;
    let trace = DecodingTrace::from_actions(fields[2]).map_err(|e| e.to_string())?;
    if trace.src_len != src_len || trace.tgt_len() != tgt_len {
        return Err(format!(
            "header says {src_len}/{tgt_len} but actions contain {} reads and {} writes",
            trace.src_len,
            trace.tgt_len()
        ));
    }
    Ok(trace)
}

pub fn write_traces(path: impl AsRef<Path>, traces: &[DecodingTrace]) -> Result<()> {
    let mut out = String::new();
    for t in traces {
        out.push_str(&format_trace(t));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<DecodingTrace>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| parse_trace(line).map_err(|m| Error::parse(display(path), i + 1, m)))
        .collect()
}

pub fn format_alignment(links: &[AlignmentLink]) -> String {
    let mut out = String::new();
    for (i, l) in links.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{}:{}:{}", l.role.name(), l.src, l.tgt);
    }
    out
}

pub fn parse_alignment(line: &str) -> std::result::Result<Vec<AlignmentLink>, String> {
    line.split_whitespace()
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            if parts.len() != 3 {
                return Err(format!("bad triple `{item}`"));
            }
            let role = Role::from_name(parts[0]).ok_or_else(|| format!("unknown role `{}`", parts[0]))?;
            let idx = |s: &str| -> std::result::Result<usize, String> {
                match s.parse::<usize>() {
                    Ok(v) if v >= 1 => Ok(v),
                    _ => Err(format!("bad index `{s}` in `{item}`")),
                }
            };
            Ok(AlignmentLink {
                role,
                src: idx(parts[1])?,
                tgt: idx(parts[2])?,
            })
        })
        .collect()
}

pub fn write_alignments(path: impl AsRef<Path>, aligns: &[Vec<AlignmentLink>]) -> Result<()> {
    let mut out = String::new();
    for a in aligns {
        out.push_str(&format_alignment(a));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_alignments(path: impl AsRef<Path>) -> Result<Vec<Vec<AlignmentLink>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| parse_alignment(line).map_err(|m| Error::parse(display(path), i + 1, m)))
        .collect()
}
