//! Extraction of thought, code and analysis sections from model responses.
//!
//! Grammar: the thought is the first balanced top-level `{...}` span, code is
//! the first fenced block mentioning the entry point (else the first fenced
//! block, else the indented region starting at `def <entry_point>(`). For
//! analysis-bearing operators the description is the first `'...'` span and
//! the analysis the first balanced `[...]` span. Spans are looked for only
//! outside code, and consumed spans are not rescanned.

use std::ops::Range;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::OperatorKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCandidate {
    pub thought: String,
    pub code: String,
    pub description: Option<String>,
    pub analysis: Option<String>,
    pub raw: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("response is empty")]
    EmptyResponse,
    #[error("response has no braced thought")]
    MissingThought,
    #[error("response has no code block and no entry-point definition")]
    MissingCode,
    #[error("response is missing the {0} section")]
    MissingSection(&'static str),
}

struct FencedBlock {
    /// Whole block including fences.
    span: Range<usize>,
    content: String,
}

fn fenced_blocks(raw: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut cursor = 0;
    while let Some(open) = raw[cursor..].find("```").map(|i| i + cursor) {
        let body_start = open + 3;
        let (body_end, block_end) = match raw[body_start..].find("```") {
            Some(i) => (body_start + i, body_start + i + 3),
            None => (raw.len(), raw.len()),
        };
        let mut body = &raw[body_start..body_end];
        // Skip a language tag such as ```python.
        if let Some(nl) = body.find('\n') {
            let tag = &body[..nl];
            if tag.chars().all(|c| c.is_ascii_alphanumeric() || "_+-. ".contains(c)) {
                body = &body[nl + 1..];
            }
        }
        blocks.push(FencedBlock {
            span: open..block_end,
            content: tidy_code(body),
        });
        cursor = block_end;
    }
    blocks
}

fn tidy_code(code: &str) -> String {
    let trimmed = code.trim_end();
    let lines: Vec<&str> = trimmed.lines().skip_while(|l| l.trim().is_empty()).collect();
    let mut out = lines.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    out
}

fn definition_regex(entry_point: &str) -> Regex {
    Regex::new(&format!(
        r"(?m)^[ \t]*def[ \t]+{}[ \t]*\(",
        regex::escape(entry_point)
    ))
    .expect("escaped identifier forms a valid pattern")
}

/// The indented region that starts at the first `def <entry_point>(` line
/// outside `excluded`.
fn definition_region(raw: &str, entry_point: &str, excluded: &[Range<usize>]) -> Option<Range<usize>> {
    let def = definition_regex(entry_point)
        .find_iter(raw)
        .find(|m| !excluded.iter().any(|r| r.contains(&m.start())))?;
    let start = def.start();
    let mut end = raw[start..].find('\n').map_or(raw.len(), |i| start + i + 1);
    let mut last_code_end = end;
    while end < raw.len() {
        let line_end = raw[end..].find('\n').map_or(raw.len(), |i| end + i + 1);
        let line = &raw[end..line_end];
        let stripped = line.trim_end_matches(['\n', '\r']);
        if stripped.trim().is_empty() {
            end = line_end;
            continue;
        }
        if !stripped.starts_with([' ', '\t']) || stripped.trim_start().starts_with("```") {
            break;
        }
        end = line_end;
        last_code_end = end;
    }
    Some(start..last_code_end)
}

/// Characters outside `excluded`, with each excluded range replaced by a
/// newline so neighbouring prose cannot fuse into one span.
fn prose_outside(raw: &str, excluded: &[Range<usize>]) -> String {
    let mut ranges = excluded.to_vec();
    ranges.sort_by_key(|r| r.start);
    let mut out = String::with_capacity(raw.len());
    let mut cursor = 0;
    for r in ranges {
        if r.start > cursor {
            out.push_str(&raw[cursor..r.start]);
        }
        out.push('\n');
        cursor = cursor.max(r.end);
    }
    if cursor < raw.len() {
        out.push_str(&raw[cursor..]);
    }
    out
}

/// End (exclusive, byte offset just past the closer) of the balanced span
/// opened at `open`.
fn balanced_end(chars: &[(usize, char)], open: usize, opener: char, closer: char) -> Option<usize> {
    let mut depth = 0usize;
    for (k, &(_, c)) in chars.iter().enumerate().skip(open) {
        if c == opener {
            depth += 1;
        } else if c == closer {
            depth -= 1;
            if depth == 0 {
                return Some(k);
            }
        }
    }
    None
}

fn is_word(c: Option<char>) -> bool {
    c.is_some_and(|c| c.is_alphanumeric() || c == '_')
}

#[derive(Default)]
struct Sections {
    thought: Option<String>,
    description: Option<String>,
    analysis: Option<String>,
}

fn scan_sections(prose: &str, full: bool) -> Sections {
    let chars: Vec<(usize, char)> = prose.char_indices().collect();
    let text_between = |a: usize, b: usize| -> String {
        let start = chars[a].0 + chars[a].1.len_utf8();
        prose[start..chars[b].0].trim().to_string()
    };
    let mut found = Sections::default();
    let mut k = 0;
    while k < chars.len() {
        let c = chars[k].1;
        let prev = k.checked_sub(1).map(|p| chars[p].1);
        let mut next_k = k + 1;
        match c {
            '{' => {
                if let Some(end) = balanced_end(&chars, k, '{', '}') {
                    if found.thought.is_none() {
                        found.thought = Some(text_between(k, end));
                    }
                    next_k = end + 1;
                }
            }
            '[' if full => {
                if let Some(end) = balanced_end(&chars, k, '[', ']') {
                    if found.analysis.is_none() {
                        found.analysis = Some(text_between(k, end));
                    }
                    next_k = end + 1;
                }
            }
            '\'' | '\u{2018}' if full && !is_word(prev) => {
                let closer = if c == '\'' { '\'' } else { '\u{2019}' };
                let close = (k + 1..chars.len()).find(|&j| {
                    chars[j].1 == closer && !is_word(chars.get(j + 1).map(|p| p.1))
                });
                if let Some(end) = close {
                    if found.description.is_none() {
                        found.description = Some(text_between(k, end));
                    }
                    next_k = end + 1;
                }
            }
            _ => {}
        }
        k = next_k;
    }
    found
}

/// Splits a raw model response into its sections.
pub fn parse_response(op: OperatorKind, raw: &str, entry_point: &str) -> Result<ParsedCandidate, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::EmptyResponse);
    }
    let def_re = definition_regex(entry_point);
    let blocks = fenced_blocks(raw);
    let mut excluded: Vec<Range<usize>> = blocks.iter().map(|b| b.span.clone()).collect();

    let code = match blocks.iter().find(|b| def_re.is_match(&b.content)) {
        Some(block) => Some(block.content.clone()),
        None => match definition_region(raw, entry_point, &excluded) {
            Some(region) => {
                let code = tidy_code(&raw[region.clone()]);
                excluded.push(region);
                Some(code)
            }
            None => blocks.first().map(|b| b.content.clone()),
        },
    };

    let full = op.requires_description() || op.requires_analysis();
    let sections = scan_sections(&prose_outside(raw, &excluded), full);

    let thought = sections.thought.ok_or(ParseError::MissingThought)?;
    let code = code.filter(|c| !c.trim().is_empty()).ok_or(ParseError::MissingCode)?;
    let description = if op.requires_description() {
        Some(sections.description.ok_or(ParseError::MissingSection("description"))?)
    } else {
        None
    };
    let analysis = if op.requires_analysis() {
        Some(sections.analysis.ok_or(ParseError::MissingSection("analysis"))?)
    } else {
        None
    };
    Ok(ParsedCandidate {
        thought,
        code,
        description,
        analysis,
        raw: raw.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const EP: &str = "choose_action";

    #[test]
    fn minimal_exploration_response() {
        let raw = "{PD control toward pad}\n```\ndef choose_action(s, last_action, s_pre):\n    return 0\n```";
        let p = parse_response(OperatorKind::E1, raw, EP).unwrap();
        assert_eq!(p.thought, "PD control toward pad");
        assert_eq!(p.code, "def choose_action(s, last_action, s_pre):\n    return 0\n");
        assert_eq!(p.description, None);
        assert_eq!(p.analysis, None);
    }

    #[test]
    fn inline_modification_response() {
        let raw = "'lander drifts left' [gain too low] {raise gain} ```def choose_action(s, last_action, s_pre):\n    return 2\n```";
        let p = parse_response(OperatorKind::M1M, raw, EP).unwrap();
        assert_eq!(p.description.as_deref(), Some("lander drifts left"));
        assert_eq!(p.analysis.as_deref(), Some("gain too low"));
        assert_eq!(p.thought, "raise gain");
        assert!(p.code.starts_with("def choose_action("));
    }

    #[test]
    fn missing_thought() {
        let raw = "Here is code\n```python\ndef choose_action(s, a, p):\n    return 0\n```";
        assert_eq!(parse_response(OperatorKind::E1, raw, EP), Err(ParseError::MissingThought));
    }

    #[test]
    fn missing_code() {
        let raw = "{an idea without an implementation}";
        assert_eq!(parse_response(OperatorKind::E2, raw, EP), Err(ParseError::MissingCode));
    }

    #[test]
    fn missing_sections() {
        let code = "```\ndef choose_action(s, a, p):\n    return 0\n```";
        let no_desc = format!("[weak] {{idea}} {code}");
        assert_eq!(
            parse_response(OperatorKind::M1M, &no_desc, EP),
            Err(ParseError::MissingSection("description"))
        );
        let no_analysis = format!("'drifts' {{idea}} {code}");
        assert_eq!(
            parse_response(OperatorKind::M2M, &no_analysis, EP),
            Err(ParseError::MissingSection("analysis"))
        );
        // The instruction-free variant still asks for an analysis.
        assert_eq!(
            parse_response(OperatorKind::M1MNoInstr, &no_analysis, EP),
            Err(ParseError::MissingSection("analysis"))
        );
        let ok = format!("[weak] {{idea}} {code}");
        assert_eq!(parse_response(OperatorKind::M1MNoInstr, &ok, EP).unwrap().description, None);
    }

    #[test]
    fn braces_inside_code_are_ignored() {
        let raw = "```python\ndef choose_action(s, a, p):\n    d = {'k': 1}\n    return d['k']\n```\nThe idea: {use a lookup}";
        let p = parse_response(OperatorKind::E1, raw, EP).unwrap();
        assert_eq!(p.thought, "use a lookup");
        assert!(p.code.contains("d = {'k': 1}"));
    }

    #[test]
    fn nested_braces_and_brackets_balance() {
        let raw = "'the lander's tilt grows' [s[4] drifts {slowly}] {weight {angle} more} ```def choose_action(s, a, p):\n    return 1\n```";
        let p = parse_response(OperatorKind::M1M, raw, EP).unwrap();
        assert_eq!(p.description.as_deref(), Some("the lander's tilt grows"));
        assert_eq!(p.analysis.as_deref(), Some("s[4] drifts {slowly}"));
        assert_eq!(p.thought, "weight {angle} more");
    }

    #[test]
    fn entry_point_block_preferred() {
        let raw = "{idea}\n```python\nimport numpy as np\n```\n```python\ndef choose_action(s, a, p):\n    return 3\n```\n```python\nprint(choose_action([0]*8, 0, None))\n```";
        let p = parse_response(OperatorKind::E1, raw, EP).unwrap();
        assert_eq!(p.code, "def choose_action(s, a, p):\n    return 3\n");
    }

    #[test]
    fn unfenced_definition_region() {
        let raw = "{hover first}\nHere it is:\ndef choose_action(s, a, p):\n    if s[1] > 0:\n\n        return 2\n    return 0\nThis should work well.\n";
        let p = parse_response(OperatorKind::E1, raw, EP).unwrap();
        assert_eq!(
            p.code,
            "def choose_action(s, a, p):\n    if s[1] > 0:\n\n        return 2\n    return 0\n"
        );
    }

    #[test]
    fn first_fenced_block_without_definition() {
        let raw = "{idea}\n```\nx = 1\n```";
        let p = parse_response(OperatorKind::E1, raw, EP).unwrap();
        assert_eq!(p.code, "x = 1\n");
    }

    #[test]
    fn empty_response() {
        assert_eq!(parse_response(OperatorKind::E1, "  \n", EP), Err(ParseError::EmptyResponse));
    }
}
