//! Deterministic offline chat backend.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, CompletionRequest};
use crate::model::content_hash_of;
use crate::operators::BundlePurpose;

const FACTORS: [f64; 6] = [0.5, 0.8, 0.9, 1.1, 1.25, 1.6];

/// Answers every prompt with a well-formed response whose code is the first
/// parent's code with one numeric literal perturbed and a tuning note of
/// varying length appended. The choice is a pure function of the prompt hash
/// and the completion index.
///
/// Scripted responses keyed by prompt hash take precedence.
#[derive(Debug, Clone, Default)]
pub struct StubBackend {
    script: BTreeMap<String, String>,
}

impl StubBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_response(mut self, prompt_hash: impl Into<String>, response: impl Into<String>) -> Self {
        self.script.insert(prompt_hash.into(), response.into());
        self
    }
}

impl ChatBackend for StubBackend {
    fn name(&self) -> &str {
        "stub"
    }

    fn supports_images(&self) -> bool {
        true
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        let bundle = request.bundle;
        let prompt_hash = bundle.content_hash();
        if let Some(scripted) = self.script.get(&prompt_hash) {
            return Ok(scripted.clone());
        }
        if bundle.purpose == BundlePurpose::Describe {
            let images: Vec<_> = bundle.images().map(|r| content_hash_of(&r.content_ref)).collect();
            return Ok(format!("DESCRIPTION({})", images.join(",")));
        }

        let seed = Sha256::new()
            .chain_update(prompt_hash.as_bytes())
            .chain_update(request.completion_index.to_le_bytes())
            .finalize();
        let seed = u64::from_le_bytes(seed[..8].try_into().expect("8 bytes"));

        let ctx = &bundle.context;
        let base = ctx
            .parent_codes
            .first()
            .cloned()
            .unwrap_or_else(|| ctx.code_template.clone());
        let (mut code, change) = mutate_numeric_literal(&base, seed);
        if !code.ends_with('\n') {
            code.push('\n');
        }
        let width = ((seed >> 8) % 25) as usize;
        let tag: String = format!("{seed:016x}{:016x}", seed.rotate_left(17)).chars().take(width).collect();
        code.push_str(&format!("# tune {tag}\n"));
        let op = bundle.operator;

        let mut out = String::new();
        if op.requires_description() {
            out.push_str("'The evidence shows the parent policy behaving as its concept describes.'\n");
        }
        if op.requires_analysis() {
            out.push_str("[One tuned constant likely limits the result.]\n");
        }
        out.push_str(&format!("{{Variant of the parent policy: {change}.}}\n"));
        out.push_str("```python\n");
        out.push_str(&code);
        if !code.ends_with('\n') {
            out.push('\n');
        }
        out.push_str("```\n");
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
struct Literal {
    start: usize,
    end: usize,
    float: bool,
}

/// Numeric literals outside strings and comments.
fn numeric_literals(code: &str) -> Vec<Literal> {
    let bytes = code.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'#' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'\'' | b'"' => {
                let triple = bytes[i..].starts_with(&[c, c, c]);
                i += if triple { 3 } else { 1 };
                while i < bytes.len() {
                    if bytes[i] == b'\\' {
                        i += 2;
                        continue;
                    }
                    if triple {
                        if bytes[i..].starts_with(&[c, c, c]) {
                            i += 3;
                            break;
                        }
                    } else if bytes[i] == c || bytes[i] == b'\n' {
                        i += 1;
                        break;
                    }
                    i += 1;
                }
            }
            _ if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
            }
            _ if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) => {
                let start = i;
                let mut float = false;
                while i < bytes.len() {
                    let d = bytes[i];
                    if d.is_ascii_digit() || d == b'_' {
                        i += 1;
                    } else if d == b'.' && !float {
                        float = true;
                        i += 1;
                    } else if (d == b'e' || d == b'E')
                        && bytes
                            .get(i + 1)
                            .is_some_and(|n| n.is_ascii_digit() || *n == b'-' || *n == b'+')
                    {
                        float = true;
                        i += 2;
                    } else {
                        break;
                    }
                }
                if i < bytes.len() && (bytes[i].is_ascii_alphabetic() || bytes[i] == b'_') {
                    // hex, complex or similar; leave alone
                    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                        i += 1;
                    }
                    continue;
                }
                out.push(Literal { start, end: i, float });
            }
            _ => i += 1,
        }
    }
    out
}

fn format_float(v: f64) -> String {
    let s = format!("{:.4}", v);
    let s = s.trim_end_matches('0');
    if s.ends_with('.') {
        format!("{s}0")
    } else {
        s.to_string()
    }
}

/// Scales one numeric literal of `code` (floats preferred) by a factor
/// picked from `seed`. Code without literals gets a trailing comment so the
/// result still differs. Returns the new code and a short description.
pub fn mutate_numeric_literal(code: &str, seed: u64) -> (String, String) {
    let literals = numeric_literals(code);
    let floats: Vec<_> = literals.iter().copied().filter(|l| l.float).collect();
    let pool = if floats.is_empty() { literals } else { floats };
    if pool.is_empty() {
        let mut out = code.trim_end().to_string();
        out.push_str(&format!("\n# variant {seed:016x}\n"));
        return (out, "annotated variant".to_string());
    }
    let lit = pool[(seed % pool.len() as u64) as usize];
    let factor = FACTORS[((seed >> 32) % FACTORS.len() as u64) as usize];
    let old = &code[lit.start..lit.end];
    let value: f64 = old.replace('_', "").parse().unwrap_or(1.0);
    let new = if lit.float {
        let mut v = value * factor;
        if format_float(v) == format_float(value) {
            v = value + 0.01;
        }
        format_float(v)
    } else {
        let mut v = (value * factor).round() as i64;
        if v == value as i64 {
            v += 1;
        }
        v.max(0).to_string()
    };
    let mut out = String::with_capacity(code.len() + 4);
    out.push_str(&code[..lit.start]);
    out.push_str(&new);
    out.push_str(&code[lit.end..]);
    (out, format!("constant {old} changed to {new}"))
}
