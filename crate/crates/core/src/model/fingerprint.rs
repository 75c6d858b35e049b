use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;

/// SHA-256 of whitespace-normalized policy code, hex encoded.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fingerprint(String);

impl Fingerprint {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Canonical form used for redundancy checks: line endings unified, runs of
/// spaces and tabs collapsed to one space, trailing whitespace stripped and
/// blank lines dropped.
pub fn normalize_code(code: &str) -> String {
    let unified = code.replace("\r\n", "\n").replace('\r', "\n");
    let mut out = String::with_capacity(unified.len());
    for line in unified.lines() {
        let mut collapsed = String::with_capacity(line.len());
        let mut in_run = false;
        for ch in line.chars() {
            if ch == ' ' || ch == '\t' {
                if !in_run {
                    collapsed.push(' ');
                }
                in_run = true;
            } else {
                collapsed.push(ch);
                in_run = false;
            }
        }
        let trimmed = collapsed.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        out.push_str(trimmed);
        out.push('\n');
    }
    out
}

pub fn fingerprint(code: &str) -> Result<Fingerprint, ModelError> {
    let normalized = normalize_code(code);
    if normalized.is_empty() {
        return Err(ModelError::EmptyCode);
    }
    Ok(Fingerprint(hex::encode(Sha256::digest(normalized.as_bytes()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trailing_whitespace_and_blank_lines_ignored() {
        let a = fingerprint("def f():\n return 0").unwrap();
        let b = fingerprint("def f():\n return 0   \n\n").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_content_distinct_hash() {
        let a = fingerprint("def f():\n return 0").unwrap();
        let b = fingerprint("def f():\n return 1").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn empty_code_rejected() {
        assert_eq!(fingerprint(""), Err(ModelError::EmptyCode));
        assert_eq!(fingerprint(" \n\t\r\n  "), Err(ModelError::EmptyCode));
    }

    #[test]
    fn crlf_equals_lf() {
        let a = fingerprint("def f():\r\n    return 0\r\n").unwrap();
        let b = fingerprint("def f():\n    return 0\n").unwrap();
        assert_eq!(a, b);
    }

    /// Applies a random whitespace-only edit: widen a space run, swap a space
    /// for a tab, add trailing blanks, insert blank lines or switch line
    /// endings. Operates on the text directly, independent of
    /// `normalize_code`.
    fn perturb(code: &str, rng: &mut ChaCha8Rng) -> String {
        let mut out = String::new();
        for line in code.split('\n') {
            if rng.random_bool(0.2) {
                out.push_str(if rng.random_bool(0.5) { "  \t\n" } else { "\n" });
            }
            for ch in line.chars() {
                if ch == ' ' {
                    match rng.random_range(0..4) {
                        0 => out.push('\t'),
                        1 => out.push_str("   "),
                        2 => out.push_str(" \t "),
                        _ => out.push(' '),
                    }
                } else {
                    out.push(ch);
                }
            }
            if rng.random_bool(0.3) {
                out.push_str(" \t");
            }
            out.push_str(if rng.random_bool(0.5) { "\r\n" } else { "\n" });
        }
        out
    }

    #[test]
    fn whitespace_perturbations_share_one_hash() {
        let body = include_str!("../../resources/tasks/lunar_lander_template.py");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..10_000 {
            let edited = perturb(body, &mut rng);
            seen.insert(fingerprint(&edited).unwrap());
        }
        assert_eq!(seen.len(), 1);
    }
}
