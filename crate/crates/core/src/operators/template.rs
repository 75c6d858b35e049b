//! `{{placeholder}}` templates that render into prompt segments.

use std::collections::BTreeMap;

use thiserror::Error;

use super::Segment;
use crate::model::IbeArtifactRef;

pub const E1: &str = include_str!("../../resources/templates/e1.txt");
pub const E2: &str = include_str!("../../resources/templates/e2.txt");
pub const M1_M: &str = include_str!("../../resources/templates/m1_m.txt");
pub const M2_M: &str = include_str!("../../resources/templates/m2_m.txt");
pub const PARENT: &str = include_str!("../../resources/templates/parent.txt");
pub const EVIDENCE_BLOCK: &str = include_str!("../../resources/templates/evidence_block.txt");
pub const ANALYSIS_LEAD: &str = include_str!("../../resources/templates/analysis_lead.txt");
pub const PLAIN_LEAD: &str = include_str!("../../resources/templates/plain_lead.txt");
pub const DESCRIBE: &str = include_str!("../../resources/templates/describe.txt");

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template has no value for `{{{{{0}}}}}`")]
    Unbound(String),
    #[error("unterminated placeholder at byte {0}")]
    Unterminated(usize),
}

#[derive(Debug, Clone, PartialEq)]
enum Piece<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

/// Value bound to a placeholder.
#[derive(Debug, Clone)]
pub enum Fill {
    Text(String),
    Images(Vec<IbeArtifactRef>),
}

#[derive(Debug, Clone)]
pub struct Template<'a> {
    pieces: Vec<Piece<'a>>,
}

impl<'a> Template<'a> {
    pub fn parse(source: &'a str) -> Result<Self, TemplateError> {
        let mut pieces = Vec::new();
        let mut rest = source;
        let mut offset = 0;
        while let Some(start) = rest.find("{{") {
            if start > 0 {
                pieces.push(Piece::Literal(&rest[..start]));
            }
            let after = &rest[start + 2..];
            let end = after
                .find("}}")
                .ok_or(TemplateError::Unterminated(offset + start))?;
            pieces.push(Piece::Slot(after[..end].trim()));
            let consumed = start + 2 + end + 2;
            offset += consumed;
            rest = &rest[consumed..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Literal(rest));
        }
        Ok(Template { pieces })
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot(name) => Some(*name),
            Piece::Literal(_) => None,
        })
    }

    /// Renders into segments; image fills split the surrounding text.
    /// Substituted values are not rescanned for placeholders.
    pub fn render(&self, values: &BTreeMap<&str, Fill>) -> Result<Vec<Segment>, TemplateError> {
        let mut segments = Vec::new();
        let mut text = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Literal(s) => text.push_str(s),
                Piece::Slot(name) => match values.get(name) {
                    Some(Fill::Text(s)) => text.push_str(s),
                    Some(Fill::Images(refs)) => {
                        if !text.is_empty() {
                            segments.push(Segment::Text(std::mem::take(&mut text)));
                        }
                        segments.extend(refs.iter().cloned().map(Segment::Image));
                    }
                    None => return Err(TemplateError::Unbound(name.to_string())),
                },
            }
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text));
        }
        Ok(segments)
    }

    /// Text-only rendering.
    pub fn render_text(&self, values: &BTreeMap<&str, Fill>) -> Result<String, TemplateError> {
        Ok(self
            .render(values)?
            .into_iter()
            .filter_map(|s| match s {
                Segment::Text(t) => Some(t),
                Segment::Image(_) => None,
            })
            .collect())
    }
}
