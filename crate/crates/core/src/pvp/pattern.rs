use std::fmt;

use crate::error::{config_err, PetError, Result};
use crate::pvp::{truncate_longest_first, Example};
use crate::vocab::{TokenId, TokenSequence, Vocabulary, MASK_TOKEN};

const BOUNDARY: &str = "||";
/// Token rendered at a segment boundary when the vocabulary has it.
pub const BOUNDARY_TOKEN: &str = "|";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Literal(Vec<TokenId>),
    Field(String),
    Mask,
    /// Boundary between the two text segments; carries the separator token
    /// id when the vocabulary defines one.
    Boundary(Option<TokenId>),
}

/// A cloze template with exactly one mask slot.
///
/// Source syntax: `{field}` placeholders, `[MASK]` for the slot and `||` for
/// the (optional, single) segment boundary. Everything else is literal text,
/// tokenized when the pattern is parsed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pattern {
    source: String,
    segments: Vec<Segment>,
}

impl Pattern {
    pub fn parse(source: &str, vocab: &Vocabulary) -> Result<Self> {
        let err = |message: String| PetError::Parse {
            location: format!("pattern {source:?}"),
            message,
        };
        let mut segments = Vec::new();
        let mut literal = String::new();
        let flush = |literal: &mut String, segments: &mut Vec<Segment>| {
            let ids = vocab.encode(literal);
            if !ids.is_empty() {
                segments.push(Segment::Literal(ids));
            }
            literal.clear();
        };
        let mut rest = source;
        while let Some(ch) = rest.chars().next() {
            if let Some(after) = rest.strip_prefix(MASK_TOKEN) {
                flush(&mut literal, &mut segments);
                segments.push(Segment::Mask);
                rest = after;
            } else if let Some(after) = rest.strip_prefix(BOUNDARY) {
                flush(&mut literal, &mut segments);
                segments.push(Segment::Boundary(vocab.id(BOUNDARY_TOKEN)));
                rest = after;
            } else if ch == '{' {
                let close = rest
                    .find('}')
                    .ok_or_else(|| err("unclosed field placeholder".into()))?;
                let name = &rest[1..close];
                if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
                    return Err(err(format!("invalid field name {name:?}")));
                }
                flush(&mut literal, &mut segments);
                segments.push(Segment::Field(name.to_string()));
                rest = &rest[close + 1..];
            } else {
                literal.push(ch);
                rest = &rest[ch.len_utf8()..];
            }
        }
        flush(&mut literal, &mut segments);
        let masks = segments
            .iter()
            .filter(|s| matches!(s, Segment::Mask))
            .count();
        if masks != 1 {
            return Err(err(format!("expected exactly one [MASK], found {masks}")));
        }
        let boundaries = segments
            .iter()
            .filter(|s| matches!(s, Segment::Boundary(_)))
            .count();
        if boundaries > 1 {
            return Err(err("at most one segment boundary is allowed".into()));
        }
        Ok(Self {
            source: source.to_string(),
            segments,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Referenced field names in order of first appearance.
    pub fn fields(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.segments {
            if let Segment::Field(f) = s {
                if !out.contains(&f.as_str()) {
                    out.push(f);
                }
            }
        }
        out
    }

    fn fixed_len(&self, k: usize) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Literal(ids) => ids.len(),
                Segment::Mask => k,
                Segment::Boundary(Some(_)) => 1,
                Segment::Boundary(None) | Segment::Field(_) => 0,
            })
            .sum()
    }

    pub(crate) fn apply(
        &self,
        vocab: &Vocabulary,
        x: &Example,
        k: usize,
        max_seq_length: usize,
    ) -> Result<TokenSequence> {
        if k == 0 {
            return Err(config_err("mask count k must be at least 1"));
        }
        let fixed = self.fixed_len(k);
        if fixed > max_seq_length {
            return Err(PetError::UnfittablePattern {
                needed: fixed,
                max: max_seq_length,
            });
        }
        let names = self.fields();
        let mut texts = Vec::with_capacity(names.len());
        for name in &names {
            texts.push(vocab.encode(x.field(name)?));
        }
        let weights: Vec<usize> = names
            .iter()
            .map(|n| {
                self.segments
                    .iter()
                    .filter(|s| matches!(s, Segment::Field(f) if f == n))
                    .count()
            })
            .collect();
        truncate_longest_first(&mut texts, &weights, max_seq_length - fixed);

        let mut ids = Vec::with_capacity(max_seq_length);
        for s in &self.segments {
            match s {
                Segment::Literal(lit) => ids.extend_from_slice(lit),
                Segment::Field(f) => {
                    let i = names
                        .iter()
                        .position(|n| n == f)
                        .expect("field collected above");
                    ids.extend_from_slice(&texts[i]);
                }
                Segment::Mask => ids.extend(std::iter::repeat_n(vocab.mask_id(), k)),
                Segment::Boundary(Some(t)) => ids.push(*t),
                Segment::Boundary(None) => {}
            }
        }
        Ok(TokenSequence::new(ids, vocab.mask_id()))
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::DEFAULT_SPECIALS;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(
            DEFAULT_SPECIALS
                .into_iter()
                .chain(["a", "b", "c", "?", ",", ".", "|", "yes", "no"]),
        )
        .unwrap()
    }

    #[test]
    fn parses_segments() {
        let v = vocab();
        let p = Pattern::parse("{h}? || [MASK], {p}", &v).unwrap();
        assert_eq!(p.fields(), ["h", "p"]);
        assert_eq!(p.segments().len(), 6);
        assert!(matches!(p.segments()[2], Segment::Boundary(Some(_))));
    }

    #[test]
    fn rejects_bad_patterns() {
        let v = vocab();
        assert!(Pattern::parse("{a} no mask", &v).is_err());
        assert!(Pattern::parse("[MASK] [MASK]", &v).is_err());
        assert!(Pattern::parse("{a [MASK]", &v).is_err());
        assert!(Pattern::parse("{a} || {b} || [MASK]", &v).is_err());
    }

    #[test]
    fn boundary_rendered_as_separator() {
        let v = vocab();
        let p = Pattern::parse("{h}? || [MASK], {p}", &v).unwrap();
        let x = Example::new("1", [("h", "a b"), ("p", "c")]);
        let z = p.apply(&v, &x, 1, 64).unwrap();
        let toks: Vec<&str> = z.ids().iter().map(|&i| v.token(i)).collect();
        assert_eq!(toks, ["a", "b", "?", "|", "[MASK]", ",", "c"]);
    }

    #[test]
    fn missing_field_is_an_error() {
        let v = vocab();
        let p = Pattern::parse("{h} [MASK]", &v).unwrap();
        let x = Example::new("1", [("p", "a")]);
        assert!(p.apply(&v, &x, 1, 64).is_err());
    }

    proptest! {
        #[test]
        fn truncation_properties(la in 0usize..40, lb in 0usize..40, k in 1usize..4, max in 8usize..60) {
            let v = vocab();
            let p = Pattern::parse("{h} ? || [MASK] , {p} .", &v).unwrap();
            let text = |n: usize| vec!["a"; n].join(" ");
            let x = Example::new("1", [("h", text(la)), ("p", text(lb))]);
            let z = p.apply(&v, &x, k, max).unwrap();
            prop_assert!(z.len() <= max);
            // exactly k contiguous masks
            prop_assert_eq!(z.num_masks(), k);
            let m = z.mask_positions();
            prop_assert!(m.windows(2).all(|w| w[1] == w[0] + 1));
            // literals are never removed: ? | , . remain
            let literal = z.ids().iter().filter(|&&t| t != v.id("a").unwrap() && t != v.mask_id()).count();
            prop_assert_eq!(literal, 4);
            // more room never removes more field tokens
            let z2 = p.apply(&v, &x, k, max + 1).unwrap();
            prop_assert!(z2.len() >= z.len());
        }
    }
}
