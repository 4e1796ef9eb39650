//! BIO / BIO2 tag sets, validation and entity chunking.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// IOB1: an entity may open with `I-`; `B-` only separates adjacent
    /// entities of one type. Every sequence over known tags is accepted.
    Bio,
    /// IOB2: every entity opens with `B-`.
    Bio2,
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bio" | "iob" | "iob1" => Ok(Scheme::Bio),
            "bio2" | "iob2" => Ok(Scheme::Bio2),
            other => Err(format!("unknown tagging scheme `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Begin(usize),
    Inside(usize),
}

impl Tag {
    pub fn entity_type(self) -> Option<usize> {
        match self {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
        }
    }
}

/// Label inventory: `O` followed by `B-X`, `I-X` for each entity type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet {
    types: Vec<String>,
}

impl Default for TagSet {
    fn default() -> Self {
        TagSet::new(&["PER", "LOC", "ORG", "MISC"])
    }
}

impl TagSet {
    pub fn new(types: &[&str]) -> Self {
        TagSet {
            types: types.iter().map(|t| t.to_string()).collect(),
        }
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn len(&self) -> usize {
        1 + 2 * self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t == name)
    }

    pub fn id(&self, tag: Tag) -> usize {
        match tag {
            Tag::Outside => 0,
            Tag::Begin(t) => 1 + 2 * t,
            Tag::Inside(t) => 2 + 2 * t,
        }
    }

    pub fn tag(&self, id: usize) -> Tag {
        match id {
            0 => Tag::Outside,
            i if i % 2 == 1 => Tag::Begin((i - 1) / 2),
            i => Tag::Inside((i - 2) / 2),
        }
    }

    pub fn label(&self, id: usize) -> String {
        match self.tag(id) {
            Tag::Outside => "O".to_string(),
            Tag::Begin(t) => format!("B-{}", self.types[t]),
            Tag::Inside(t) => format!("I-{}", self.types[t]),
        }
    }

    pub fn parse(&self, label: &str) -> Option<usize> {
        if label == "O" {
            return Some(0);
        }
        let (prefix, name) = label.split_once('-')?;
        let t = self.type_index(name)?;
        match prefix {
            "B" => Some(self.id(Tag::Begin(t))),
            "I" => Some(self.id(Tag::Inside(t))),
            _ => None,
        }
    }

    /// Index of the first tag that violates `scheme`, if any.
    pub fn first_violation(&self, ids: &[usize], scheme: Scheme) -> Option<usize> {
        if scheme == Scheme::Bio {
            return None;
        }
        let mut prev = Tag::Outside;
        for (i, &id) in ids.iter().enumerate() {
            let tag = self.tag(id);
            if let Tag::Inside(t) = tag {
                if prev.entity_type() != Some(t) {
                    return Some(i);
                }
            }
            prev = tag;
        }
        None
    }

    /// Entity spans `(start, end, type)` with `end` exclusive, following the
    /// conlleval chunking rules (an `I-X` after `O` or another type opens a
    /// new entity).
    pub fn entities(&self, ids: &[usize]) -> Vec<(usize, usize, usize)> {
        let mut spans = Vec::new();
        let mut open: Option<(usize, usize)> = None;
        for (i, &id) in ids.iter().enumerate() {
            let tag = self.tag(id);
            let continues = matches!((tag, open), (Tag::Inside(t), Some((_, ot))) if t == ot);
            if continues {
                continue;
            }
            if let Some((start, t)) = open.take() {
                spans.push((start, i, t));
            }
            if let Some(t) = tag.entity_type() {
                open = Some((i, t));
            }
        }
        if let Some((start, t)) = open {
            spans.push((start, ids.len(), t));
        }
        spans
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(ts: &TagSet, labels: &[&str]) -> Vec<usize> {
        labels.iter().map(|l| ts.parse(l).unwrap()).collect()
    }

    #[test]
    fn label_round_trip() {
        let ts = TagSet::default();
        assert_eq!(ts.len(), 9);
        for id in 0..ts.len() {
            assert_eq!(ts.parse(&ts.label(id)), Some(id));
        }
        assert_eq!(ts.parse("B-FOO"), None);
        assert_eq!(ts.parse("X-PER"), None);
    }

    #[test]
    fn bio2_rejects_dangling_inside() {
        let ts = TagSet::default();
        let seq = ids(&ts, &["O", "I-LOC"]);
        assert_eq!(ts.first_violation(&seq, Scheme::Bio2), Some(1));
        assert_eq!(ts.first_violation(&seq, Scheme::Bio), None);
        let seq = ids(&ts, &["B-PER", "I-LOC"]);
        assert_eq!(ts.first_violation(&seq, Scheme::Bio2), Some(1));
        let ok = ids(&ts, &["B-PER", "I-PER", "O", "B-LOC"]);
        assert_eq!(ts.first_violation(&ok, Scheme::Bio2), None);
    }

    #[test]
    fn chunking_follows_conlleval() {
        let ts = TagSet::default();
        let seq = ids(&ts, &["B-PER", "I-PER", "O", "I-LOC", "I-LOC", "B-LOC", "I-ORG"]);
        assert_eq!(ts.entities(&seq), vec![(0, 2, 0), (3, 5, 1), (5, 6, 1), (6, 7, 2)]);
    }
}
