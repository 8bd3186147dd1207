//! Answer (A), key-sentence (S) and other (O) tags over passage tokens.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::EqgTriple;
use crate::textmetrics::{rouge_l_recall, MetricError};

/// Version tag of the bundled stopword list.
pub const STOPWORDS_VERSION: u32 = 1;

const STOPWORDS: &str = include_str!("../resources/stopwords_en.txt");

pub fn stopwords() -> &'static BTreeSet<String> {
    static SET: OnceLock<BTreeSet<String>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    A,
    S,
    O,
}

impl Tag {
    pub fn index(self) -> usize {
        match self {
            Tag::A => 0,
            Tag::S => 1,
            Tag::O => 2,
        }
    }

    pub fn from_char(c: char) -> Option<Tag> {
        match c {
            'A' => Some(Tag::A),
            'S' => Some(Tag::S),
            'O' => Some(Tag::O),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Tag::A => 'A',
            Tag::S => 'S',
            Tag::O => 'O',
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TagError {
    #[error("passage has no sentences")]
    NoSentences,
    #[error("key sentence {index} out of range for {count} sentences")]
    SentenceOutOfRange { index: usize, count: usize },
    #[error("{tags} tags for {tokens} passage tokens")]
    LengthMismatch { tags: usize, tokens: usize },
    #[error("invalid tag string: {0}")]
    BadTagString(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSequence {
    pub tags: Vec<Tag>,
    pub key_sentence: usize,
    pub answer_content_words: BTreeSet<String>,
}

impl TagSequence {
    pub fn tag_string(&self) -> String {
        tags_to_string(&self.tags)
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.tags.iter().filter(|t| **t == tag).count()
    }
}

pub fn tags_to_string(tags: &[Tag]) -> String {
    tags.iter().map(|t| t.as_char()).collect()
}

pub fn tags_from_string(s: &str) -> Result<Vec<Tag>, TagError> {
    s.chars()
        .map(|c| Tag::from_char(c).ok_or_else(|| TagError::BadTagString(s.to_string())))
        .collect()
}

fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| !c.is_alphanumeric())
}

/// Answer tokens minus stopwords and pure punctuation, lowercased.
pub fn content_answer_words<S: AsRef<str>>(answer: &[S], stopwords: &BTreeSet<String>) -> BTreeSet<String> {
    answer
        .iter()
        .map(|t| t.as_ref().to_lowercase())
        .filter(|t| !is_punctuation(t) && !stopwords.contains(t))
        .collect()
}

pub fn rough_answer_tags<S: AsRef<str>>(passage: &[S], content: &BTreeSet<String>) -> Vec<Tag> {
    passage
        .iter()
        .map(|t| {
            if content.contains(&t.as_ref().to_lowercase()) {
                Tag::A
            } else {
                Tag::O
            }
        })
        .collect()
}

/// Index of the sentence with the highest ROUGE-L recall against the
/// answer; the first one wins ties.
pub fn key_sentence_index<S: AsRef<str>>(sentences: &[&[S]], answer: &[S]) -> Result<usize, TagError> {
    if sentences.is_empty() {
        return Err(TagError::NoSentences);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in sentences.iter().enumerate() {
        let r = rouge_l_recall(s, answer)?;
        if r > best.1 {
            best = (i, r);
        }
    }
    Ok(best.0)
}

pub fn merge_tags(rough: &[Tag], key_sentence: usize, spans: &[(usize, usize)]) -> Result<Vec<Tag>, TagError> {
    let &(start, end) = spans.get(key_sentence).ok_or(TagError::SentenceOutOfRange {
        index: key_sentence,
        count: spans.len(),
    })?;
    let total = spans.last().map_or(0, |s| s.1);
    if total != rough.len() {
        return Err(TagError::LengthMismatch {
            tags: rough.len(),
            tokens: total,
        });
    }
    let mut tags = rough.to_vec();
    for t in &mut tags[start..end] {
        if *t != Tag::A {
            *t = Tag::S;
        }
    }
    Ok(tags)
}

pub fn tag_triple(triple: &EqgTriple) -> Result<TagSequence, TagError> {
    tag_triple_with(triple, stopwords())
}

pub fn tag_triple_with(triple: &EqgTriple, stopwords: &BTreeSet<String>) -> Result<TagSequence, TagError> {
    let content = content_answer_words(&triple.answer_tokens, stopwords);
    let rough = rough_answer_tags(&triple.passage_tokens, &content);
    let sentences: Vec<&[String]> = triple.sentences().collect();
    let key = key_sentence_index(&sentences, &triple.answer_tokens)?;
    let tags = merge_tags(&rough, key, &triple.sentence_spans)?;
    Ok(TagSequence {
        tags,
        key_sentence: key,
        answer_content_words: content,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn stopword_list_size() {
        assert_eq!(stopwords().len(), 179);
        assert!(stopwords().contains("the"));
    }

    #[test]
    fn content_words() {
        let sw = stopwords();
        assert_eq!(content_answer_words(&toks("on the playground ."), sw), BTreeSet::from(["playground".to_string()]));
        assert!(content_answer_words(&toks("the of a"), sw).is_empty());
        let w = content_answer_words(&toks("working or talking with students ."), sw);
        assert_eq!(w.into_iter().collect::<Vec<_>>(), ["students", "talking", "working"]);
    }

    #[test]
    fn rough_tags_mark_every_occurrence() {
        let content = BTreeSet::from(["fish".to_string()]);
        let tags = rough_answer_tags(&toks("fish eat fish and Fish"), &content);
        assert_eq!(tags_to_string(&tags), "AOAOA");
        assert!(rough_answer_tags(&toks("a b"), &BTreeSet::new()).iter().all(|t| *t == Tag::O));
    }

    #[test]
    fn key_sentence_rules() {
        let s0 = toks("x y");
        let s1 = toks("p q");
        let s2 = toks("the cat sat");
        let sentences: Vec<&[String]> = vec![&s0, &s1, &s2];
        assert_eq!(key_sentence_index(&sentences, &toks("the cat sat")).unwrap(), 2);
        assert_eq!(key_sentence_index(&sentences, &toks("zzz")).unwrap(), 0);
        assert!(key_sentence_index(&sentences, &[]).is_err());
    }

    #[test]
    fn merge_priority() {
        let rough = [Tag::O, Tag::A, Tag::O, Tag::A];
        let merged = merge_tags(&rough, 0, &[(0, 2), (2, 4)]).unwrap();
        assert_eq!(tags_to_string(&merged), "SAOA");
        assert_eq!(
            merge_tags(&rough, 2, &[(0, 2), (2, 4)]),
            Err(TagError::SentenceOutOfRange { index: 2, count: 2 })
        );
    }

    #[test]
    fn tag_string_round_trip() {
        let tags = tags_from_string("ASOOA").unwrap();
        assert_eq!(tags_to_string(&tags), "ASOOA");
        assert!(tags_from_string("AX").is_err());
    }
}
