//! RACE ingestion, question-style filtering, triple emission and the
//! training vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

/// Version tag of the bundled General-question template list.
pub const GENERAL_RULES_VERSION: u32 = 1;

const GENERAL_TEMPLATES: &str = include_str!("../resources/general_templates.txt");

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("RACE split directory {0} does not exist")]
    MissingDir(PathBuf),
    #[error("empty vocabulary (max_size = 0)")]
    EmptyVocabulary,
    #[error("corpus statistics need at least one triple")]
    NoTriples,
    #[error("vocabulary file: {0}")]
    BadVocabFile(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One (article, question) pair with only the correct option kept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamSample {
    pub passage_id: String,
    pub passage_text: String,
    pub question_text: String,
    pub answer_text: String,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionStyle {
    Cloze,
    General,
    Specific,
}

/// Length caps applied when emitting triples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthCaps {
    pub max_passage: usize,
    pub max_question: usize,
}

impl Default for LengthCaps {
    fn default() -> Self {
        LengthCaps {
            max_passage: 400,
            max_question: 30,
        }
    }
}

/// A ⟨passage, answer, question⟩ unit. Sentence spans are half-open token
/// ranges that partition the passage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EqgTriple {
    pub passage_id: String,
    pub passage_tokens: Vec<String>,
    pub sentence_spans: Vec<(usize, usize)>,
    pub answer_tokens: Vec<String>,
    pub question_tokens: Vec<String>,
}

impl EqgTriple {
    pub fn sentence(&self, i: usize) -> &[String] {
        let (s, e) = self.sentence_spans[i];
        &self.passage_tokens[s..e]
    }

    pub fn sentences(&self) -> impl Iterator<Item = &[String]> {
        self.sentence_spans.iter().map(|&(s, e)| &self.passage_tokens[s..e])
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())
}

/// Whitespace split, then every punctuation character becomes its own
/// token; everything is lowercased.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if is_punct(c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_lowercase().collect());
            } else {
                word.extend(c.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Splits after `.`, `!` or `?` when followed by whitespace or the end of
/// the text. Terminators stay with their sentence.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = chars.peek().map_or(true, |(_, n)| n.is_whitespace());
            if at_boundary {
                let end = i + c.len_utf8();
                out.push(&text[start..end]);
                start = end;
            }
        }
    }
    out.push(&text[start..]);
    out.into_iter().map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Sentence-segmented, tokenized passage: tokens plus half-open spans.
pub fn segment_passage(text: &str) -> (Vec<String>, Vec<(usize, usize)>) {
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    for sentence in split_sentences(text) {
        let toks = tokenize(sentence);
        if toks.is_empty() {
            continue;
        }
        let start = tokens.len();
        tokens.extend(toks);
        spans.push((start, tokens.len()));
    }
    (tokens, spans)
}

fn general_templates() -> impl Iterator<Item = &'static str> {
    GENERAL_TEMPLATES
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

pub fn classify_question_style(question: &str) -> QuestionStyle {
    if question.contains('_') {
        return QuestionStyle::Cloze;
    }
    let lower = question.to_lowercase();
    let normalized = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    if general_templates().any(|t| normalized.contains(t)) {
        QuestionStyle::General
    } else {
        QuestionStyle::Specific
    }
}

#[derive(Deserialize)]
struct RaceRecord {
    article: String,
    questions: Vec<String>,
    answers: Vec<String>,
    options: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FileError {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SplitLoad {
    pub samples: Vec<ExamSample>,
    pub file_errors: Vec<FileError>,
    /// Questions whose answer letter did not resolve to an option.
    pub skipped_answers: usize,
    /// Questions with an empty article, question or answer text.
    pub skipped_empty: usize,
}

fn passage_id_for(split: Split, rel: &Path) -> String {
    let stem = rel.with_extension("");
    let parts: Vec<String> = stem.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    format!("{}-{}", split, parts.join("-"))
}

fn answer_index(letter: &str) -> Option<usize> {
    match letter.trim() {
        "A" => Some(0),
        "B" => Some(1),
        "C" => Some(2),
        "D" => Some(3),
        _ => None,
    }
}

struct FileLoad {
    samples: Vec<ExamSample>,
    skipped_answers: usize,
    skipped_empty: usize,
}

fn load_file(path: &Path, rel: &Path, split: Split) -> Result<FileLoad, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let rec: RaceRecord = serde_json::from_str(&text).map_err(|e| format!("invalid RACE JSON: {e}"))?;
    if rec.answers.len() != rec.questions.len() || rec.options.len() != rec.questions.len() {
        return Err(format!(
            "{} questions, {} answers, {} option lists",
            rec.questions.len(),
            rec.answers.len(),
            rec.options.len()
        ));
    }
    let passage_id = passage_id_for(split, rel);
    let mut out = FileLoad {
        samples: Vec::new(),
        skipped_answers: 0,
        skipped_empty: 0,
    };
    for ((q, a), opts) in rec.questions.iter().zip(&rec.answers).zip(&rec.options) {
        let Some(answer) = answer_index(a).and_then(|i| opts.get(i)) else {
            out.skipped_answers += 1;
            continue;
        };
        if rec.article.trim().is_empty() || q.trim().is_empty() || answer.trim().is_empty() {
            out.skipped_empty += 1;
            continue;
        }
        out.samples.push(ExamSample {
            passage_id: passage_id.clone(),
            passage_text: rec.article.clone(),
            question_text: q.clone(),
            answer_text: answer.clone(),
            split,
        });
    }
    Ok(out)
}

/// Reads every file under `root/<split>` (recursively, in path order) as a
/// RACE JSON record. Malformed files are reported and skipped.
pub fn load_race_split(root: &Path, split: Split) -> Result<SplitLoad, CorpusError> {
    let dir = root.join(split.as_str());
    if !dir.is_dir() {
        return Err(CorpusError::MissingDir(dir));
    }
    let files: Vec<PathBuf> = WalkDir::new(&dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    let results: Vec<(PathBuf, Result<FileLoad, String>)> = files
        .par_iter()
        .map(|p| {
            let rel = p.strip_prefix(&dir).unwrap_or(p);
            (p.clone(), load_file(p, rel, split))
        })
        .collect();

    let mut load = SplitLoad::default();
    for (path, r) in results {
        match r {
            Ok(f) => {
                load.samples.extend(f.samples);
                load.skipped_answers += f.skipped_answers;
                load.skipped_empty += f.skipped_empty;
            }
            Err(reason) => load.file_errors.push(FileError { path, reason }),
        }
    }
    Ok(load)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TripleBuild {
    pub triples: Vec<EqgTriple>,
    pub styles: BTreeMap<String, usize>,
    /// Specific samples dropped because truncation left no passage.
    pub dropped_empty: usize,
}

/// Keeps whole leading sentences while the running token count stays
/// within `cap`.
pub fn truncate_at_sentence(tokens: &[String], spans: &[(usize, usize)], cap: usize) -> (Vec<String>, Vec<(usize, usize)>) {
    let kept: Vec<(usize, usize)> = spans.iter().copied().take_while(|&(_, e)| e <= cap).collect();
    let end = kept.last().map_or(0, |s| s.1);
    (tokens[..end].to_vec(), kept)
}

pub fn build_eqg_triples(samples: &[ExamSample], caps: LengthCaps) -> TripleBuild {
    let mut build = TripleBuild::default();
    let mut segmented: HashMap<&str, (Vec<String>, Vec<(usize, usize)>)> = HashMap::new();
    for s in samples {
        let style = classify_question_style(&s.question_text);
        *build.styles.entry(format!("{style:?}")).or_insert(0) += 1;
        if style != QuestionStyle::Specific {
            continue;
        }
        let (tokens, spans) = segmented
            .entry(s.passage_id.as_str())
            .or_insert_with(|| {
                let (t, sp) = segment_passage(&s.passage_text);
                truncate_at_sentence(&t, &sp, caps.max_passage)
            })
            .clone();
        if tokens.is_empty() {
            build.dropped_empty += 1;
            continue;
        }
        let mut question = tokenize(&s.question_text);
        question.truncate(caps.max_question);
        build.triples.push(EqgTriple {
            passage_id: s.passage_id.clone(),
            passage_tokens: tokens,
            sentence_spans: spans,
            answer_tokens: tokenize(&s.answer_text),
            question_tokens: question,
        });
    }
    build
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved entries followed by `words` in order.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`] when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(CorpusError::BadVocabFile("first four lines must be the reserved tokens".to_string()));
        }
        let mut seen = BTreeSet::new();
        for l in &lines {
            if !seen.insert(*l) {
                return Err(CorpusError::BadVocabFile(format!("duplicate token {l:?}")));
            }
        }
        Ok(Vocabulary::from_words(lines[RESERVED.len()..].iter().map(|s| s.to_string())))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }
}

/// Most frequent `max_size` tokens over passage, question and answer
/// streams of the given (training) triples; ties broken lexicographically.
pub fn build_vocab(triples: &[EqgTriple], max_size: usize) -> Result<Vocabulary, CorpusError> {
    if max_size == 0 {
        return Err(CorpusError::EmptyVocabulary);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in triples {
        for tok in t.passage_tokens.iter().chain(&t.question_tokens).chain(&t.answer_tokens) {
            *counts.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(Vocabulary::from_words(ranked.into_iter().take(max_size).map(|(t, _)| t.to_string())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub passages: usize,
    pub questions: usize,
    pub mean_passage_len: f64,
    pub mean_question_len: f64,
    pub mean_answer_len: f64,
    pub vocab: usize,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Passage length is averaged over distinct passages, question and answer
/// lengths over triples. Means are rounded to two decimals.
pub fn corpus_stats(triples: &[EqgTriple]) -> Result<CorpusStats, CorpusError> {
    if triples.is_empty() {
        return Err(CorpusError::NoTriples);
    }
    let mut passages: BTreeMap<&str, usize> = BTreeMap::new();
    let mut vocab: BTreeSet<&str> = BTreeSet::new();
    for t in triples {
        passages.insert(&t.passage_id, t.passage_tokens.len());
        for tok in t.passage_tokens.iter().chain(&t.question_tokens).chain(&t.answer_tokens) {
            vocab.insert(tok);
        }
    }
    let n = triples.len() as f64;
    Ok(CorpusStats {
        passages: passages.len(),
        questions: triples.len(),
        mean_passage_len: round2(passages.values().sum::<usize>() as f64 / passages.len() as f64),
        mean_question_len: round2(triples.iter().map(|t| t.question_tokens.len()).sum::<usize>() as f64 / n),
        mean_answer_len: round2(triples.iter().map(|t| t.answer_tokens.len()).sum::<usize>() as f64 / n),
        vocab: vocab.len(),
    })
}
