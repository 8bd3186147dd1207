//! CoNLL-U ingestion, the passage-level dependency graph, sentence roles,
//! pruning and the symmetric normalized adjacency used by the GCN.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use eqg_numcore::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DepError {
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("sentence {sentence}, token {token}: head {head} out of range")]
    HeadOutOfRange { sentence: usize, token: usize, head: usize },
    #[error("sentence {sentence} has {roots} roots, expected exactly one")]
    RootCount { sentence: usize, roots: usize },
    #[error("sentence {sentence}: cyclic heads through token {token}")]
    Cycle { sentence: usize, token: usize },
    #[error("token mismatch at passage index {index}: expected {expected:?}, found {found:?}")]
    TokenMismatch { index: usize, expected: String, found: String },
    #[error("sentence blocks {found:?} do not match passage spans {expected:?}")]
    SpanMismatch { expected: Vec<(usize, usize)>, found: Vec<(usize, usize)> },
    #[error("{0} sentence roles for {1} sentences")]
    RoleCount(usize, usize),
}

/// One parsed sentence. `heads[i]` is 1-based with 0 for the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedSentence {
    pub tokens: Vec<String>,
    pub heads: Vec<usize>,
    pub deprels: Vec<String>,
}

impl ParsedSentence {
    pub fn new(tokens: Vec<String>, heads: Vec<usize>, deprels: Vec<String>) -> Self {
        ParsedSentence { tokens, heads, deprels }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks head range, a single root and acyclicity.
    pub fn validate(&self, sentence: usize) -> Result<(), DepError> {
        let n = self.len();
        for (i, &h) in self.heads.iter().enumerate() {
            if h > n {
                return Err(DepError::HeadOutOfRange { sentence, token: i + 1, head: h });
            }
        }
        let roots = self.heads.iter().filter(|&&h| h == 0).count();
        if roots != 1 {
            return Err(DepError::RootCount { sentence, roots });
        }
        for start in 1..=n {
            let mut seen = HashSet::new();
            let mut cur = start;
            while cur != 0 {
                if !seen.insert(cur) {
                    return Err(DepError::Cycle { sentence, token: start });
                }
                cur = self.heads[cur - 1];
            }
        }
        Ok(())
    }
}

fn parse_block(lines: &[(usize, &str)], sentence: usize) -> Result<ParsedSentence, DepError> {
    let mut s = ParsedSentence::new(Vec::new(), Vec::new(), Vec::new());
    for &(line, text) in lines {
        let cols: Vec<&str> = text.split('\t').collect();
        if cols.len() != 10 {
            return Err(DepError::Format {
                line,
                reason: format!("expected 10 tab-separated columns, found {}", cols.len()),
            });
        }
        // Multiword ranges and empty nodes carry no tree structure.
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| DepError::Format {
            line,
            reason: format!("bad token id {:?}", cols[0]),
        })?;
        if id != s.len() + 1 {
            return Err(DepError::Format {
                line,
                reason: format!("token id {id} out of sequence"),
            });
        }
        let head: usize = cols[6].parse().map_err(|_| DepError::Format {
            line,
            reason: format!("bad head {:?}", cols[6]),
        })?;
        s.tokens.push(cols[1].to_string());
        s.heads.push(head);
        s.deprels.push(cols[7].to_string());
    }
    s.validate(sentence)?;
    Ok(s)
}

/// Parses CoNLL-U text and checks that the concatenated lowercased forms
/// equal `expected_tokens`.
pub fn load_conllu<S: AsRef<str>>(doc: &str, expected_tokens: &[S]) -> Result<Vec<ParsedSentence>, DepError> {
    let mut sentences = Vec::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    let lines = doc.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    for (line, text) in lines.chain(std::iter::once((0, ""))) {
        if text.trim().is_empty() {
            if !block.is_empty() {
                sentences.push(parse_block(&block, sentences.len())?);
                block.clear();
            }
        } else if !text.starts_with('#') {
            block.push((line, text));
        }
    }

    let found = sentences.iter().flat_map(|s| s.tokens.iter());
    let mut count = 0;
    for (index, (f, e)) in found.zip(expected_tokens).enumerate() {
        count += 1;
        let f = f.to_lowercase();
        if f != e.as_ref() {
            return Err(DepError::TokenMismatch {
                index,
                expected: e.as_ref().to_string(),
                found: f,
            });
        }
    }
    let total: usize = sentences.iter().map(ParsedSentence::len).sum();
    if total != expected_tokens.len() {
        let index = count;
        return Err(DepError::TokenMismatch {
            index,
            expected: expected_tokens.get(index).map_or("<end>".to_string(), |t| t.as_ref().to_string()),
            found: sentences
                .iter()
                .flat_map(|s| s.tokens.iter())
                .nth(index)
                .map_or("<end>".to_string(), |t| t.to_lowercase()),
        });
    }
    Ok(sentences)
}

/// Standard 10-column CoNLL-U with a `# passage_id` header comment.
pub fn write_conllu(passage_id: &str, parses: &[ParsedSentence]) -> String {
    let mut out = format!("# passage_id = {passage_id}\n");
    for (k, s) in parses.iter().enumerate() {
        let _ = writeln!(out, "# sent_id = {}", k + 1);
        for i in 0..s.len() {
            let _ = writeln!(
                out,
                "{}\t{}\t_\t_\t_\t_\t{}\t{}\t_\t_",
                i + 1,
                s.tokens[i],
                s.heads[i],
                s.deprels.get(i).map_or("dep", String::as_str)
            );
        }
        out.push('\n');
    }
    out
}

pub fn spans_of(parses: &[ParsedSentence]) -> Vec<(usize, usize)> {
    let mut start = 0;
    parses
        .iter()
        .map(|s| {
            let span = (start, start + s.len());
            start += s.len();
            span
        })
        .collect()
}

/// Requires the parse blocks to line up with the passage sentence spans.
pub fn check_spans(parses: &[ParsedSentence], spans: &[(usize, usize)]) -> Result<(), DepError> {
    let found = spans_of(parses);
    if found != spans {
        return Err(DepError::SpanMismatch {
            expected: spans.to_vec(),
            found,
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SentenceRole {
    #[serde(rename = "S_B")]
    Bridge,
    #[serde(rename = "S_I")]
    Intermediate,
    #[serde(rename = "S_O")]
    Outside,
}

impl SentenceRole {
    pub fn label(self) -> &'static str {
        match self {
            SentenceRole::Bridge => "S_B",
            SentenceRole::Intermediate => "S_I",
            SentenceRole::Outside => "S_O",
        }
    }
}

/// Undirected token graph. Edges are stored as `(i, j)` with `i < j`;
/// tree edges and inter-sentence bridges are kept apart so pruning can
/// re-bridge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageGraph {
    pub num_nodes: usize,
    pub sentence_spans: Vec<(usize, usize)>,
    pub tree_edges: BTreeSet<(usize, usize)>,
    pub bridges: BTreeSet<(usize, usize)>,
    pub roles: Vec<SentenceRole>,
    pub retained: Vec<bool>,
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn bridges_between(spans: &[(usize, usize)]) -> BTreeSet<(usize, usize)> {
    spans
        .windows(2)
        .filter(|w| w[0].1 > w[0].0 && w[1].1 > w[1].0)
        .map(|w| ordered(w[0].1 - 1, w[1].0))
        .collect()
}

impl PassageGraph {
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        self.tree_edges.union(&self.bridges).copied().collect()
    }

    pub fn num_edges(&self) -> usize {
        self.tree_edges.len() + self.bridges.len()
    }

    /// Dense 0/1 adjacency, zero diagonal.
    pub fn adjacency(&self) -> Tensor {
        let n = self.num_nodes;
        let mut a = Tensor::zeros(&[n, n]);
        let d = a.data_mut();
        for (i, j) in self.edges() {
            d[i * n + j] = 1.0;
            d[j * n + i] = 1.0;
        }
        a
    }

    pub fn debug_json(&self, passage_id: &str) -> serde_json::Value {
        serde_json::json!({
            "passage_id": passage_id,
            "num_nodes": self.num_nodes,
            "edges": self.edges().into_iter().map(|(i, j)| [i, j]).collect::<Vec<_>>(),
            "roles": self.roles.iter().map(|r| r.label()).collect::<Vec<_>>(),
            "retained": self.retained,
        })
    }
}

pub fn build_passage_graph(parses: &[ParsedSentence]) -> PassageGraph {
    let spans = spans_of(parses);
    let mut tree_edges = BTreeSet::new();
    for (s, &(start, _)) in parses.iter().zip(&spans) {
        for (i, &h) in s.heads.iter().enumerate() {
            if h != 0 {
                tree_edges.insert(ordered(start + i, start + h - 1));
            }
        }
    }
    let num_nodes = spans.last().map_or(0, |s| s.1);
    PassageGraph {
        num_nodes,
        bridges: bridges_between(&spans),
        sentence_spans: spans,
        tree_edges,
        roles: Vec::new(),
        retained: vec![true; num_nodes],
    }
}

/// S_B if the sentence holds an answer content word, S_I if it lies
/// strictly between two S_B sentences, S_O otherwise.
pub fn classify_sentences<S: AsRef<str>>(sentences: &[&[S]], content: &BTreeSet<String>) -> Vec<SentenceRole> {
    let hits: Vec<bool> = sentences
        .iter()
        .map(|s| s.iter().any(|t| content.contains(&t.as_ref().to_lowercase())))
        .collect();
    let first = hits.iter().position(|&h| h);
    let last = hits.iter().rposition(|&h| h);
    hits.iter()
        .enumerate()
        .map(|(i, &h)| match (h, first, last) {
            (true, _, _) => SentenceRole::Bridge,
            (false, Some(f), Some(l)) if f < i && i < l => SentenceRole::Intermediate,
            _ => SentenceRole::Outside,
        })
        .collect()
}

/// Drops S_O sentences' nodes and edges, then bridges consecutive
/// retained sentences. With no retained sentence the graph stays whole.
pub fn prune_graph(graph: &PassageGraph, roles: &[SentenceRole]) -> Result<PassageGraph, DepError> {
    if roles.len() != graph.sentence_spans.len() {
        return Err(DepError::RoleCount(roles.len(), graph.sentence_spans.len()));
    }
    let mut out = graph.clone();
    out.roles = roles.to_vec();
    if roles.iter().all(|r| *r == SentenceRole::Outside) {
        out.retained = vec![true; graph.num_nodes];
        return Ok(out);
    }
    let mut retained = vec![false; graph.num_nodes];
    let mut kept_spans = Vec::new();
    for (&(s, e), role) in graph.sentence_spans.iter().zip(roles) {
        if *role != SentenceRole::Outside {
            retained[s..e].iter_mut().for_each(|r| *r = true);
            kept_spans.push((s, e));
        }
    }
    out.tree_edges.retain(|&(i, j)| retained[i] && retained[j]);
    out.bridges = bridges_between(&kept_spans);
    out.retained = retained;
    Ok(out)
}

/// `D^-1/2 (A + I) D^-1/2` over retained nodes; pruned rows and columns
/// are zero.
pub fn normalized_adjacency(graph: &PassageGraph) -> Tensor {
    let n = graph.num_nodes;
    let mut a = graph.adjacency();
    let keep = &graph.retained;
    let d = a.data_mut();
    for i in 0..n {
        for j in 0..n {
            if !keep[i] || !keep[j] {
                d[i * n + j] = 0.0;
            }
        }
        if keep[i] {
            d[i * n + i] = 1.0;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            if d[i * n + j] != 0.0 {
                d[i * n + j] /= (deg[i] * deg[j]).sqrt();
            }
        }
    }
    a
}

/// The graph of one passage after role assignment and pruning.
pub fn answer_guided_graph(
    parses: &[ParsedSentence],
    content: &BTreeSet<String>,
) -> Result<PassageGraph, DepError> {
    let graph = build_passage_graph(parses);
    let refs: Vec<&[String]> = parses.iter().map(|p| p.tokens.as_slice()).collect();
    let roles = classify_sentences(&refs, content);
    prune_graph(&graph, &roles)
}
