//! Run configuration and the staged commands behind the `eqg` binary.
//!
//! Stages read and write under `work_dir`:
//!
//! ```text
//! corpus/{train,dev,test}.jsonl   build-corpus
//! corpus/vocab.txt                build-corpus (+ vocab.meta.json)
//! corpus/report.json              build-corpus
//! parses/<passage_id>.conllu      export-parses (or heuristic-parses)
//! tagged/<split>.jsonl            tag
//! graphs/<split>.jsonl            build-graphs
//! train/epoch-NNN.ckpt            train
//! train/best.ckpt                 train
//! train/metrics.jsonl             train
//! predictions/<split>.jsonl       generate
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use eqg_numcore::{finite_diff_check, Adam, Checkpoint, GradCheckReport, ParamStore, Tape, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_eqg_triples, build_vocab, corpus_stats, load_race_split, segment_passage, CorpusError, CorpusStats,
    EqgTriple, FileError, LengthCaps, Split, Vocabulary,
};
use crate::depgraph::{answer_guided_graph, check_spans, load_conllu, write_conllu, DepError, PassageGraph};
use crate::jsonl::{read_jsonl, write_jsonl, JsonlError, Meta, CODE_VERSION};
use crate::model::{
    read_token_vectors, seeded_rng, shuffled_indices, load_word_vectors, CopyNorm, Instance, Model, ModelConfig,
    ModelError, ModelRng,
};
use crate::synth::heuristic_parses;
use crate::tagging::{tag_triple, tags_from_string, TagError};
use crate::textmetrics::{corpus_bleu, MetricError, MetricRow};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("missing {path}: run `eqg {stage}` first")]
    MissingInput { path: PathBuf, stage: &'static str },
    #[error("checkpoint {path} has hidden size {found}, configuration asks for {expected}")]
    HiddenMismatch { path: PathBuf, expected: usize, found: usize },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Check(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Dep(#[from] DepError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Num(#[from] eqg_numcore::NumError),
}

impl PipelineError {
    /// 1 usage, 2 data, 3 failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Check(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingInput {
            path: path.to_path_buf(),
            stage,
        })
    }
}

/// Where dependency parses come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseSource {
    /// `<parse_dir>/<passage_id>.conllu` files from an external parser.
    #[default]
    Conllu,
    /// The built-in positional trees; for smoke runs without a parser.
    Heuristic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub hidden: usize,
    pub tag_dim: usize,
    pub vocab_size: usize,
    pub max_passage: usize,
    pub max_question: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub beam: usize,
    pub gcn_layers: usize,
    pub batch_size: usize,
    /// Upper bound on epochs when early stopping does not trigger.
    pub epochs: usize,
    /// Epochs without a dev BLEU-4 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub max_decode_len: usize,
    pub copy_norm: CopyNorm,
    pub parser: ParseSource,
    pub gradcheck_step: f64,
    pub gradcheck_tolerance: f64,
    pub race_dir: PathBuf,
    pub work_dir: PathBuf,
    /// Defaults to `<work_dir>/parses`.
    pub parse_dir: Option<PathBuf>,
    /// `word v1 .. vH` text file loaded into the embedding before training.
    pub word_vectors: Option<PathBuf>,
    /// Per-passage contextual vectors concatenated to the encoder input.
    pub token_vectors: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hidden: 300,
            tag_dim: 32,
            vocab_size: 45_000,
            max_passage: 400,
            max_question: 30,
            learning_rate: 0.001,
            dropout: 0.3,
            beam: 10,
            gcn_layers: 2,
            batch_size: 16,
            epochs: 20,
            patience: 3,
            seed: 42,
            clip_norm: 5.0,
            max_decode_len: 30,
            copy_norm: CopyNorm::Normalized,
            parser: ParseSource::Conllu,
            gradcheck_step: 1e-4,
            gradcheck_tolerance: 1e-4,
            race_dir: PathBuf::from("data/RACE"),
            work_dir: PathBuf::from("work"),
            parse_dir: None,
            word_vectors: None,
            token_vectors: None,
        }
    }
}

impl RunConfig {
    /// Parses TOML; a flat `key = value` file is valid TOML.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value`; the value is read as a TOML literal, falling
    /// back to a bare string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| PipelineError::Usage(format!("override {spec:?} is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        table.insert(key.to_string(), value);
        *self = table
            .try_into()
            .map_err(|e| PipelineError::Usage(format!("override {key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Usage(m.to_string()));
        if self.hidden == 0 || self.batch_size == 0 || self.beam == 0 || self.vocab_size == 0 {
            return bad("hidden, batch_size, beam and vocab_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    pub fn caps(&self) -> LengthCaps {
        LengthCaps {
            max_passage: self.max_passage,
            max_question: self.max_question,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.work_dir.clone(),
            parses: self.parse_dir.clone().unwrap_or_else(|| self.work_dir.join("parses")),
        }
    }

    fn meta(&self, stage: &str, split: Option<Split>) -> Meta {
        Meta::new(stage, &self.hash(), split.map(Split::as_str))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
    pub parses: PathBuf,
}

impl Layout {
    pub fn corpus(&self, split: Split) -> PathBuf {
        self.root.join("corpus").join(format!("{split}.jsonl"))
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("corpus/vocab.txt")
    }
    pub fn vocab_meta(&self) -> PathBuf {
        self.root.join("corpus/vocab.meta.json")
    }
    pub fn corpus_report(&self) -> PathBuf {
        self.root.join("corpus/report.json")
    }
    pub fn parse_file(&self, passage_id: &str) -> PathBuf {
        self.parses.join(format!("{passage_id}.conllu"))
    }
    pub fn tagged(&self, split: Split) -> PathBuf {
        self.root.join("tagged").join(format!("{split}.jsonl"))
    }
    pub fn graphs(&self, split: Split) -> PathBuf {
        self.root.join("graphs").join(format!("{split}.jsonl"))
    }
    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.train_dir().join(format!("epoch-{epoch:03}.ckpt"))
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.train_dir().join("best.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.train_dir().join("metrics.jsonl")
    }
    pub fn predictions(&self, split: Split) -> PathBuf {
        self.root.join("predictions").join(format!("{split}.jsonl"))
    }

    /// Highest-numbered epoch checkpoint, if any.
    pub fn latest_checkpoint(&self) -> Option<(usize, PathBuf)> {
        let entries = fs::read_dir(self.train_dir()).ok()?;
        entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let n = name.strip_prefix("epoch-")?.strip_suffix(".ckpt")?.parse().ok()?;
                Some((n, e.path()))
            })
            .max_by_key(|(n, _)| *n)
    }
}

// ---------------------------------------------------------------- corpus

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitReport {
    pub samples: usize,
    pub triples: usize,
    pub styles: BTreeMap<String, usize>,
    pub skipped_answers: usize,
    pub skipped_empty: usize,
    pub dropped_empty: usize,
    pub file_errors: Vec<FileError>,
    pub stats: Option<CorpusStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusReport {
    pub meta: Meta,
    pub splits: BTreeMap<String, SplitReport>,
    pub vocab_size: usize,
}

pub fn cmd_build_corpus(cfg: &RunConfig) -> Result<CorpusReport> {
    let layout = cfg.layout();
    let mut splits = BTreeMap::new();
    let mut train = Vec::new();
    for split in Split::ALL {
        let load = load_race_split(&cfg.race_dir, split)?;
        let build = build_eqg_triples(&load.samples, cfg.caps());
        write_jsonl(&layout.corpus(split), &cfg.meta("build-corpus", Some(split)), &build.triples)?;
        splits.insert(
            split.to_string(),
            SplitReport {
                samples: load.samples.len(),
                triples: build.triples.len(),
                styles: build.styles,
                skipped_answers: load.skipped_answers,
                skipped_empty: load.skipped_empty,
                dropped_empty: build.dropped_empty,
                file_errors: load.file_errors,
                stats: corpus_stats(&build.triples).ok(),
            },
        );
        if split == Split::Train {
            train = build.triples;
        }
    }
    if train.is_empty() {
        return Err(PipelineError::Data(format!(
            "no Specific-style training questions under {}",
            cfg.race_dir.display()
        )));
    }
    let vocab = build_vocab(&train, cfg.vocab_size)?;
    write_file(&layout.vocab(), vocab.to_text())?;
    let meta = cfg.meta("build-corpus", Some(Split::Train));
    write_file(&layout.vocab_meta(), serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n")?;
    let report = CorpusReport {
        meta,
        splits,
        vocab_size: vocab.len(),
    };
    write_file(
        &layout.corpus_report(),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    Ok(report)
}

fn read_triples(cfg: &RunConfig, split: Split) -> Result<Vec<EqgTriple>> {
    let path = cfg.layout().corpus(split);
    require(&path, "build-corpus")?;
    Ok(read_jsonl(&path)?)
}

/// Writes positional-heuristic CoNLL-U files for every passage of `split`.
/// Stands in for an external parser in smoke runs and fixtures.
pub fn cmd_heuristic_parses(cfg: &RunConfig, split: Split) -> Result<usize> {
    let layout = cfg.layout();
    let triples = read_triples(cfg, split)?;
    let mut seen = BTreeSet::new();
    for t in &triples {
        if seen.insert(t.passage_id.clone()) {
            write_file(&layout.parse_file(&t.passage_id), write_conllu(&t.passage_id, &heuristic_parses(t)))?;
        }
    }
    Ok(seen.len())
}

// ---------------------------------------------------------------- tagging

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedTriple {
    #[serde(flatten)]
    pub triple: EqgTriple,
    pub tags: String,
    pub key_sentence: usize,
    pub answer_content_words: BTreeSet<String>,
}

pub fn tag_all(triples: &[EqgTriple]) -> Result<Vec<TaggedTriple>> {
    triples
        .par_iter()
        .map(|t| {
            let seq = tag_triple(t)?;
            Ok(TaggedTriple {
                triple: t.clone(),
                tags: seq.tag_string(),
                key_sentence: seq.key_sentence,
                answer_content_words: seq.answer_content_words,
            })
        })
        .collect()
}

pub fn cmd_tag(cfg: &RunConfig, split: Split) -> Result<usize> {
    let tagged = tag_all(&read_triples(cfg, split)?)?;
    write_jsonl(&cfg.layout().tagged(split), &cfg.meta("tag", Some(split)), &tagged)?;
    Ok(tagged.len())
}

/// Tags a triples file to an explicit output path.
pub fn tag_file(cfg: &RunConfig, triples: &Path, out: &Path) -> Result<usize> {
    require(triples, "build-corpus")?;
    let tagged = tag_all(&read_jsonl(triples)?)?;
    write_jsonl(out, &cfg.meta("tag", None), &tagged)?;
    Ok(tagged.len())
}

fn read_tagged(cfg: &RunConfig, split: Split) -> Result<Vec<TaggedTriple>> {
    let path = cfg.layout().tagged(split);
    require(&path, "tag")?;
    Ok(read_jsonl(&path)?)
}

// ---------------------------------------------------------------- graphs

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub passage_id: String,
    pub graph: PassageGraph,
}

fn graph_for(cfg: &RunConfig, layout: &Layout, t: &TaggedTriple) -> Result<GraphRecord> {
    let triple = &t.triple;
    let parses = match cfg.parser {
        ParseSource::Heuristic => heuristic_parses(triple),
        ParseSource::Conllu => {
            let path = layout.parse_file(&triple.passage_id);
            require(&path, "export-parses")?;
            let doc = fs::read_to_string(&path).map_err(io_err(&path))?;
            let parses = load_conllu(&doc, &triple.passage_tokens)
                .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
            check_spans(&parses, &triple.sentence_spans)
                .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
            parses
        }
    };
    Ok(GraphRecord {
        passage_id: triple.passage_id.clone(),
        graph: answer_guided_graph(&parses, &t.answer_content_words)?,
    })
}

pub fn cmd_build_graphs(cfg: &RunConfig, split: Split) -> Result<usize> {
    let layout = cfg.layout();
    let tagged = read_tagged(cfg, split)?;
    let graphs: Vec<GraphRecord> = tagged.par_iter().map(|t| graph_for(cfg, &layout, t)).collect::<Result<_>>()?;
    write_jsonl(&layout.graphs(split), &cfg.meta("build-graphs", Some(split)), &graphs)?;
    Ok(graphs.len())
}

// ---------------------------------------------------------------- model inputs

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let path = cfg.layout().vocab();
    require(&path, "build-corpus")?;
    Ok(Vocabulary::load(&path)?)
}

fn load_token_vectors(cfg: &RunConfig) -> Result<Option<(usize, HashMap<String, Tensor>)>> {
    match &cfg.token_vectors {
        None => Ok(None),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            Ok(Some(read_token_vectors(&text)?))
        }
    }
}

/// Instances for `split`, aligned with its tagged file.
pub fn load_instances(
    cfg: &RunConfig,
    split: Split,
    vocab: &Vocabulary,
    vectors: Option<&HashMap<String, Tensor>>,
) -> Result<(Vec<TaggedTriple>, Vec<Instance>)> {
    let tagged = read_tagged(cfg, split)?;
    let gpath = cfg.layout().graphs(split);
    require(&gpath, "build-graphs")?;
    let graphs: Vec<GraphRecord> = read_jsonl(&gpath)?;
    if graphs.len() != tagged.len() {
        return Err(PipelineError::Data(format!(
            "{}: {} graphs for {} tagged triples; rerun `eqg build-graphs`",
            gpath.display(),
            graphs.len(),
            tagged.len()
        )));
    }
    let instances = tagged
        .iter()
        .zip(&graphs)
        .map(|(t, g)| {
            if g.passage_id != t.triple.passage_id {
                return Err(PipelineError::Data(format!(
                    "graph for {} aligned with triple of {}",
                    g.passage_id, t.triple.passage_id
                )));
            }
            let tags = tags_from_string(&t.tags)?;
            let pre = match vectors {
                None => None,
                Some(map) => {
                    let v = map.get(&t.triple.passage_id).ok_or_else(|| {
                        PipelineError::Data(format!("no token vectors for passage {}", t.triple.passage_id))
                    })?;
                    Some(v.clone())
                }
            };
            Ok(Instance::new(&t.triple, &tags, &g.graph, vocab, pre)?)
        })
        .collect::<Result<_>>()?;
    Ok((tagged, instances))
}

fn model_config(cfg: &RunConfig, vocab: &Vocabulary, pretrained_dim: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        hidden: cfg.hidden,
        tag_dim: cfg.tag_dim,
        gcn_layers: cfg.gcn_layers,
        dropout: cfg.dropout,
        pretrained_dim,
        copy_norm: cfg.copy_norm,
        clip_norm: cfg.clip_norm,
    }
}

// ---------------------------------------------------------------- checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub dev_bleu4: Option<f64>,
}

/// JSON header stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub code_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub model: ModelConfig,
    pub epoch: usize,
    pub global_step: u64,
    pub rng_seed: u64,
    /// ChaCha word position, as a decimal string since it is a u128.
    pub rng_word_pos: String,
    pub best_bleu4: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, model: &Model, adam: Option<&Adam>) -> Result<()> {
    let ckpt = Checkpoint {
        header: serde_json::to_string(header).expect("header serializes"),
        params: model.params.clone(),
        optimizer: adam.cloned(),
    };
    write_file(path, ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore, Option<Adam>)> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let ckpt = Checkpoint::read_from(&mut std::io::BufReader::new(file))?;
    let header: CheckpointHeader = serde_json::from_str(&ckpt.header)
        .map_err(|e| PipelineError::Data(format!("{}: bad checkpoint header: {e}", path.display())))?;
    Ok((header, ckpt.params, ckpt.optimizer))
}

fn check_hidden(path: &Path, cfg: &RunConfig, header: &CheckpointHeader) -> Result<()> {
    if header.model.hidden != cfg.hidden {
        return Err(PipelineError::HiddenMismatch {
            path: path.to_path_buf(),
            expected: cfg.hidden,
            found: header.model.hidden,
        });
    }
    Ok(())
}

fn restore_rng(seed: u64, word_pos: &str) -> Result<ModelRng> {
    let pos: u128 = word_pos
        .parse()
        .map_err(|e| PipelineError::Data(format!("bad rng position {word_pos:?}: {e}")))?;
    let mut rng = seeded_rng(seed);
    rng.set_word_pos(pos);
    Ok(rng)
}

// ---------------------------------------------------------------- training

/// Decodes every instance with beam search, in parallel, preserving order.
pub fn decode_all(model: &Model, instances: &[Instance], vocab: &Vocabulary, beam: usize, max_len: usize) -> Result<Vec<Vec<String>>> {
    instances
        .par_iter()
        .map(|inst| {
            let ids = model.beam_search(inst, beam, max_len)?;
            Ok(inst.words(&ids, vocab))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub global_step: u64,
    pub best_epoch: Option<usize>,
    pub best_bleu4: Option<f64>,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize)]
struct StepLine {
    epoch: usize,
    step: u64,
    loss: f64,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    epoch_end: &'a EpochRecord,
}

/// Keeps metric lines up to `epoch` when resuming.
fn trim_metrics(path: &Path, epoch: usize) -> Result<Vec<String>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    Ok(text
        .lines()
        .filter(|l| {
            let Ok(v) = serde_json::from_str::<serde_json::Value>(l) else {
                return false;
            };
            if v.get("meta").is_some() {
                return false;
            }
            let e = v.get("epoch").or_else(|| v.pointer("/epoch_end/epoch"));
            e.and_then(serde_json::Value::as_u64).is_some_and(|e| e as usize <= epoch)
        })
        .map(str::to_string)
        .collect())
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let layout = cfg.layout();
    let vocab = load_vocab(cfg)?;
    let vectors = load_token_vectors(cfg)?;
    let (_, train) = load_instances(cfg, Split::Train, &vocab, vectors.as_ref().map(|v| &v.1))?;
    let (dev_tagged, dev) = load_instances(cfg, Split::Dev, &vocab, vectors.as_ref().map(|v| &v.1))?;
    if train.is_empty() {
        return Err(PipelineError::Data("training split is empty".into()));
    }
    let dev_refs: Vec<Vec<String>> = dev_tagged.iter().map(|t| t.triple.question_tokens.clone()).collect();
    let mconfig = model_config(cfg, &vocab, vectors.as_ref().map_or(0, |v| v.0));

    let latest = if resume { layout.latest_checkpoint() } else { None };
    let (mut model, mut adam, mut rng, mut state) = match latest {
        Some((_, path)) => {
            let (header, params, adam) = load_checkpoint(&path)?;
            check_hidden(&path, cfg, &header)?;
            if header.model != mconfig {
                return Err(PipelineError::Usage(format!(
                    "{}: model settings differ from the configuration",
                    path.display()
                )));
            }
            let model = Model::from_params(mconfig.clone(), params)?;
            let adam = adam.ok_or_else(|| PipelineError::Data(format!("{}: no optimizer state", path.display())))?;
            let rng = restore_rng(header.rng_seed, &header.rng_word_pos)?;
            (model, adam, rng, header)
        }
        None => {
            let mut rng = seeded_rng(cfg.seed);
            let mut model = Model::new(mconfig.clone(), &mut rng)?;
            if let Some(path) = &cfg.word_vectors {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                load_word_vectors(&mut model, &vocab, &text)?;
            }
            let adam = Adam::new(&model.params, cfg.learning_rate);
            let header = CheckpointHeader {
                code_version: CODE_VERSION.to_string(),
                config_hash: cfg.hash(),
                config: cfg.clone(),
                model: mconfig.clone(),
                epoch: 0,
                global_step: 0,
                rng_seed: cfg.seed,
                rng_word_pos: String::new(),
                best_bleu4: None,
                best_epoch: None,
                bad_epochs: 0,
                stopped_early: false,
                history: Vec::new(),
            };
            (model, adam, rng, header)
        }
    };

    let mut metric_lines = vec![serde_json::to_string(&serde_json::json!({ "meta": cfg.meta("train", None) }))
        .expect("meta serializes")];
    metric_lines.extend(trim_metrics(&layout.metrics(), state.epoch)?);
    fs::create_dir_all(layout.train_dir()).map_err(io_err(&layout.train_dir()))?;

    let start_epoch = state.epoch;
    while !state.stopped_early && state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let order = shuffled_indices(train.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = model.train_step(&mut adam, &batch, &mut rng)?;
            state.global_step += 1;
            loss_sum += loss;
            batches += 1;
            metric_lines.push(
                serde_json::to_string(&StepLine {
                    epoch,
                    step: state.global_step,
                    loss,
                })
                .expect("metric serializes"),
            );
        }
        let (dev_loss, dev_bleu4) = if dev.is_empty() {
            (None, None)
        } else {
            let hyps = decode_all(&model, &dev, &vocab, cfg.beam, cfg.max_decode_len)?;
            (Some(model.eval_loss(&dev)?), Some(corpus_bleu(&hyps, &dev_refs, 4)?))
        };
        let record = EpochRecord {
            epoch,
            step: state.global_step,
            train_loss: loss_sum / batches as f64,
            dev_loss,
            dev_bleu4,
        };
        metric_lines.push(serde_json::to_string(&EpochLine { epoch_end: &record }).expect("metric serializes"));
        state.history.push(record);
        state.epoch = epoch;
        state.rng_word_pos = rng.get_word_pos().to_string();

        let improved = match (dev_bleu4, state.best_bleu4) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(b), Some(best)) => b > best,
        };
        if improved {
            state.best_bleu4 = dev_bleu4;
            state.best_epoch = Some(epoch);
            state.bad_epochs = 0;
        } else if dev_bleu4.is_some() {
            state.bad_epochs += 1;
            state.stopped_early = state.bad_epochs >= cfg.patience;
        }
        save_checkpoint(&layout.checkpoint(epoch), &state, &model, Some(&adam))?;
        if improved || dev.is_empty() {
            save_checkpoint(&layout.best_checkpoint(), &state, &model, Some(&adam))?;
        }
        write_file(&layout.metrics(), metric_lines.join("\n") + "\n")?;
    }
    Ok(TrainSummary {
        epochs_run: state.epoch - start_epoch,
        global_step: state.global_step,
        best_epoch: state.best_epoch,
        best_bleu4: state.best_bleu4,
        stopped_early: state.stopped_early,
        history: state.history,
    })
}

// ---------------------------------------------------------------- generation

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub passage_id: String,
    pub prediction: String,
    pub reference: String,
}

/// Loads `checkpoint`, or the best one, or the latest epoch.
pub fn load_trained_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(CheckpointHeader, Model)> {
    let layout = cfg.layout();
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None if layout.best_checkpoint().exists() => layout.best_checkpoint(),
        None => layout
            .latest_checkpoint()
            .map(|(_, p)| p)
            .unwrap_or_else(|| layout.best_checkpoint()),
    };
    require(&path, "train")?;
    let (header, params, _) = load_checkpoint(&path)?;
    check_hidden(&path, cfg, &header)?;
    let model = Model::from_params(header.model.clone(), params)?;
    Ok((header, model))
}

pub fn cmd_generate(cfg: &RunConfig, split: Split, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
    let (_, model) = load_trained_model(cfg, checkpoint)?;
    let vocab = load_vocab(cfg)?;
    if model.config.vocab_size != vocab.len() {
        return Err(PipelineError::Data(format!(
            "checkpoint vocabulary has {} entries, corpus vocabulary {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    let vectors = load_token_vectors(cfg)?;
    let (tagged, instances) = load_instances(cfg, split, &vocab, vectors.as_ref().map(|v| &v.1))?;
    let hyps = decode_all(&model, &instances, &vocab, cfg.beam, cfg.max_decode_len)?;
    let preds: Vec<Prediction> = tagged
        .iter()
        .zip(hyps)
        .map(|(t, h)| Prediction {
            passage_id: t.triple.passage_id.clone(),
            prediction: h.join(" "),
            reference: t.triple.question_tokens.join(" "),
        })
        .collect();
    let path = out.map_or_else(|| cfg.layout().predictions(split), Path::to_path_buf);
    write_jsonl(&path, &cfg.meta("generate", Some(split)), &preds)?;
    Ok(path)
}

// ---------------------------------------------------------------- evaluation

/// Token sequences from a predictions, triples or plain-text file.
///
/// JSON lines contribute their `prediction`, `question_tokens` or
/// `question` field; other lines are whitespace-tokenized. Everything is
/// lowercased.
pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let split = |s: &str| s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if !line.trim_start().starts_with('{') {
            if !line.trim().is_empty() {
                out.push(split(line));
            }
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| PipelineError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v.get("meta").is_some() {
            continue;
        }
        let tokens = if let Some(s) = v.get("prediction").and_then(|x| x.as_str()) {
            split(s)
        } else if let Some(arr) = v.get("question_tokens").and_then(|x| x.as_array()) {
            arr.iter().filter_map(|t| t.as_str()).map(str::to_lowercase).collect()
        } else if let Some(s) = v.get("question").and_then(|x| x.as_str()) {
            split(s)
        } else {
            return Err(PipelineError::Data(format!(
                "{}:{}: no prediction, question_tokens or question field",
                path.display(),
                i + 1
            )));
        };
        out.push(tokens);
    }
    Ok(out)
}

pub fn cmd_evaluate(pred: &Path, reference: &Path) -> Result<MetricRow> {
    require(pred, "generate")?;
    require(reference, "build-corpus")?;
    let cands = read_sentences(pred)?;
    let refs = read_sentences(reference)?;
    if cands.len() != refs.len() {
        return Err(PipelineError::Data(format!(
            "{} predictions for {} references",
            cands.len(),
            refs.len()
        )));
    }
    Ok(MetricRow::compute(&cands, &refs)?)
}

// ---------------------------------------------------------------- gradient check

/// The toy model and instance used by the end-to-end gradient check:
/// hidden 2, 11-word vocabulary, 8-token passage, dropout off.
pub fn gradcheck_toy() -> (Model, Instance) {
    let (passage_tokens, sentence_spans) = segment_passage("tom has a dog . it runs .");
    let triple = EqgTriple {
        passage_id: "toy".into(),
        passage_tokens,
        sentence_spans,
        answer_tokens: vec!["a".into(), "dog".into()],
        question_tokens: vec!["what".into(), "has".into(), "tom".into(), "runs".into()],
    };
    let vocab = Vocabulary::from_words(["tom", "has", "a", "dog", ".", "what", "?"].map(String::from));
    let tags = tag_triple(&triple).expect("toy triple tags");
    let graph = answer_guided_graph(&heuristic_parses(&triple), &tags.answer_content_words).expect("toy graph");
    let inst = Instance::new(&triple, &tags.tags, &graph, &vocab, None).expect("toy instance");
    let config = ModelConfig {
        vocab_size: vocab.len(),
        hidden: 2,
        tag_dim: 2,
        gcn_layers: 2,
        dropout: 0.0,
        pretrained_dim: 0,
        copy_norm: CopyNorm::Normalized,
        clip_norm: 0.0,
    };
    let mut rng = seeded_rng(1);
    let mut model = Model::new(config, &mut rng).expect("toy model");
    // Default init is tiny; wider weights exercise every nonlinearity.
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = eqg_numcore::params::uniform(&shape, 0.8, &mut rng);
    }
    (model, inst)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckOutcome {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn run_gradcheck(step: f64, tolerance: f64) -> Result<GradcheckOutcome> {
    let (model, inst) = gradcheck_toy();
    let mut params = model.params.clone();
    let report: GradCheckReport =
        finite_diff_check::<ModelError, _>(&mut params, step, |tape: &mut Tape<'_>| model.nll(tape, &inst, &mut None))?;
    let passed = report.passes(tolerance);
    Ok(GradcheckOutcome {
        max_rel_error: report.max_rel_error,
        worst: report.worst,
        coordinates: report.coordinates,
        step,
        tolerance,
        passed,
    })
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckOutcome> {
    let outcome = run_gradcheck(cfg.gradcheck_step, cfg.gradcheck_tolerance)?;
    if !outcome.passed {
        return Err(PipelineError::Check(format!(
            "max relative error {:.3e} at {:?} exceeds {:.1e}",
            outcome.max_rel_error, outcome.worst, outcome.tolerance
        )));
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let mut cfg = RunConfig::default();
        assert_eq!((cfg.hidden, cfg.tag_dim, cfg.beam, cfg.batch_size), (300, 32, 10, 16));
        cfg.apply_override("hidden=64").unwrap();
        cfg.apply_override("work_dir = /tmp/x").unwrap();
        cfg.apply_override("parser=heuristic").unwrap();
        cfg.apply_override("learning_rate=0.01").unwrap();
        assert_eq!(cfg.hidden, 64);
        assert_eq!(cfg.work_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.parser, ParseSource::Heuristic);
        assert_eq!(cfg.learning_rate, 0.01);
        assert!(matches!(cfg.apply_override("nope=1"), Err(PipelineError::Usage(_))));
        assert!(matches!(cfg.apply_override("hidden"), Err(PipelineError::Usage(_))));
        assert!(matches!(cfg.apply_override("hidden=abc"), Err(PipelineError::Usage(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.parse_dir = Some("p".into());
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let flat = RunConfig::from_toml("hidden = 8\nseed = 3\n").unwrap();
        assert_eq!((flat.hidden, flat.seed, flat.tag_dim), (8, 3, 32));
        assert_ne!(flat.hash(), cfg.hash());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Usage("x".into()).exit_code(), 1);
        assert_eq!(PipelineError::Data("x".into()).exit_code(), 2);
        assert_eq!(PipelineError::Check("x".into()).exit_code(), 3);
    }

    #[test]
    fn missing_stage_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.work_dir = dir.path().to_path_buf();
        let err = cmd_tag(&cfg, Split::Train).unwrap_err();
        assert!(err.to_string().contains("eqg build-corpus"), "{err}");
        let err = cmd_train(&cfg, false).unwrap_err();
        assert!(err.to_string().contains("build-corpus"), "{err}");
        let err = cmd_generate(&cfg, Split::Test, None, None).unwrap_err();
        assert!(err.to_string().contains("eqg train"), "{err}");
    }

    #[test]
    fn read_sentences_formats() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        fs::write(
            &p,
            "{\"meta\":{\"stage\":\"generate\",\"config_hash\":\"x\",\"code_version\":\"0\"}}\n{\"prediction\":\"What is IT ?\"}\n{\"question_tokens\":[\"a\",\"b\"]}\nplain Text\n",
        )
        .unwrap();
        let s = read_sentences(&p).unwrap();
        assert_eq!(s, vec![vec!["what", "is", "it", "?"], vec!["a", "b"], vec!["plain", "text"]]);
    }
}
