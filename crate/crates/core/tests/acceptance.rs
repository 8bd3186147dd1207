//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to
//! see the report; the test fails if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eqg_core::corpus::{build_vocab, classify_question_style, segment_passage, tokenize, EqgTriple, QuestionStyle, Split, SOS};
use eqg_core::depgraph::{answer_guided_graph, build_passage_graph, classify_sentences, normalized_adjacency, prune_graph, ParsedSentence, SentenceRole};
use eqg_core::model::{seeded_rng, shuffled_indices, CopyNorm, Instance, Model, ModelConfig};
use eqg_core::pipeline::{cmd_build_corpus, cmd_build_graphs, cmd_tag, cmd_train, load_checkpoint, run_gradcheck, RunConfig};
use eqg_core::synth::{heuristic_parses, synth_triples};
use eqg_core::tagging::{tag_triple, Tag};
use eqg_core::textmetrics::{corpus_bleu, lcs_length, rouge_l_f};
use eqg_numcore::{Adam, Tape};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let g = run_gradcheck(1e-4, 1e-4).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(g.passed, format!("max relative error {:.2e} at {:?}", g.max_rel_error, g.worst))?;
    ensure(secs < 30.0, format!("took {secs:.1} s"))?;
    Ok(format!("max rel error {:.2e} over {} coordinates in {secs:.1} s", g.max_rel_error, g.coordinates))
}

fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        let mut it = b.iter();
        if sub.len() > best && sub.iter().all(|x| it.any(|y| y == *x)) {
            best = sub.len();
        }
    }
    best
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seq = |rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..rng.gen_range(0..=8)).map(|_| ["a", "b", "c"][rng.gen_range(0..3)].to_string()).collect()
    };
    for _ in 0..1000 {
        let (a, b) = (seq(&mut rng), seq(&mut rng));
        ensure(lcs_length(&a, &b) == lcs_brute(&a, &b), format!("lcs {a:?} {b:?}"))?;
    }
    let corpus = vec![toks("what does tom buy on monday ?"), toks("where is the park ?")];
    ensure(corpus_bleu(&corpus, &corpus, 4).map_err(|e| e.to_string())? == 1.0, "bleu(x, x) != 1")?;
    let b1 = corpus_bleu(&[toks("the the the")], &[toks("the cat")], 1).map_err(|e| e.to_string())?;
    ensure((b1 - 1.0 / 3.0).abs() < 1e-9, format!("BLEU-1 {b1}"))?;
    let b2 = corpus_bleu(&[toks("the cat sat")], &[toks("the cat sat on mats")], 2).map_err(|e| e.to_string())?;
    ensure((b2 - (1.0f64 - 5.0 / 3.0).exp()).abs() < 1e-9, format!("BLEU-2 {b2}"))?;
    let f = rouge_l_f(&toks("a cat sat here"), &toks("the cat sat")).map_err(|e| e.to_string())?;
    let (p, r) = (0.5, 2.0 / 3.0);
    ensure((f - 2.44 * p * r / (r + 1.44 * p)).abs() < 1e-9, format!("ROUGE-L {f}"))?;
    Ok("1000 LCS pairs, BLEU and ROUGE fixtures within 1e-9".into())
}

fn chain(words: &[&str]) -> ParsedSentence {
    ParsedSentence::new(
        words.iter().map(|w| w.to_string()).collect(),
        (0..words.len()).collect(),
        vec!["dep".into(); words.len()],
    )
}

fn graph_fixtures() -> Outcome {
    use SentenceRole::*;
    let parses = vec![
        chain(&["rain", "fell", "."]),
        chain(&["tom", "found", "a", "fish", "."]),
        chain(&["it", "was", "big", "."]),
        chain(&["the", "fish", "swam", "."]),
        chain(&["night", "came", "."]),
    ];
    let refs: Vec<&[String]> = parses.iter().map(|p| p.tokens.as_slice()).collect();
    let roles = classify_sentences(&refs, &BTreeSet::from(["fish".to_string()]));
    ensure(roles == [Outside, Bridge, Intermediate, Bridge, Outside], format!("roles {roles:?}"))?;
    let g = prune_graph(&build_passage_graph(&parses), &roles).map_err(|e| e.to_string())?;
    let pruned: Vec<usize> = g
        .sentence_spans
        .iter()
        .enumerate()
        .filter(|(_, &(s, e))| g.retained[s..e].iter().all(|r| !r))
        .map(|(k, _)| k)
        .collect();
    ensure(pruned == [0, 4], format!("pruned sentences {pruned:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..200 {
        let n = rng.gen_range(1..=12);
        let mut parses = Vec::new();
        let mut left = n;
        while left > 0 {
            let len = rng.gen_range(1..=left.min(4));
            let mut order: Vec<usize> = (0..len).collect();
            order.shuffle(&mut rng);
            let mut heads = vec![0; len];
            for k in 1..len {
                heads[order[k]] = order[rng.gen_range(0..k)] + 1;
            }
            parses.push(ParsedSentence::new(vec!["w".into(); len], heads, vec!["dep".into(); len]));
            left -= len;
        }
        let roles: Vec<SentenceRole> = (0..parses.len()).map(|_| *[Bridge, Intermediate, Outside].choose(&mut rng).unwrap()).collect();
        let g = prune_graph(&build_passage_graph(&parses), &roles).map_err(|e| e.to_string())?;
        let a = normalized_adjacency(&g);
        let m = DMatrix::from_fn(n, n, |i, j| a.at(i, j));
        ensure((&m - m.transpose()).amax() <= 1e-12, format!("case {case} asymmetric"))?;
        let kept: Vec<usize> = (0..n).filter(|&i| g.retained[i]).collect();
        let sub = DMatrix::from_fn(kept.len(), kept.len(), |i, j| a.at(kept[i], kept[j]));
        for ev in sub.symmetric_eigen().eigenvalues.iter() {
            ensure(ev.abs() <= 1.0 + 1e-12, format!("case {case} eigenvalue {ev}"))?;
        }
    }
    Ok("[O, B, I, B, O] prunes sentences 0 and 4; 200 random graphs symmetric with spectrum in [-1, 1]".into())
}

fn sample(file: &str, answer: &str) -> EqgTriple {
    let text = fs::read_to_string(fixtures().join("sample_passages").join(file)).unwrap();
    let (passage_tokens, sentence_spans) = segment_passage(&text);
    EqgTriple {
        passage_id: file.into(),
        passage_tokens,
        sentence_spans,
        answer_tokens: tokenize(answer),
        question_tokens: vec!["?".into()],
    }
}

fn tagging_fixtures() -> Outcome {
    let t = sample("passage1.txt", "on the playground.");
    let seq = tag_triple(&t).map_err(|e| e.to_string())?;
    ensure(seq.answer_content_words == BTreeSet::from(["playground".to_string()]), "A_f != {playground}")?;
    ensure(seq.count(Tag::A) == 1, format!("{} A tags", seq.count(Tag::A)))?;
    let t = sample("passage2.txt", "because it is easy for them to get fish.");
    let seq = tag_triple(&t).map_err(|e| e.to_string())?;
    let key = t.sentence(seq.key_sentence).join(" ");
    ensure(key == "so it is easy for them to get fish .", format!("key sentence {key:?}"))?;

    let words = ["the", "a", "fish", "cat", "park", "is", "tom", "river"];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..500 {
        let text: String = (0..rng.gen_range(1..5))
            .map(|_| {
                let s: Vec<&str> = (0..rng.gen_range(1..6)).map(|_| *words.choose(&mut rng).unwrap()).collect();
                s.join(" ") + ". "
            })
            .collect();
        let (passage_tokens, sentence_spans) = segment_passage(&text);
        let answer: Vec<String> = (0..rng.gen_range(1..4)).map(|_| words.choose(&mut rng).unwrap().to_string()).collect();
        let t = EqgTriple {
            passage_id: "r".into(),
            passage_tokens,
            sentence_spans,
            answer_tokens: answer,
            question_tokens: vec!["?".into()],
        };
        let seq = tag_triple(&t).map_err(|e| e.to_string())?;
        let (s, e) = t.sentence_spans[seq.key_sentence];
        for (i, (w, tag)) in t.passage_tokens.iter().zip(&seq.tags).enumerate() {
            let want = if seq.answer_content_words.contains(w) {
                Tag::A
            } else if (s..e).contains(&i) {
                Tag::S
            } else {
                Tag::O
            };
            ensure(*tag == want, format!("case {case} token {i}: {tag:?} != {want:?}"))?;
        }
    }
    Ok("sample passage answers tag as expected; A-over-S priority holds on 500 random triples".into())
}

fn small_instances(hidden: usize, seed: u64) -> (Model, Vec<Instance>) {
    let triples = synth_triples(seed, 2);
    let vocab = build_vocab(&triples[..1], 30).unwrap();
    let insts: Vec<Instance> = triples
        .iter()
        .map(|t| {
            let tags = tag_triple(t).unwrap();
            let g = answer_guided_graph(&heuristic_parses(t), &tags.answer_content_words).unwrap();
            Instance::new(t, &tags.tags, &g, &vocab, None).unwrap()
        })
        .collect();
    let config = ModelConfig {
        vocab_size: vocab.len(),
        hidden,
        tag_dim: 4,
        gcn_layers: 2,
        dropout: 0.0,
        pretrained_dim: 0,
        copy_norm: CopyNorm::Normalized,
        clip_norm: 0.0,
    };
    (Model::new(config, &mut seeded_rng(seed)).unwrap(), insts)
}

fn distribution_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut states = 0;
    for seed in 0..20 {
        let (mut model, insts) = small_instances(6, seed);
        model.set_copy_gate_logit(rng.gen_range(-3.0..3.0));
        let inst = &insts[0];
        let ext = inst.ext_size(model.config.vocab_size);
        let mut tape = Tape::with_params(&model.params);
        let enc = model.encode(&mut tape, inst, &mut None).map_err(|e| e.to_string())?;
        let mut state = model.initial_state(&mut tape, enc.answer).map_err(|e| e.to_string())?;
        let mut prev = SOS;
        for _ in 0..5 {
            let out = model.decoder_step(&mut tape, &enc, &inst.passage_ext, ext, &state, prev).map_err(|e| e.to_string())?;
            worst = worst.max((tape.value(out.dist).sum() - 1.0).abs());
            state = out.state;
            prev = rng.gen_range(0..ext);
            states += 1;
        }
    }
    ensure(worst < 1e-12, format!("sum deviates by {worst:.2e}"))?;

    let (mut model, insts) = small_instances(6, 7);
    model.set_copy_gate_logit(40.0);
    let inst = &insts[0];
    let ext = inst.ext_size(model.config.vocab_size);
    let mut tape = Tape::with_params(&model.params);
    let enc = model.encode(&mut tape, inst, &mut None).map_err(|e| e.to_string())?;
    let state = model.initial_state(&mut tape, enc.answer).map_err(|e| e.to_string())?;
    let out = model.decoder_step(&mut tape, &enc, &inst.passage_ext, ext, &state, SOS).map_err(|e| e.to_string())?;
    let (dist, pv) = (tape.value(out.dist).data(), tape.value(out.p_vocab).data());
    ensure(&dist[..pv.len()] == pv && dist[pv.len()..].iter().all(|p| *p == 0.0), "g_p = 1 output differs from p_vocab")?;
    Ok(format!("{states} states within {worst:.1e} of 1; g_p = 1 reproduces p_vocab exactly"))
}

/// Settings of the memorization run; dropout is off because the run
/// measures capacity, not generalization.
const OVERFIT_LR: f64 = 0.01;
const OVERFIT_BATCH: usize = 20;
const OVERFIT_CLIP: f64 = 5.0;

fn overfit_run() -> Outcome {
    let start = Instant::now();
    let triples: Vec<EqgTriple> = synth_triples(42, 60).into_iter().take(20).collect();
    let vocab = build_vocab(&triples, 296).map_err(|e| e.to_string())?;
    ensure(triples.len() == 20 && vocab.len() <= 300, "fixture size")?;
    let insts: Vec<Instance> = triples
        .iter()
        .map(|t| {
            let tags = tag_triple(t).unwrap();
            let g = answer_guided_graph(&heuristic_parses(t), &tags.answer_content_words).unwrap();
            Instance::new(t, &tags.tags, &g, &vocab, None).unwrap()
        })
        .collect();
    let config = ModelConfig {
        vocab_size: vocab.len(),
        hidden: 64,
        tag_dim: 32,
        gcn_layers: 2,
        dropout: 0.0,
        pretrained_dim: 0,
        copy_norm: CopyNorm::Normalized,
        clip_norm: OVERFIT_CLIP,
    };
    let mut rng = seeded_rng(42);
    let mut model = Model::new(config, &mut rng).map_err(|e| e.to_string())?;
    let mut adam = Adam::new(&model.params, OVERFIT_LR);
    let mut step = 0;
    let mut loss = f64::INFINITY;
    'train: while step < 500 {
        for chunk in shuffled_indices(insts.len(), &mut rng).chunks(OVERFIT_BATCH) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &insts[i]).collect();
            model.train_step(&mut adam, &batch, &mut rng).map_err(|e| e.to_string())?;
            step += 1;
            if step % 25 == 0 || step == 500 {
                loss = model.eval_loss(&insts).map_err(|e| e.to_string())?;
                if loss < 0.1 || step == 500 {
                    break 'train;
                }
            }
        }
    }
    let exact = insts
        .iter()
        .filter(|i| model.beam_search(i, 10, 30).map(|o| o == i.target).unwrap_or(false))
        .count();
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("per-token loss {loss:.4} after {step} steps, {exact}/20 exact, {secs:.0} s");
    ensure(loss < 0.1 && exact >= 18 && secs < 600.0, detail.clone())?;
    Ok(detail)
}

fn corpus_filter() -> Outcome {
    let text = fs::read_to_string(fixtures().join("question_styles.tsv")).unwrap();
    let mut n = 0;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let (label, q) = line.split_once('\t').ok_or("bad fixture line")?;
        let got = format!("{:?}", classify_question_style(q));
        ensure(got == label, format!("{q:?}: {got} != {label}"))?;
        n += 1;
    }
    ensure(n == 30, format!("{n} fixture questions"))?;
    let t1 = [
        classify_question_style("the last sentence in the passage shows that _ ."),
        classify_question_style("what would be the best title for the passage ?"),
        classify_question_style("why did tommy's parents send him to a catholic school ?"),
    ];
    ensure(t1 == [QuestionStyle::Cloze, QuestionStyle::General, QuestionStyle::Specific], format!("{t1:?}"))?;
    Ok("30/30 labelled questions and the three style examples agree".into())
}

fn determinism_resume() -> Outcome {
    let config = |work: &Path, epochs: usize| {
        let mut cfg = RunConfig::default();
        cfg.race_dir = fixtures().join("synth_race");
        cfg.parse_dir = Some(fixtures().join("synth_parses"));
        cfg.work_dir = work.to_path_buf();
        cfg.hidden = 8;
        cfg.tag_dim = 4;
        cfg.batch_size = 8;
        cfg.beam = 2;
        cfg.max_decode_len = 8;
        cfg.patience = 10;
        cfg.epochs = epochs;
        cfg
    };
    let prepare = |cfg: &RunConfig| -> Result<(), String> {
        cmd_build_corpus(cfg).map_err(|e| e.to_string())?;
        for split in Split::ALL {
            cmd_tag(cfg, split).map_err(|e| e.to_string())?;
            cmd_build_graphs(cfg, split).map_err(|e| e.to_string())?;
        }
        Ok(())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = config(a.path(), 2);
    prepare(&full)?;
    let straight = cmd_train(&full, false).map_err(|e| e.to_string())?;
    let bytes = fs::read(full.layout().checkpoint(2)).unwrap();
    fs::remove_dir_all(full.layout().train_dir()).unwrap();
    cmd_train(&full, false).map_err(|e| e.to_string())?;
    ensure(bytes == fs::read(full.layout().checkpoint(2)).unwrap(), "checkpoints differ between identical runs")?;

    let mut part = config(b.path(), 1);
    prepare(&part)?;
    cmd_train(&part, false).map_err(|e| e.to_string())?;
    part.epochs = 2;
    let resumed = cmd_train(&part, true).map_err(|e| e.to_string())?;
    let x = straight.history.last().and_then(|h| h.dev_loss).ok_or("no dev loss")?;
    let y = resumed.history.last().and_then(|h| h.dev_loss).ok_or("no dev loss")?;
    ensure((x - y).abs() < 1e-9, format!("dev loss {x} vs resumed {y}"))?;
    let (_, p1, _) = load_checkpoint(&full.layout().checkpoint(2)).map_err(|e| e.to_string())?;
    let (_, p2, _) = load_checkpoint(&part.layout().checkpoint(2)).map_err(|e| e.to_string())?;
    ensure(p1 == p2, "resumed parameters differ")?;
    Ok(format!("bit-identical checkpoints; dev loss {x:.12} matches after resume"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("metric oracles", metric_oracles),
        ("graph fixtures", graph_fixtures),
        ("tagging fixtures", tagging_fixtures),
        ("distribution invariants", distribution_invariants),
        ("overfit run", overfit_run),
        ("corpus filter", corpus_filter),
        ("determinism and resume", determinism_resume),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
