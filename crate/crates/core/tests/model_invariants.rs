use std::time::Instant;

use eqg_core::corpus::{build_vocab, SOS};
use eqg_core::depgraph::answer_guided_graph;
use eqg_core::model::{seeded_rng, CopyNorm, Instance, Model, ModelConfig};
use eqg_core::pipeline::run_gradcheck;
use eqg_core::synth::{heuristic_parses, synth_triples};
use eqg_core::tagging::tag_triple;
use eqg_numcore::Tape;
use rand::Rng;

fn setup(hidden: usize, seed: u64) -> (Model, Vec<Instance>) {
    let triples = synth_triples(seed, 3);
    let vocab = build_vocab(&triples[..2], 40).unwrap();
    let instances = triples
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
    let model = Model::new(config, &mut seeded_rng(seed)).unwrap();
    (model, instances)
}

#[test]
fn output_distribution_sums_to_one_over_100_states() {
    let mut rng = seeded_rng(99);
    let mut checked = 0;
    for seed in 0..20 {
        let (mut model, instances) = setup(6, seed);
        model.set_copy_gate_logit(rng.gen_range(-3.0..3.0));
        let inst = &instances[seed as usize % instances.len()];
        let ext = inst.ext_size(model.config.vocab_size);
        let mut tape = Tape::with_params(&model.params);
        let enc = model.encode(&mut tape, inst, &mut None).unwrap();
        let mut state = model.initial_state(&mut tape, enc.answer).unwrap();
        let mut prev = SOS;
        for _ in 0..5 {
            let out = model.decoder_step(&mut tape, &enc, &inst.passage_ext, ext, &state, prev).unwrap();
            let dist = tape.value(out.dist);
            assert_eq!(dist.len(), ext);
            assert!((dist.sum() - 1.0).abs() < 1e-12, "sum {}", dist.sum());
            assert!(dist.data().iter().all(|p| *p >= 0.0));
            state = out.state;
            prev = rng.gen_range(0..ext);
            checked += 1;
        }
    }
    assert_eq!(checked, 100);
}

#[test]
fn saturated_gate_returns_vocabulary_distribution() {
    let (mut model, instances) = setup(6, 4);
    model.set_copy_gate_logit(40.0);
    assert_eq!(model.copy_gate(), 1.0);
    for inst in &instances {
        let ext = inst.ext_size(model.config.vocab_size);
        let mut tape = Tape::with_params(&model.params);
        let enc = model.encode(&mut tape, inst, &mut None).unwrap();
        let mut state = model.initial_state(&mut tape, enc.answer).unwrap();
        let mut prev = SOS;
        for &y in &inst.target {
            let out = model.decoder_step(&mut tape, &enc, &inst.passage_ext, ext, &state, prev).unwrap();
            let dist = tape.value(out.dist).data();
            let pv = tape.value(out.p_vocab).data();
            assert_eq!(&dist[..pv.len()], pv);
            assert!(dist[pv.len()..].iter().all(|p| *p == 0.0));
            state = out.state;
            prev = y;
        }
    }
}

#[test]
fn full_model_matches_finite_differences() {
    let start = Instant::now();
    let outcome = run_gradcheck(1e-4, 1e-4).unwrap();
    assert!(outcome.passed, "{outcome:?}");
    assert!(outcome.coordinates > 500);
    assert!(start.elapsed().as_secs() < 30);
}

#[test]
fn beam_of_one_is_greedy_and_beams_are_deterministic() {
    let (model, instances) = setup(8, 6);
    for inst in &instances {
        assert_eq!(model.beam_search(inst, 1, 12).unwrap(), model.greedy_decode(inst, 12).unwrap());
        assert_eq!(model.beam_search(inst, 4, 12).unwrap(), model.beam_search(inst, 4, 12).unwrap());
        assert!(model.beam_search(inst, 4, 12).unwrap().len() <= 12);
    }
}
