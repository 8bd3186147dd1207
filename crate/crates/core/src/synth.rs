//! Seeded synthetic RACE-style articles and a heuristic tree parser used
//! for fixtures and desk-scale runs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::corpus::{build_eqg_triples, EqgTriple, ExamSample, LengthCaps, Split};
use crate::depgraph::ParsedSentence;

const NAMES: [&str; 12] = [
    "tom", "mary", "jack", "lucy", "peter", "anna", "david", "susan", "mike", "linda", "sam", "kate",
];
const PLACES: [&str; 10] = [
    "park", "library", "garden", "market", "school", "river", "farm", "museum", "beach", "station",
];
const ACTIVITIES: [&str; 10] = [
    "read", "swim", "paint", "sing", "dance", "cook", "run", "draw", "fish", "study",
];
const THINGS: [&str; 10] = [
    "apples", "books", "flowers", "kites", "shoes", "cakes", "stamps", "maps", "hats", "toys",
];
const DAYS: [&str; 7] = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
const REASONS: [&str; 6] = [
    "it is quiet", "it is near home", "friends go there", "it is cheap", "the teacher likes it", "it is fun",
];

struct Fact {
    sentence: String,
    question: String,
    answer: String,
    distractors: [String; 3],
}

/// Slot values drawn without replacement so no two facts of one article
/// share a place, day, item, activity or reason.
struct Pools {
    places: Vec<&'static str>,
    activities: Vec<&'static str>,
    things: Vec<&'static str>,
    days: Vec<&'static str>,
    reasons: Vec<&'static str>,
}

impl Pools {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let mut shuffled = |items: &[&'static str]| {
            let mut v = items.to_vec();
            v.shuffle(rng);
            v
        };
        Pools {
            places: shuffled(&PLACES),
            activities: shuffled(&ACTIVITIES),
            things: shuffled(&THINGS),
            days: shuffled(&DAYS),
            reasons: shuffled(&REASONS),
        }
    }
}

fn others<R: Rng>(rng: &mut R, items: &[&str], keep: &str, fmt: impl Fn(&str) -> String) -> [String; 3] {
    let mut pool: Vec<&str> = items.iter().copied().filter(|x| *x != keep).collect();
    pool.shuffle(rng);
    [fmt(pool[0]), fmt(pool[1]), fmt(pool[2])]
}

fn cap(s: &str) -> String {
    let mut c = s.chars();
    c.next().map_or(String::new(), |f| f.to_uppercase().collect::<String>() + c.as_str())
}

fn fact<R: Rng>(rng: &mut R, name: &str, pools: &mut Pools) -> Fact {
    let name_c = cap(name);
    match rng.gen_range(0..4) {
        0 => {
            let (act, place) = (pools.activities.pop().unwrap_or("read"), pools.places.pop().unwrap_or("park"));
            Fact {
                sentence: format!("{name_c} likes to {act} in the {place}."),
                question: format!("Where does {name_c} like to {act}?"),
                answer: format!("In the {place}."),
                distractors: others(rng, &PLACES, place, |p| format!("In the {p}.")),
            }
        }
        1 => {
            let (thing, day) = (pools.things.pop().unwrap_or("books"), pools.days.pop().unwrap_or("monday"));
            Fact {
                sentence: format!("On {day} {name} buys some {thing}."),
                question: format!("What does {name_c} buy on {day}?"),
                answer: format!("Some {thing}."),
                distractors: others(rng, &THINGS, thing, |t| format!("Some {t}.")),
            }
        }
        2 => {
            let (place, reason) = (pools.places.pop().unwrap_or("park"), pools.reasons.pop().unwrap_or("it is fun"));
            Fact {
                sentence: format!("{name_c} goes to the {place} because {reason}."),
                question: format!("Why does {name_c} go to the {place}?"),
                answer: format!("Because {reason}."),
                distractors: others(rng, &REASONS, reason, |r| format!("Because {r}.")),
            }
        }
        _ => {
            let (act, day) = (pools.activities.pop().unwrap_or("read"), pools.days.pop().unwrap_or("monday"));
            Fact {
                sentence: format!("Every {day} {name} and a friend {act} together."),
                question: format!("When does {name_c} {act} with a friend?"),
                answer: format!("Every {day}."),
                distractors: others(rng, &DAYS, day, |d| format!("Every {d}.")),
            }
        }
    }
}

/// One RACE JSON record: `(relative file name, JSON text)`. Each article
/// carries Specific questions plus one Cloze and one General question.
pub fn synth_race_article(seed: u64, index: usize) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let name = NAMES[rng.gen_range(0..NAMES.len())];
    let n_facts = rng.gen_range(3..=5);
    let mut pools = Pools::new(&mut rng);
    let facts: Vec<Fact> = (0..n_facts).map(|_| fact(&mut rng, name, &mut pools)).collect();
    let article = facts.iter().map(|f| f.sentence.as_str()).collect::<Vec<_>>().join(" ");
    let mut questions = Vec::new();
    let mut options = Vec::new();
    let mut answers = Vec::new();
    let letters = ["A", "B", "C", "D"];
    let mut push = |q: String, right: String, wrong: [String; 3], rng: &mut ChaCha8Rng| {
        let slot = rng.gen_range(0..4);
        let mut opts: Vec<String> = wrong.to_vec();
        opts.insert(slot, right);
        questions.push(q);
        options.push(opts);
        answers.push(letters[slot].to_string());
    };
    for f in &facts {
        push(f.question.clone(), f.answer.clone(), f.distractors.clone(), &mut rng);
    }
    push(
        format!("{} likes to _ in the morning.", name),
        "run".into(),
        ["sleep".into(), "eat".into(), "cry".into()],
        &mut rng,
    );
    push(
        "What is the best title for the passage?".into(),
        format!("A day of {name}"),
        ["A cold winter".into(), "The old house".into(), "Lost at sea".into()],
        &mut rng,
    );
    let record = json!({
        "id": format!("{index}.txt"),
        "article": article,
        "questions": questions,
        "answers": answers,
        "options": options,
    });
    (format!("{index}.txt"), record.to_string())
}

/// Specific-question triples from `articles` synthetic articles, in order.
pub fn synth_triples(seed: u64, articles: usize) -> Vec<EqgTriple> {
    let samples: Vec<ExamSample> = (0..articles)
        .flat_map(|i| {
            let (file, text) = synth_race_article(seed, i);
            let rec: serde_json::Value = serde_json::from_str(&text).expect("valid synthetic JSON");
            let article = rec["article"].as_str().unwrap_or_default().to_string();
            let id = format!("synth-{}", file.trim_end_matches(".txt"));
            let qs: Vec<ExamSample> = rec["questions"]
                .as_array()
                .into_iter()
                .flatten()
                .zip(rec["answers"].as_array().into_iter().flatten())
                .zip(rec["options"].as_array().into_iter().flatten())
                .map(|((q, a), o)| {
                    let slot = (a.as_str().unwrap_or("A").as_bytes()[0] - b'A') as usize;
                    ExamSample {
                        passage_id: id.clone(),
                        passage_text: article.clone(),
                        question_text: q.as_str().unwrap_or_default().to_string(),
                        answer_text: o[slot].as_str().unwrap_or_default().to_string(),
                        split: Split::Train,
                    }
                })
                .collect();
            qs
        })
        .collect();
    build_eqg_triples(&samples, LengthCaps::default()).triples
}

/// Writes a RACE directory layout (`train/`, `dev/`, `test/`) holding
/// `counts[k]` synthetic articles per split. Splits draw disjoint article
/// indices.
pub fn write_synth_race(dir: &Path, seed: u64, counts: [usize; 3]) -> std::io::Result<usize> {
    let mut written = 0;
    for (k, split) in Split::ALL.iter().enumerate() {
        let sub = dir.join(split.as_str());
        fs::create_dir_all(&sub)?;
        for i in 0..counts[k] {
            let (name, text) = synth_race_article(seed, k * 100_000 + i);
            fs::write(sub.join(name), text + "\n")?;
            written += 1;
        }
    }
    Ok(written)
}

fn is_punct(t: &str) -> bool {
    t.chars().all(|c| !c.is_alphanumeric())
}

/// A deterministic projective tree: the second word is the root, earlier
/// words attach to it, later words chain to their left neighbour and
/// punctuation hangs off the root.
pub fn heuristic_parse(tokens: &[String]) -> ParsedSentence {
    let n = tokens.len();
    let words: Vec<usize> = (0..n).filter(|&i| !is_punct(&tokens[i])).collect();
    let root = match words.as_slice() {
        [] => 0,
        [only] => *only,
        [_, second, ..] => *second,
    };
    let mut heads = vec![0; n];
    let mut deprels = vec![String::new(); n];
    let mut last_word = root;
    for i in 0..n {
        let (h, rel) = if i == root {
            (0, "root")
        } else if is_punct(&tokens[i]) {
            (root + 1, "punct")
        } else if i < root {
            (root + 1, "nsubj")
        } else {
            (last_word + 1, "dep")
        };
        heads[i] = h;
        deprels[i] = rel.to_string();
        if i > root && !is_punct(&tokens[i]) {
            last_word = i;
        }
    }
    ParsedSentence::new(tokens.to_vec(), heads, deprels)
}

pub fn heuristic_parses(triple: &EqgTriple) -> Vec<ParsedSentence> {
    triple.sentences().map(heuristic_parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{classify_question_style, QuestionStyle};

    #[test]
    fn synthetic_articles_are_deterministic() {
        assert_eq!(synth_race_article(7, 3), synth_race_article(7, 3));
        assert_ne!(synth_race_article(7, 3), synth_race_article(8, 3));
    }

    #[test]
    fn filter_keeps_only_fact_questions() {
        let triples = synth_triples(1, 5);
        assert!(!triples.is_empty());
        for t in &triples {
            assert_eq!(classify_question_style(&t.question_tokens.join(" ")), QuestionStyle::Specific);
        }
    }

    #[test]
    fn heuristic_parses_validate() {
        for t in synth_triples(2, 10) {
            for (k, p) in heuristic_parses(&t).iter().enumerate() {
                p.validate(k).unwrap();
            }
        }
        let single = heuristic_parse(&["hi".to_string()]);
        assert_eq!(single.heads, [0]);
    }
}
