//! Synthetic coreference corpus for desk-scale runs.
//!
//! Every session is about one made-up entity. Turn 1 names it; later turns
//! refer to it with a pronoun, so a retriever only finds the right passage
//! once the pronoun is resolved from history.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_instances, instance_id, Passage, Session, Turn};
use crate::error::{Error, Result};

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// Aspect name followed by three content words found in its passages.
const ASPECTS: &[(&str, [&str; 3])] = &[
    ("history", ["founded", "ancient", "origins"]),
    ("population", ["residents", "census", "inhabitants"]),
    ("climate", ["weather", "rainfall", "temperature"]),
    ("economy", ["trade", "industry", "exports"]),
    ("culture", ["music", "festivals", "art"]),
    ("geography", ["mountains", "rivers", "terrain"]),
    ("cuisine", ["food", "dishes", "recipes"]),
    ("language", ["dialect", "speakers", "grammar"]),
    ("sports", ["football", "teams", "stadium"]),
    ("education", ["schools", "university", "students"]),
    ("transport", ["railway", "airport", "roads"]),
    ("government", ["mayor", "council", "elections"]),
];

const FILLERS: &[&str] = &[
    "notable", "region", "records", "period", "local", "known", "several", "major", "early", "modern",
    "large", "small", "various", "northern", "southern", "central", "recent", "famous", "common", "public",
];

/// Each entry: (query template with `{a}` for the aspect, pronoun used).
const FOLLOW_UP_TEMPLATES: &[&str] = &[
    "what is the {a} of it",
    "tell me about the {a} of it",
    "what do they say about its {a}",
];
const REPEAT_TEMPLATE: &str = "what else about the {a} of it";
const PRONOUNS: &[&str] = &["it", "its", "they"];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub sessions: Vec<Session>,
    pub passages: Vec<Passage>,
    /// `(instance_id, passage_id)` relevance pairs.
    pub qrels: Vec<(String, String)>,
    /// The entity token of each session, aligned with `sessions`.
    pub entities: Vec<String>,
}

fn make_entity(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(3..=4);
    (0..syllables)
        .map(|_| {
            let onset = ONSETS[rng.gen_range(0..ONSETS.len())];
            let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
            format!("{onset}{vowel}")
        })
        .collect()
}

pub fn generate_toy_corpus(
    seed: u64,
    num_sessions: usize,
    turns_per_session: usize,
    entity_vocab_size: usize,
) -> Result<ToyCorpus> {
    if num_sessions == 0 || turns_per_session == 0 || entity_vocab_size == 0 {
        return Err(Error::Validation("toy corpus counts must be positive".into()));
    }
    if entity_vocab_size < num_sessions {
        return Err(Error::Validation(format!(
            "entity_vocab_size {entity_vocab_size} is smaller than num_sessions {num_sessions}"
        )));
    }
    if turns_per_session > ASPECTS.len() {
        return Err(Error::Validation(format!(
            "at most {} turns per session are supported",
            ASPECTS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reserved: HashSet<&str> = ASPECTS
        .iter()
        .flat_map(|(a, words)| std::iter::once(*a).chain(words.iter().copied()))
        .chain(FILLERS.iter().copied())
        .collect();
    let mut pool: Vec<String> = Vec::with_capacity(entity_vocab_size);
    let mut seen = HashSet::new();
    while pool.len() < entity_vocab_size {
        let e = make_entity(&mut rng);
        if !reserved.contains(e.as_str()) && seen.insert(e.clone()) {
            pool.push(e);
        }
    }
    pool.shuffle(&mut rng);

    let width = num_sessions.to_string().len().max(3);
    let mut corpus = ToyCorpus {
        sessions: Vec::new(),
        passages: Vec::new(),
        qrels: Vec::new(),
        entities: Vec::new(),
    };
    for (s, entity) in pool.into_iter().take(num_sessions).enumerate() {
        let session_id = format!("s{s:0width$}");
        let mut order: Vec<usize> = (0..ASPECTS.len()).collect();
        order.shuffle(&mut rng);
        let mut next_aspect = order.into_iter();
        let mut turns: Vec<Turn> = Vec::new();
        let mut prev: Option<(usize, String)> = None;
        for k in 1..=turns_per_session {
            let repeat = k > 1 && rng.gen_bool(0.25);
            let (aspect_idx, pid, query) = match (&prev, repeat) {
                (Some((a, pid)), true) => (*a, pid.clone(), REPEAT_TEMPLATE.replace("{a}", ASPECTS[*a].0)),
                _ => {
                    let a = next_aspect.next().expect("turns bounded by aspect count");
                    let pid = format!("{session_id}_p{k}");
                    let (name, words) = ASPECTS[a];
                    let fillers: Vec<&str> = FILLERS.choose_multiple(&mut rng, 3).copied().collect();
                    corpus.passages.push(Passage {
                        passage_id: pid.clone(),
                        text: format!(
                            "{entity} {name} {} {} {} {} {} {}",
                            words[0], words[1], words[2], fillers[0], fillers[1], fillers[2]
                        ),
                    });
                    let query = if k == 1 {
                        format!("tell me about the {name} of {entity}")
                    } else {
                        let t = FOLLOW_UP_TEMPLATES[rng.gen_range(0..FOLLOW_UP_TEMPLATES.len())];
                        t.replace("{a}", name)
                    };
                    (a, pid, query)
                }
            };
            let (name, words) = ASPECTS[aspect_idx];
            let answer = format!("{entity} is known for {} and {}", words[rng.gen_range(0..3)], name);
            corpus.qrels.push((instance_id(&session_id, k), pid.clone()));
            turns.push(Turn {
                turn_index: k,
                query,
                answer,
                gold_passage_ids: vec![pid.clone()],
                topic: Some(name.to_string()),
            });
            prev = Some((aspect_idx, pid));
        }
        corpus.sessions.push(Session { session_id, turns });
        corpus.entities.push(entity);
    }
    Ok(corpus)
}

/// Replace the pronoun in a follow-up query with the entity.
fn resolve(query: &str, entity: &str) -> String {
    query
        .split(' ')
        .map(|w| if PRONOUNS.contains(&w) { entity } else { w })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Rule-based stand-in for an LLM rewriter that resolves the pronoun in
/// `resolve_fraction` of the follow-up turns and copies the rest verbatim.
pub fn imperfect_rewrites(corpus: &ToyCorpus, resolve_fraction: f64, seed: u64) -> Vec<(String, String)> {
    let instances = build_instances(&corpus.sessions);
    let mut follow_ups: Vec<usize> = (0..instances.len())
        .filter(|&i| instances[i].turn_index > 1)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    follow_ups.shuffle(&mut rng);
    let resolved_count = (resolve_fraction * follow_ups.len() as f64).round() as usize;
    let resolved: HashSet<usize> = follow_ups.into_iter().take(resolved_count).collect();
    let entity_of = |session_id: &str| {
        let idx = corpus
            .sessions
            .iter()
            .position(|s| s.session_id == session_id)
            .expect("instance comes from corpus");
        corpus.entities[idx].as_str()
    };
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let text = if resolved.contains(&i) {
                resolve(&inst.current_query, entity_of(&inst.session_id))
            } else {
                inst.current_query.clone()
            };
            (inst.instance_id.clone(), text)
        })
        .collect()
}

/// Deterministic train/test split by whole sessions: returns (train, test).
pub fn split_sessions(sessions: &[Session], test_fraction: f64, seed: u64) -> (Vec<Session>, Vec<Session>) {
    let mut idx: Vec<usize> = (0..sessions.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e57);
    idx.shuffle(&mut rng);
    let test_count = (test_fraction * sessions.len() as f64).round() as usize;
    let test: HashSet<usize> = idx.into_iter().take(test_count).collect();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, s) in sessions.iter().enumerate() {
        if test.contains(&i) {
            held.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, held)
}
