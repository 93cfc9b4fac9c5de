//! Synthetic GAP-format corpus and vocabulary builder.
//!
//! Passages mention two candidates of which at most one agrees in gender
//! with the pronoun; "neither" passages introduce a third person who does.
//! The labels are therefore recoverable from gender agreement alone, which
//! makes the corpus a learnability check rather than a benchmark.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{GapRecord, Gender};
use crate::seed;
use crate::tokenizer::{Vocab, CLS, MASK, PAD, SEP, UNK};

const MALE: &[&str] = &[
    "John", "Robert", "Michael", "William", "David", "Richard", "Thomas", "Charles", "Daniel", "Matthew", "George",
    "Edward", "Henry", "Peter", "Samuel", "Arthur", "Walter", "Frank", "Albert", "Harold",
];
const FEMALE: &[&str] = &[
    "Mary",
    "Patricia",
    "Jennifer",
    "Linda",
    "Elizabeth",
    "Susan",
    "Margaret",
    "Dorothy",
    "Sarah",
    "Karen",
    "Nancy",
    "Helen",
    "Alice",
    "Ruth",
    "Carol",
    "Laura",
    "Emma",
    "Grace",
    "Rose",
    "Clara",
];
const SURNAMES: &[&str] = &[
    "Smith", "Jones", "Taylor", "Brown", "Wilson", "Evans", "Walker", "Wright", "Hughes", "Green", "Hall", "Wood",
    "Clarke", "Turner", "Hill", "Baker",
];
const PLACES: &[&str] = &["London", "Paris", "Boston", "Dublin", "Sydney", "Toronto", "Madrid", "Vienna"];
const VERBS: &[&str] = &["met", "joined", "visited", "married", "interviewed", "replaced", "succeeded", "thanked"];
const FILLERS: &[&str] = &[
    "The season was long and the reviews were mixed.",
    "The film was released in the spring.",
    "The company later moved to a larger building.",
    "Critics praised the final episode.",
    "The album reached the top of the charts.",
    "The war ended two years later.",
];

fn name<R: Rng>(rng: &mut R, gender: Gender, with_surname: bool) -> String {
    let first = match gender {
        Gender::Male => MALE.choose(rng),
        Gender::Female => FEMALE.choose(rng),
    }
    .expect("non-empty list");
    if with_surname {
        format!("{first} {}", SURNAMES.choose(rng).expect("non-empty list"))
    } else {
        first.to_string()
    }
}

fn distinct_name<R: Rng>(rng: &mut R, gender: Gender, taken: &[&str]) -> String {
    loop {
        let surname = rng.gen_bool(0.5);
        let n = name(rng, gender, surname);
        let first = n.split(' ').next().unwrap_or_default();
        if taken.iter().all(|t| t.split(' ').next() != Some(first)) {
            return n;
        }
    }
}

/// Build `count` records deterministically from `seed_value`. Genders
/// alternate; labels are roughly 45% A, 45% B and 10% N.
pub fn generate(count: usize, seed_value: u64) -> Vec<GapRecord> {
    let mut rng = seed::rng(seed_value, "synthetic");
    (0..count).map(|i| generate_one(&mut rng, i)).collect()
}

fn generate_one<R: Rng>(rng: &mut R, index: usize) -> GapRecord {
    let gender = if index.is_multiple_of(2) { Gender::Male } else { Gender::Female };
    let roll: f64 = rng.gen();
    let (a_gender, b_gender, label) = if roll < 0.45 {
        (gender, gender.swapped(), 'A')
    } else if roll < 0.9 {
        (gender.swapped(), gender, 'B')
    } else {
        (gender.swapped(), gender.swapped(), 'N')
    };
    let a = distinct_name(rng, a_gender, &[]);
    let b = distinct_name(rng, b_gender, &[&a]);
    let third = (label == 'N').then(|| distinct_name(rng, gender, &[&a, &b]));

    let (subj, obj, poss) = match gender {
        Gender::Male => ("he", "him", "his"),
        Gender::Female => ("she", "her", "her"),
    };
    let mut text = String::new();
    if rng.gen_bool(0.5) {
        text.push_str(FILLERS.choose(rng).expect("non-empty list"));
        text.push(' ');
    }
    let a_offset = text.chars().count();
    text.push_str(&a);
    text.push(' ');
    text.push_str(VERBS.choose(rng).expect("non-empty list"));
    text.push(' ');
    let b_offset = text.chars().count();
    text.push_str(&b);
    text.push_str(&format!(" in {}. ", PLACES.choose(rng).expect("non-empty list")));
    if let Some(c) = &third {
        text.push_str(&format!("{c} arrived from {} soon after. ", PLACES.choose(rng).expect("non-empty list")));
    }
    let (pronoun, before, after) = match rng.gen_range(0..3) {
        0 => (capitalize(subj), "", " later returned to the city."),
        1 => (poss.to_string(), "The next year ", " brother opened a shop."),
        _ => (obj.to_string(), "The committee gave ", " an award."),
    };
    text.push_str(before);
    let pronoun_offset = text.chars().count();
    text.push_str(&pronoun);
    text.push_str(after);
    if rng.gen_bool(0.3) {
        text.push(' ');
        text.push_str(FILLERS.choose(rng).expect("non-empty list"));
    }
    GapRecord {
        id: format!("synth-{index}"),
        text,
        pronoun,
        pronoun_offset,
        a_name: a,
        a_offset,
        a_coref: label == 'A',
        b_name: b,
        b_offset,
        b_coref: label == 'B',
        url: format!("http://example.org/synth/{index}"),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Vocabulary covering every lowercased word and punctuation mark in
/// `texts`, after the five special tokens.
pub fn build_vocab<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Vocab {
    let mut words = BTreeSet::new();
    for t in texts {
        let lower = t.to_lowercase();
        let mut cur = String::new();
        for ch in lower.chars() {
            if ch.is_alphanumeric() {
                cur.push(ch);
            } else {
                if !cur.is_empty() {
                    words.insert(std::mem::take(&mut cur));
                }
                if !ch.is_whitespace() {
                    words.insert(ch.to_string());
                }
            }
        }
        if !cur.is_empty() {
            words.insert(cur);
        }
    }
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
    tokens.extend(words);
    Vocab::from_tokens(tokens).expect("special tokens present and words unique")
}

/// Vocabulary for a synthetic corpus, including the multiple-choice suffix
/// words.
pub fn vocab_for_records(records: &[GapRecord]) -> Vocab {
    build_vocab(records.iter().map(|r| r.text.as_str()).chain(["is neither"]))
}
