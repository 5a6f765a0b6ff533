//! Deterministic English-like text for desk-scale runs and tests.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::rng::SeedStream;

const SUBJECTS: &[&str] = &[
    "the fox", "a cat", "the old dog", "my sister", "the baker", "a small bird", "the teacher", "our neighbor",
    "the river", "a stranger", "the child", "the farmer", "a red fox", "the wind", "the captain", "a quiet owl",
];
const VERBS: &[&str] = &[
    "sat on", "looked at", "walked past", "jumped over", "found", "painted", "carried", "watched", "built",
    "opened", "followed", "cleaned", "sold", "forgot", "dropped", "picked up",
];
const OBJECTS: &[&str] = &[
    "a box", "the fence", "the red door", "a loaf of bread", "the garden", "a wooden chair", "the window",
    "an old map", "the bridge", "a basket of apples", "the stone wall", "a green hat", "the little boat",
    "the morning paper", "a candle", "the market",
];
const TAILS: &[&str] = &[
    "", "", "", " in the morning", " before dinner", " near the river", " at noon", " after the rain",
    " with great care", " again", " by the sea", " in the dark",
];
const OPENERS: &[&str] = &["", "", "", "Then ", "Later, ", "Once, ", "Every day ", "Yesterday "];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn sentence(rng: &mut impl Rng) -> String {
    let opener = *OPENERS.choose(rng).unwrap();
    let subject = *SUBJECTS.choose(rng).unwrap();
    let body = format!(
        "{subject} {} {}{}",
        VERBS.choose(rng).unwrap(),
        OBJECTS.choose(rng).unwrap(),
        TAILS.choose(rng).unwrap()
    );
    let text = if opener.is_empty() { capitalize(&body) } else { format!("{opener}{body}") };
    match rng.random_range(0..10) {
        0 => format!("{text}, and {} {} {}.", SUBJECTS.choose(rng).unwrap(), VERBS.choose(rng).unwrap(), OBJECTS.choose(rng).unwrap()),
        1 => format!("{text}? No, it was {}.", OBJECTS.choose(rng).unwrap()),
        2 => format!("{text} {} times.", rng.random_range(2..13)),
        _ => format!("{text}."),
    }
}

/// At least `min_bytes` of sentences grouped into short paragraphs.
pub fn synthetic_text(seed: u64, min_bytes: usize) -> String {
    let mut rng = SeedStream::new(seed).split("synthetic-text").rng();
    let mut out = String::new();
    while out.len() < min_bytes {
        let n = rng.random_range(3..7);
        let para: Vec<String> = (0..n).map(|_| sentence(&mut rng)).collect();
        out.push_str(&para.join(" "));
        out.push('\n');
    }
    out
}
