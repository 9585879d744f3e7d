//! Synthetic parallel tasks used in place of real summarization/dialogue data.
//!
//! `template` maps a keyword-plus-slots source to a filled sentence. Every
//! article is `a` or `an` depending on the noun *after* it, so an output
//! token depends on a later output token, not only on the source.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MIN_LEN: usize = 5;
pub const MAX_LEN: usize = 24;

const VOWEL_NOUNS: &[&str] = &["apple", "egg", "owl", "igloo", "umbrella", "orange", "eagle", "onion", "anchor", "otter"];
const CONSONANT_NOUNS: &[&str] = &["cat", "dog", "book", "car", "tree", "lamp", "box", "hat", "kite", "drum"];
const NAMES: &[&str] = &["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi"];
const CITIES: &[&str] = &["paris", "rome", "oslo", "cairo", "lima", "quito", "tokyo", "delhi"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
    Template,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "template" => Ok(Task::Template),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

fn article(noun: &str) -> &'static str {
    if VOWEL_NOUNS.contains(&noun) {
        "an"
    } else {
        "a"
    }
}

fn noun(rng: &mut impl Rng) -> &'static str {
    let pool = if rng.random_bool(0.5) { VOWEL_NOUNS } else { CONSONANT_NOUNS };
    pool.choose(rng).unwrap()
}

fn pick(pool: &[&'static str], rng: &mut impl Rng) -> &'static str {
    pool.choose(rng).unwrap()
}

fn template_pair(rng: &mut impl Rng) -> (Vec<&'static str>, Vec<&'static str>) {
    match rng.random_range(0..5) {
        0 => {
            let (who, what) = (pick(NAMES, rng), noun(rng));
            (vec!["likes", who, what], vec![who, "likes", article(what), what, "."])
        }
        1 => {
            let (who, from, to) = (pick(NAMES, rng), pick(CITIES, rng), pick(CITIES, rng));
            (vec!["trip", who, from, to], vec![who, "flew", "from", from, "to", to, "."])
        }
        2 => {
            let (a, b, x, y) = (pick(NAMES, rng), pick(NAMES, rng), noun(rng), noun(rng));
            (
                vec!["gift", a, b, x, y],
                vec![a, "gave", b, article(x), x, "and", article(y), y, "."],
            )
        }
        3 => {
            let (who, city, x, y, other) = (pick(NAMES, rng), pick(CITIES, rng), noun(rng), noun(rng), pick(NAMES, rng));
            (
                vec!["story", who, city, x, y, other],
                vec![
                    "in", city, ",", who, "found", article(x), x, "near", article(y), y, "and", "showed", "it", "to", other, ".",
                ],
            )
        }
        _ => {
            let k = rng.random_range(3..=7);
            let items: Vec<&str> = (0..k).map(|_| noun(rng)).collect();
            let mut tgt = vec!["we", "bought"];
            for (i, &n) in items.iter().enumerate() {
                if i == k - 1 {
                    tgt.push("and");
                } else if i > 0 {
                    tgt.push(",");
                }
                tgt.extend([article(n), n]);
            }
            tgt.push(".");
            let mut src = vec!["list"];
            src.extend(items);
            (src, tgt)
        }
    }
}

/// `size` deterministic (source, target) lines.
pub fn generate_pairs(task: Task, size: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<&str> = [VOWEL_NOUNS, CONSONANT_NOUNS, NAMES, CITIES].concat();
    (0..size)
        .map(|_| {
            let (src, tgt) = match task {
                Task::Template => template_pair(&mut rng),
                Task::Copy | Task::Reverse => {
                    let len = rng.random_range(MIN_LEN..=MAX_LEN);
                    let src: Vec<&str> = (0..len).map(|_| pick(&words, &mut rng)).collect();
                    let mut tgt = src.clone();
                    if task == Task::Reverse {
                        tgt.reverse();
                    }
                    (src, tgt)
                }
            };
            (src.join(" "), tgt.join(" "))
        })
        .collect()
}

/// Writes `src.txt` and `tgt.txt` into `dir`.
pub fn write_synthetic(task: Task, size: usize, seed: u64, dir: impl AsRef<Path>) -> Result<()> {
    if size == 0 {
        return Err(Error::contract("synthetic dataset size must be at least 1"));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let pairs = generate_pairs(task, size, seed);
    let mut src = String::new();
    let mut tgt = String::new();
    for (s, t) in &pairs {
        src.push_str(s);
        src.push('\n');
        tgt.push_str(t);
        tgt.push('\n');
    }
    fs::write(dir.join("src.txt"), src)?;
    fs::write(dir.join("tgt.txt"), tgt)?;
    Ok(())
}
