//! Synthetic tasks, character vocabulary, dataset files and few-shot
//! prompts.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;

pub const EOS: &str = "<eos>";

/// Character-level vocabulary. Id 0 is `<eos>`; every other entry is a
/// single character.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<char, u32>,
}

impl Default for Vocab {
    /// `<eos>`, newline, space, `:+-*=`, digits, `A-Z`, `a-z`: 70 ids.
    fn default() -> Self {
        let mut tokens = vec![EOS.to_string()];
        tokens.extend("\n :+-*=".chars().map(String::from));
        tokens.extend(('0'..='9').map(String::from));
        tokens.extend(('A'..='Z').map(String::from));
        tokens.extend(('a'..='z').map(String::from));
        Self::from_tokens(tokens).expect("default vocab is well formed")
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, HarnessError> {
        if tokens.first().map(String::as_str) != Some(EOS) {
            return Err(HarnessError::Data("vocab must start with <eos>".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(1) {
            let mut chars = t.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => {
                    if index.insert(c, i as u32).is_some() {
                        return Err(HarnessError::Data(format!("duplicate vocab entry {t:?}")));
                    }
                }
                _ => {
                    return Err(HarnessError::Data(format!(
                        "vocab entry {t:?} is not one character"
                    )))
                }
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reads `{"tokens": [...]}`.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let raw: Vocab =
            serde_json::from_str(&text).map_err(|e| HarnessError::Data(e.to_string()))?;
        Self::from_tokens(raw.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, HarnessError> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| HarnessError::Data(format!("character {c:?} not in vocab")))
            })
            .collect()
    }

    /// Decodes ids, dropping `<eos>` and unknown ids.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != 0)
            .filter_map(|&i| self.tokens.get(i as usize))
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    /// Sort the characters of a lowercase word.
    Sort,
    /// Running sum of single digits modulo `m`, one residue per addition.
    Modarith,
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskName::Sort => "sort",
            TaskName::Modarith => "modarith",
        })
    }
}

impl FromStr for TaskName {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sort" => Ok(TaskName::Sort),
            "modarith" => Ok(TaskName::Modarith),
            other => Err(HarnessError::ConfigInvalid(format!(
                "unknown task `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    pub target: String,
}

/// `"cab"` → `"abc"`.
pub fn sort_target(input: &str) -> String {
    let mut c: Vec<char> = input.chars().collect();
    c.sort_unstable();
    c.into_iter().collect()
}

/// `"3+4+6 mod 5"` → `"2 3"`.
pub fn modarith_target(input: &str) -> Option<String> {
    let (expr, m) = input.split_once(" mod ")?;
    let m: u32 = m.trim().parse().ok().filter(|m| *m > 0)?;
    let terms: Vec<u32> = expr
        .split('+')
        .map(|t| t.trim().parse().ok())
        .collect::<Option<_>>()?;
    let (first, rest) = terms.split_first()?;
    let mut acc = first % m;
    let steps: Vec<String> = rest
        .iter()
        .map(|t| {
            acc = (acc + t) % m;
            acc.to_string()
        })
        .collect();
    Some(steps.join(" "))
}

pub fn generate_example(task: TaskName, rng: &mut impl Rng) -> Example {
    match task {
        TaskName::Sort => {
            let len = rng.random_range(3..=8);
            let input: String = (0..len)
                .map(|_| rng.random_range(b'a'..=b'z') as char)
                .collect();
            let target = sort_target(&input);
            Example { input, target }
        }
        TaskName::Modarith => {
            let n_terms = rng.random_range(2..=5);
            let terms: Vec<String> = (0..n_terms)
                .map(|_| rng.random_range(0..10u32).to_string())
                .collect();
            let m = rng.random_range(2..=9u32);
            let input = format!("{} mod {m}", terms.join("+"));
            let target = modarith_target(&input).expect("well-formed input");
            Example { input, target }
        }
    }
}

/// Train and test examples for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: TaskName,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskData {
    /// Deterministic synthetic data; train and test come from independent
    /// streams of the same seed.
    pub fn synthetic(task: TaskName, n_train: usize, n_test: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let train = (0..n_train)
            .map(|_| generate_example(task, &mut rng))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let test = (0..n_test)
            .map(|_| generate_example(task, &mut rng))
            .collect();
        Self { task, train, test }
    }

    /// Reads `train.jsonl` and `test.jsonl` from `dir`, lines of
    /// `{"input": ..., "target": ...}`.
    pub fn load_dir(task: TaskName, dir: &Path) -> Result<Self, HarnessError> {
        Ok(Self {
            task,
            train: read_jsonl(&dir.join("train.jsonl"))?,
            test: read_jsonl(&dir.join("test.jsonl"))?,
        })
    }

    /// Shuffles train under `seed`; the first `validation_fraction` of it
    /// becomes the validation split and the rest the few-shot pool.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> Result<Split, HarnessError> {
        if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
            return Err(HarnessError::ConfigInvalid(format!(
                "validation fraction {validation_fraction} outside (0, 1)"
            )));
        }
        let mut train = self.train.clone();
        train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((train.len() as f64 * validation_fraction).round() as usize).min(train.len());
        let shot_pool = train.split_off(n_val);
        if train.is_empty() {
            return Err(HarnessError::EmptySplit("validation"));
        }
        if self.test.is_empty() {
            return Err(HarnessError::EmptySplit("test"));
        }
        Ok(Split {
            task: self.task,
            validation: train,
            shot_pool,
            test: self.test.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub task: TaskName,
    pub validation: Vec<Example>,
    pub shot_pool: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| HarnessError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e).expect("plain strings serialise"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| HarnessError::io(path, e))
}

/// `Q: {x}\nA: {y}\n\n` for each shot, then `Q: {x}\nA: ` for the query.
pub fn few_shot_prompt(shots: &[Example], query: &str) -> String {
    let mut p = String::new();
    for s in shots {
        p.push_str(&format!("Q: {}\nA: {}\n\n", s.input, s.target));
    }
    p.push_str(&format!("Q: {query}\nA: "));
    p
}

/// Prediction text: everything before the first newline, `<eos>` dropped.
pub fn extract_answer(vocab: &Vocab, generated: &[u32]) -> String {
    let text = vocab.decode(generated);
    text.split('\n').next().unwrap_or("").to_string()
}

/// 1 when equal after stripping trailing whitespace from both sides.
pub fn exact_match(prediction: &str, reference: &str) -> u8 {
    (prediction.trim_end() == reference.trim_end()) as u8
}
