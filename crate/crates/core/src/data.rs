//! Synthetic transduction tasks and the line-oriented dataset format: one
//! sentence per line as space-separated ids, with aligned `.src`/`.tgt` files.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FIRST_CONTENT;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl Pair {
    pub fn new(src: Vec<u32>, tgt: Vec<u32>) -> Self {
        Self { src, tgt }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copy,
    Reverse,
    /// A seeded bijection over content ids, then reversal.
    MappedLexicon,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "mapped-lexicon" | "mapped_lexicon" => Ok(Self::MappedLexicon),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

fn default_min_len() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: Task,
    pub vocab: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab <= FIRST_CONTENT as usize {
            return Err(Error::Config(format!("vocab {} leaves no content ids after the 4 reserved", self.vocab)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("invalid length range {}..={}", self.min_len, self.max_len)));
        }
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

/// Seeded permutation of the content ids, indexed by `id - FIRST_CONTENT`.
pub fn lexicon(vocab: usize, seed: u64) -> Vec<u32> {
    let mut ids: Vec<u32> = (FIRST_CONTENT..vocab as u32).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6c65_7869_636f_6e00));
    ids
}

pub fn transduce(task: Task, src: &[u32], lexicon: &[u32]) -> Vec<u32> {
    match task {
        Task::Copy => src.to_vec(),
        Task::Reverse => src.iter().rev().copied().collect(),
        Task::MappedLexicon => src.iter().rev().map(|&t| lexicon[(t - FIRST_CONTENT) as usize]).collect(),
    }
}

/// Generates train/valid/test splits; valid and test exclude sources seen
/// in earlier splits where the sequence space allows it.
pub fn gen_data(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lex = lexicon(spec.vocab, spec.seed);
    let mut seen = HashSet::new();
    let mut split = |n: usize, rng: &mut ChaCha8Rng, exclude: bool| {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let src: Vec<u32> = (0..len).map(|_| rng.gen_range(FIRST_CONTENT..spec.vocab as u32)).collect();
            attempts += 1;
            if exclude && seen.contains(&src) && attempts < 100 * n {
                continue;
            }
            seen.insert(src.clone());
            let tgt = transduce(spec.task, &src, &lex);
            out.push(Pair::new(src, tgt));
        }
        out
    };
    let train = split(spec.n_train, &mut rng, false);
    let valid = split(spec.n_valid, &mut rng, true);
    let test = split(spec.n_test, &mut rng, true);
    Ok(Dataset { train, valid, test })
}

pub fn format_line(ids: &[u32]) -> String {
    let mut s = String::with_capacity(ids.len() * 3);
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{id}").expect("write to string");
    }
    s
}

pub fn parse_line(line: &str) -> Result<Vec<u32>> {
    line.split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| Error::Dataset(format!("bad token `{t}`"))))
        .collect()
}

fn write_lines(path: &Path, seqs: impl Iterator<Item = Vec<u32>>) -> Result<()> {
    let mut text = String::new();
    for s in seqs {
        text.push_str(&format_line(&s));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Paths of the `.src`/`.tgt` pair for split `name` in `dir`.
pub fn split_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.src")), dir.join(format!("{name}.tgt")))
}

pub fn write_pairs(dir: &Path, name: &str, pairs: &[Pair]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (s, t) = split_paths(dir, name);
    write_lines(&s, pairs.iter().map(|p| p.src.clone()))?;
    write_lines(&t, pairs.iter().map(|p| p.tgt.clone()))
}

pub fn read_lines(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, l)| parse_line(l).map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn read_pairs(dir: &Path, name: &str) -> Result<Vec<Pair>> {
    let (s, t) = split_paths(dir, name);
    let src = read_lines(&s)?;
    let tgt = read_lines(&t)?;
    if src.len() != tgt.len() {
        return Err(Error::Dataset(format!(
            "{} has {} lines but {} has {}",
            s.display(),
            src.len(),
            t.display(),
            tgt.len()
        )));
    }
    Ok(src.into_iter().zip(tgt).map(|(s, t)| Pair::new(s, t)).collect())
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    write_pairs(dir, "train", &data.train)?;
    write_pairs(dir, "valid", &data.valid)?;
    write_pairs(dir, "test", &data.test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: Task) -> TaskSpec {
        TaskSpec { task, vocab: 16, min_len: 1, max_len: 8, n_train: 50, n_valid: 10, n_test: 10, seed: 4 }
    }

    #[test]
    fn task_definitions() {
        let d = gen_data(&spec(Task::Copy)).unwrap();
        assert!(d.train.iter().all(|p| p.src == p.tgt));
        assert_eq!(transduce(Task::Reverse, &[3, 4, 5], &[]), vec![5, 4, 3]);
        let lex = lexicon(16, 4);
        let mut sorted = lex.clone();
        sorted.sort();
        assert_eq!(sorted, (4..16).collect::<Vec<_>>());
        let d = gen_data(&spec(Task::MappedLexicon)).unwrap();
        for p in &d.train {
            let back: Vec<u32> = p.tgt.iter().rev().map(|&t| lex.iter().position(|&x| x == t).unwrap() as u32 + 4).collect();
            assert_eq!(back, p.src);
        }
    }

    #[test]
    fn determinism_and_ranges() {
        let a = gen_data(&spec(Task::Reverse)).unwrap();
        assert_eq!(a, gen_data(&spec(Task::Reverse)).unwrap());
        assert!(a.train.iter().all(|p| (1..=8).contains(&p.src.len()) && p.src.iter().all(|&t| (4..16).contains(&t))));
        let mut bad = spec(Task::Copy);
        bad.min_len = 9;
        assert!(gen_data(&bad).is_err());
        bad = spec(Task::Copy);
        bad.vocab = 4;
        assert!(gen_data(&bad).is_err());
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_data(&spec(Task::MappedLexicon)).unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let first = std::fs::read(dir.path().join("train.src")).unwrap();
        write_dataset(dir.path(), &gen_data(&spec(Task::MappedLexicon)).unwrap()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join("train.src")).unwrap());
        assert_eq!(read_pairs(dir.path(), "train").unwrap(), d.train);
        assert!(parse_line("4 x").is_err());
    }
}
