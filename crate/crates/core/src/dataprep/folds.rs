use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Test,
    Fold(usize),
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Test => f.write_str("test"),
            Split::Fold(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "test" {
            return Ok(Split::Test);
        }
        s.parse::<usize>()
            .map(Split::Fold)
            .map_err(|_| Error::format("fold manifest", format!("unknown split '{s}'")))
    }
}

/// Image id → held-out test set or cross-validation fold. Every model variant
/// trains and evaluates on the same manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldManifest {
    assignments: Vec<(String, Split)>,
    folds: usize,
}

impl FoldManifest {
    pub fn new(assignments: Vec<(String, Split)>, folds: usize) -> Result<Self> {
        for (id, split) in &assignments {
            if let Split::Fold(k) = split {
                if *k >= folds {
                    return Err(Error::Validation(format!(
                        "image '{id}' assigned to fold {k} of {folds}"
                    )));
                }
            }
        }
        Ok(FoldManifest { assignments, folds })
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn assignments(&self) -> &[(String, Split)] {
        &self.assignments
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.assignments.iter().find(|(i, _)| i == id).map(|(_, s)| *s)
    }

    fn ids_where(&self, pred: impl Fn(Split) -> bool) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, s)| pred(*s))
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn test_ids(&self) -> Vec<String> {
        self.ids_where(|s| s == Split::Test)
    }

    pub fn val_ids(&self, fold: usize) -> Vec<String> {
        self.ids_where(|s| s == Split::Fold(fold))
    }

    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.ids_where(|s| matches!(s, Split::Fold(k) if k != fold))
    }

    /// `image_id,split` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,split\n");
        for (id, split) in &self.assignments {
            out.push_str(&format!("{id},{split}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut assignments = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != 2 {
                return Err(Error::format("fold manifest", "expected `image_id,split` rows"));
            }
            assignments.push((record[0].to_string(), record[1].parse()?));
        }
        let folds = assignments
            .iter()
            .filter_map(|(_, s)| match s {
                Split::Fold(k) => Some(k + 1),
                Split::Test => None,
            })
            .max()
            .unwrap_or(0);
        Self::new(assignments, folds)
    }
}

/// Samples `⌊n · holdout_fraction⌋` test images, then deals the rest round-robin
/// into `k` folds after a seeded shuffle.
pub fn make_folds(image_ids: &[String], k: usize, holdout_fraction: f64, seed: u64) -> Result<FoldManifest> {
    if k == 0 {
        return Err(Error::Config("fold count must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::Config(format!(
            "holdout fraction {holdout_fraction} outside [0, 1)"
        )));
    }
    let n = image_ids.len();
    let holdout = (n as f64 * holdout_fraction).floor() as usize;
    if n - holdout < k {
        return Err(Error::Validation(format!(
            "{} images after holding out {holdout} cannot fill {k} folds",
            n - holdout
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate().skip(holdout) {
        splits[i] = Split::Fold((rank - holdout) % k);
    }
    let assignments = image_ids.iter().cloned().zip(splits).collect();
    FoldManifest::new(assignments, k)
}
