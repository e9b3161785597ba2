//! Seeded synthetic sequence-classification tasks.
//!
//! Both kinds fill positions with value tokens in `0..num_classes` and make
//! the label depend on a pair of tokens, so no per-position readout can
//! solve them without attention.
//!
//! * [`TaskKind::Marker`]: exactly one position `j < seq_len - 1` holds the
//!   marker token `num_classes`; the label is the value at `j + 1`.
//! * [`TaskKind::Pointer`]: position 0 holds a pointer token naming another
//!   position `k` in `1..seq_len`; the label is the value at `k`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Marker,
    Pointer,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Marker => "marker",
            TaskKind::Pointer => "pointer",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marker" => Ok(TaskKind::Marker),
            "pointer" => Ok(TaskKind::Pointer),
            other => Err(Error::Config(format!(
                "unknown task kind `{other}` (expected marker or pointer)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub seq_len: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            kind: TaskKind::Marker,
            seed: 17,
            seq_len: 16,
            num_classes: 8,
            train_size: 4096,
            val_size: 512,
        }
    }
}

impl SyntheticTask {
    /// Value tokens followed by the marker token or by one pointer token
    /// per addressable position.
    pub fn vocab(&self) -> usize {
        match self.kind {
            TaskKind::Marker => self.num_classes + 1,
            TaskKind::Pointer => self.num_classes + self.seq_len - 1,
        }
    }
}

/// Sequences stored flat, `seq_len` tokens per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Gathers the given examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut tokens = Vec::with_capacity(indices.len() * self.seq_len);
        for &i in indices {
            tokens.extend_from_slice(self.sequence(i));
        }
        Batch {
            tokens,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive chunks of at most `size` examples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        (0..self.len())
            .step_by(size)
            .map(move |s| self.batch(&(s..(s + size).min(self.len())).collect::<Vec<_>>()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn make_synthetic_task(task: &SyntheticTask) -> Result<(Dataset, Dataset)> {
    if task.train_size == 0 || task.val_size == 0 {
        return Err(Error::param(
            "train and validation sizes must be at least 1",
        ));
    }
    if task.seq_len < 2 || task.num_classes < 2 {
        return Err(Error::param("need seq_len >= 2 and num_classes >= 2"));
    }
    let mut rng = rng::stream(task.seed, &[rng::DATA]);
    let mut seen = HashSet::new();
    let mut draw = |count: usize| {
        let mut set = Dataset {
            seq_len: task.seq_len,
            tokens: Vec::with_capacity(count * task.seq_len),
            labels: Vec::with_capacity(count),
        };
        while set.len() < count {
            let (seq, label) = match task.kind {
                TaskKind::Marker => {
                    let mut seq: Vec<usize> = (0..task.seq_len)
                        .map(|_| rng.random_range(0..task.num_classes))
                        .collect();
                    let j = rng.random_range(0..task.seq_len - 1);
                    seq[j] = task.num_classes;
                    let label = seq[j + 1];
                    (seq, label)
                }
                TaskKind::Pointer => {
                    let target = rng.random_range(1..task.seq_len);
                    let mut seq = vec![task.num_classes + target - 1];
                    seq.extend((1..task.seq_len).map(|_| rng.random_range(0..task.num_classes)));
                    let label = seq[target];
                    (seq, label)
                }
            };
            // keeps train and validation disjoint
            if seen.insert(seq.clone()) {
                set.tokens.extend(seq);
                set.labels.push(label);
            }
        }
        set
    };
    let train = draw(task.train_size);
    let val = draw(task.val_size);
    Ok((train, val))
}
