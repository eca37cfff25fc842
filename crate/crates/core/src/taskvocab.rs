//! Task-token vocabulary, prompt construction and the learned embedding table.
//!
//! A prompt always has exactly `k` slots, one per task in the vocabulary.
//! Active slots carry a task and the index of the mask it is confined to;
//! the rest hold the shared `<SKIP-TASK>` token.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOKEN_DIM: usize = 128;
const EMBEDDING_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    /// Object removal.
    #[serde(rename = "OR")]
    Removal,
    /// Edge enhancement.
    #[serde(rename = "EE")]
    EdgeEnhance,
    /// Harmonization.
    #[serde(rename = "HR")]
    Harmonize,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Removal, TaskId::EdgeEnhance, TaskId::Harmonize];

    pub fn code(self) -> &'static str {
        match self {
            TaskId::Removal => "OR",
            TaskId::EdgeEnhance => "EE",
            TaskId::Harmonize => "HR",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "OR" => Ok(TaskId::Removal),
            "EE" => Ok(TaskId::EdgeEnhance),
            "HR" => Ok(TaskId::Harmonize),
            other => Err(Error::UnknownTask(other.to_string())),
        }
    }
}

/// Ordered set of supported tasks; the prompt length `k` equals its size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tasks: Vec<TaskId>,
}

impl Vocab {
    pub fn new(tasks: Vec<TaskId>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidConfig("vocabulary needs at least one task".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].contains(t) {
                return Err(Error::DuplicateTask(*t));
            }
        }
        Ok(Self { tasks })
    }

    pub fn k(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn index_of(&self, task: TaskId) -> Result<usize> {
        self.tasks
            .iter()
            .position(|&t| t == task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn contains(&self, task: TaskId) -> bool {
        self.tasks.contains(&task)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Active { task: TaskId, mask_index: usize },
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskPrompt {
    slots: Vec<Slot>,
}

impl TaskPrompt {
    /// Builds a prompt from raw slots, checking it against `vocab`.
    pub fn from_slots(vocab: &Vocab, slots: Vec<Slot>) -> Result<Self> {
        if slots.len() != vocab.k() {
            return Err(Error::InvalidPrompt(format!(
                "prompt has {} slots, vocabulary needs {}",
                slots.len(),
                vocab.k()
            )));
        }
        let mut seen = Vec::new();
        for slot in &slots {
            if let Slot::Active { task, .. } = slot {
                vocab.index_of(*task)?;
                if seen.contains(task) {
                    return Err(Error::DuplicateTask(*task));
                }
                seen.push(*task);
            }
        }
        Ok(Self { slots })
    }

    pub fn all_skip(vocab: &Vocab) -> Self {
        Self { slots: vec![Slot::Skip; vocab.k()] }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn active(&self) -> impl Iterator<Item = (TaskId, usize)> + '_ {
        self.slots.iter().filter_map(|s| match *s {
            Slot::Active { task, mask_index } => Some((task, mask_index)),
            Slot::Skip => None,
        })
    }

    /// Checks that every active slot points into a mask list of `n_masks`.
    pub fn validate_masks(&self, n_masks: usize) -> Result<()> {
        for (task, idx) in self.active() {
            if idx >= n_masks {
                return Err(Error::InvalidPrompt(format!(
                    "task {task} refers to mask {idx} but only {n_masks} masks were given"
                )));
            }
        }
        Ok(())
    }

    /// Reorders slots: slot `i` of the result is slot `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { slots: perm.iter().map(|&i| self.slots[i]).collect() }
    }
}

/// Training prompt: `active` placed at a uniformly drawn slot, SKIP elsewhere.
pub fn make_training_prompt<R: Rng + ?Sized>(vocab: &Vocab, active: TaskId, rng: &mut R) -> Result<TaskPrompt> {
    vocab.index_of(active)?;
    let k = vocab.k();
    let pos = rng.random_range(0..k);
    let mut slots = vec![Slot::Skip; k];
    slots[pos] = Slot::Active { task: active, mask_index: 0 };
    Ok(TaskPrompt { slots })
}

/// Inference prompt: requested tasks first, in order, then SKIP padding.
pub fn make_inference_prompt(vocab: &Vocab, requests: &[(TaskId, usize)]) -> Result<TaskPrompt> {
    if requests.is_empty() {
        return Err(Error::InvalidPrompt("at least one task is required".into()));
    }
    if requests.len() > vocab.k() {
        return Err(Error::TooManyTasks { requested: requests.len(), capacity: vocab.k() });
    }
    let mut slots: Vec<Slot> =
        requests.iter().map(|&(task, mask_index)| Slot::Active { task, mask_index }).collect();
    slots.resize(vocab.k(), Slot::Skip);
    TaskPrompt::from_slots(vocab, slots)
}

/// Learned embeddings: rows `0..k` are the task tokens in vocabulary order,
/// row `k` is the shared SKIP token.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    weights: Var,
    k: usize,
    dim: usize,
}

impl EmbeddingTable {
    pub fn from_var(weights: Var, k: usize) -> Result<Self> {
        let (rows, dim) = weights.dims2()?;
        if rows != k + 1 {
            return Err(Error::ShapeMismatch(format!("embedding table has {rows} rows, expected {}", k + 1)));
        }
        Ok(Self { weights, k, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn var(&self) -> &Var {
        &self.weights
    }

    pub fn task_embeddings(&self) -> Result<Tensor> {
        Ok(self.weights.narrow(0, 0, self.k)?)
    }

    pub fn skip_embedding(&self) -> Result<Tensor> {
        Ok(self.weights.narrow(0, self.k, 1)?.squeeze(0)?)
    }
}

pub fn build_vocab(task_ids: &[TaskId], d: usize, seed: u64) -> Result<(Vocab, EmbeddingTable)> {
    build_vocab_with(task_ids, d, seed, DType::F32, &Device::Cpu)
}

pub fn build_vocab_with(
    task_ids: &[TaskId],
    d: usize,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<(Vocab, EmbeddingTable)> {
    if d == 0 {
        return Err(Error::InvalidConfig("embedding width must be positive".into()));
    }
    let vocab = Vocab::new(task_ids.to_vec())?;
    let k = vocab.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid std");
    let values: Vec<f64> = (0..(k + 1) * d).map(|_| normal.sample(&mut rng)).collect();
    let t = Tensor::from_vec(values, (k + 1, d), device)?.to_dtype(dtype)?;
    let table = EmbeddingTable::from_var(Var::from_tensor(&t)?, k)?;
    Ok((vocab, table))
}

/// Row `i` is the embedding of slot `i`. No positional term is added, so
/// permuting slots permutes rows.
pub fn encode_prompt(prompt: &TaskPrompt, vocab: &Vocab, table: &EmbeddingTable) -> Result<Tensor> {
    if table.k() != vocab.k() || prompt.len() != vocab.k() {
        return Err(Error::ShapeMismatch(format!(
            "prompt of {} slots against a table for {} tasks",
            prompt.len(),
            table.k()
        )));
    }
    let mut idx = Vec::with_capacity(prompt.len());
    for slot in prompt.slots() {
        idx.push(match *slot {
            Slot::Active { task, .. } => vocab.index_of(task)? as u32,
            Slot::Skip => table.k() as u32,
        });
    }
    let idx = Tensor::from_vec(idx, prompt.len(), table.var().device())?;
    Ok(table.var().as_tensor().index_select(&idx, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskvocab::TaskId::*;

    fn default_vocab() -> (Vocab, EmbeddingTable) {
        build_vocab(&TaskId::ALL, 16, 3).unwrap()
    }

    #[test]
    fn default_vocab_shape() {
        let (vocab, table) = build_vocab(&TaskId::ALL, 128, 0).unwrap();
        assert_eq!(vocab.k(), 3);
        assert_eq!(table.var().dims(), &[4, 128]);
        let (v1, t1) = build_vocab(&[Removal], 8, 0).unwrap();
        assert_eq!(v1.k(), 1);
        assert_eq!(t1.var().dims(), &[2, 8]);
    }

    #[test]
    fn vocab_errors() {
        assert!(matches!(build_vocab(&[Removal, Removal], 8, 0), Err(Error::DuplicateTask(Removal))));
        assert!(build_vocab(&[Removal], 0, 0).is_err());
        assert!(build_vocab(&[], 8, 0).is_err());
    }

    #[test]
    fn embeddings_deterministic_and_scaled() {
        let a = build_vocab(&TaskId::ALL, 128, 42).unwrap().1;
        let b = build_vocab(&TaskId::ALL, 128, 42).unwrap().1;
        let va: Vec<f32> = a.var().flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = b.var().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), vb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let n = va.len() as f64;
        let mean = va.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (va.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((std - 0.02).abs() < 0.003, "std {std}");
    }

    #[test]
    fn single_task_training_prompt() {
        let (vocab, _) = build_vocab(&[Removal], 8, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = make_training_prompt(&vocab, Removal, &mut rng).unwrap();
        assert_eq!(p.slots(), &[Slot::Active { task: Removal, mask_index: 0 }]);
    }

    #[test]
    fn training_prompt_rejects_unknown_task() {
        let (vocab, _) = build_vocab(&[Removal], 8, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(make_training_prompt(&vocab, Harmonize, &mut rng), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn training_prompts_reproducible() {
        let (vocab, _) = default_vocab();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| make_training_prompt(&vocab, EdgeEnhance, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn inference_prompt_layout() {
        let (vocab, _) = default_vocab();
        let p = make_inference_prompt(&vocab, &[(Removal, 0), (EdgeEnhance, 1)]).unwrap();
        assert_eq!(
            p.slots(),
            &[
                Slot::Active { task: Removal, mask_index: 0 },
                Slot::Active { task: EdgeEnhance, mask_index: 1 },
                Slot::Skip
            ]
        );
        let p = make_inference_prompt(&vocab, &[(Harmonize, 0)]).unwrap();
        assert_eq!(p.slots()[1..], [Slot::Skip, Slot::Skip]);
    }

    #[test]
    fn inference_prompt_errors() {
        let (vocab, _) = default_vocab();
        let four = [(Removal, 0), (EdgeEnhance, 1), (Harmonize, 2), (Removal, 3)];
        assert!(matches!(make_inference_prompt(&vocab, &four), Err(Error::TooManyTasks { requested: 4, capacity: 3 })));
        assert!(matches!(
            make_inference_prompt(&vocab, &[(Removal, 0), (Removal, 1)]),
            Err(Error::DuplicateTask(Removal))
        ));
    }

    #[test]
    fn encode_is_lookup() {
        let (vocab, table) = default_vocab();
        let p = make_inference_prompt(&vocab, &[(Removal, 0)]).unwrap();
        let rows: Vec<Vec<f32>> = encode_prompt(&p, &vocab, &table).unwrap().to_vec2().unwrap();
        let tasks: Vec<Vec<f32>> = table.task_embeddings().unwrap().to_vec2().unwrap();
        let skip: Vec<f32> = table.skip_embedding().unwrap().to_vec1().unwrap();
        assert_eq!(rows, vec![tasks[0].clone(), skip.clone(), skip.clone()]);

        let all_skip = encode_prompt(&TaskPrompt::all_skip(&vocab), &vocab, &table).unwrap();
        let rows: Vec<Vec<f32>> = all_skip.to_vec2().unwrap();
        assert!(rows.iter().all(|r| *r == skip));
    }

    #[test]
    fn encode_rejects_foreign_table() {
        let (vocab, _) = default_vocab();
        let (_, small) = build_vocab(&[Removal], 16, 0).unwrap();
        assert!(encode_prompt(&TaskPrompt::all_skip(&vocab), &vocab, &small).is_err());
    }
}
