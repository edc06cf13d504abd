//! Deterministic Adam training loop over query/positive pairs with
//! in-batch negatives.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::data::TrainPair;
use crate::encoder::{encode_all_layers, EncoderConfig, EncoderParams, TokenBatch, Vocab};
use crate::error::{Error, Result};
use crate::objectives::{objective_loss, ObjectiveConfig};
use crate::tensor::Tensor;

const DATA_STREAM: u64 = 1;
const OBJECTIVE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub encoder: EncoderConfig,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Where the CLI writes checkpoints. Not part of the persisted snapshot,
    /// so identical runs into different directories stay byte-identical.
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveConfig::default(),
            encoder: EncoderConfig::default(),
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 200,
            batch_size: 32,
            seed: 0,
            log_every: 50,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.objective.validate(self.encoder.d_model)?;
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor<f32>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects the whole step, leaving params
/// and state untouched, if any gradient is non-finite.
pub fn adam_step(
    params: &mut [&mut Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.expect_same_dims(g, "adam_step")?;
        if !g.all_finite() {
            return Err(Error::InvalidArgument(format!(
                "adam: non-finite gradient in parameter {i}"
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (hyper.beta1 as f32, hyper.beta2 as f32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv as f64 / bc1;
            let vhat = *vv as f64 / bc2;
            *pv -= (hyper.learning_rate * mhat / (vhat.sqrt() + hyper.epsilon)) as f32;
        }
    }
    Ok(())
}

/// Epoch-shuffled batch indices. Each epoch is a fresh permutation drawn
/// from the run seed; a trailing partial batch is dropped unless the data
/// set is smaller than one batch.
pub struct BatchSchedule {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(DATA_STREAM);
        Ok(Self {
            n,
            batch_size: batch_size.min(n),
            rng,
            order: Vec::new(),
            cursor: usize::MAX,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor.saturating_add(self.batch_size) > self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let b = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        b
    }
}

pub fn objective_rng(cfg: &ObjectiveConfig) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(OBJECTIVE_STREAM);
    rng
}

pub fn init_params(cfg: &TrainConfig) -> Result<EncoderParams<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    EncoderParams::init(&cfg.encoder, &mut rng)
}

/// Tokenised training pair.
#[derive(Clone, Debug)]
pub struct TokenizedPair {
    pub query: Vec<usize>,
    pub positive: Vec<usize>,
}

pub fn tokenize_pairs(pairs: &[TrainPair], vocab: &Vocab, max_len: usize) -> Vec<TokenizedPair> {
    pairs
        .iter()
        .map(|p| TokenizedPair {
            query: vocab.tokenize(&p.query, max_len),
            positive: vocab.tokenize(&p.positive, max_len),
        })
        .collect()
}

pub fn make_batches(pairs: &[TokenizedPair], idx: &[usize]) -> Result<(TokenBatch, TokenBatch)> {
    if idx.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let q: Vec<Vec<usize>> = idx.iter().map(|&i| pairs[i].query.clone()).collect();
    let d: Vec<Vec<usize>> = idx.iter().map(|&i| pairs[i].positive.clone()).collect();
    Ok((TokenBatch::from_sequences(&q)?, TokenBatch::from_sequences(&d)?))
}

/// Objective value of `params` on one batch, without updating anything.
pub fn evaluate_objective(
    params: &EncoderParams<f32>,
    cfg: &TrainConfig,
    queries: &TokenBatch,
    docs: &TokenBatch,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let w = params.bind(&mut g, false)?;
    let q = encode_all_layers(&mut g, &w, &cfg.encoder, queries)?;
    let d = encode_all_layers(&mut g, &w, &cfg.encoder, docs)?;
    let loss = objective_loss(&mut g, &q, &d, &cfg.objective, rng)?;
    Ok(g.value(loss).item() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Loss before the update at every step.
    pub losses: Vec<f64>,
}

pub fn train(cfg: &TrainConfig, data: &[TrainPair], vocab: &Vocab) -> Result<TrainRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if vocab.len() > cfg.encoder.vocab_size {
        return Err(Error::Config(format!(
            "vocab has {} entries but encoder vocab_size is {}",
            vocab.len(),
            cfg.encoder.vocab_size
        )));
    }
    let pairs = tokenize_pairs(data, vocab, cfg.encoder.max_seq_len);
    let mut params = init_params(cfg)?;
    let mut adam = AdamState::new(&params.leaves());
    let hyper = cfg.hyper();
    let mut schedule = BatchSchedule::new(pairs.len(), cfg.batch_size, cfg.seed)?;
    let mut obj_rng = objective_rng(&cfg.objective);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = schedule.next_batch();
        let (qb, db) = make_batches(&pairs, &idx)?;

        let mut g = Graph::<f32>::new();
        let w = params.bind(&mut g, true)?;
        let q = encode_all_layers(&mut g, &w, &cfg.encoder, &qb)?;
        let d = encode_all_layers(&mut g, &w, &cfg.encoder, &db)?;
        let loss = objective_loss(&mut g, &q, &d, &cfg.objective, &mut obj_rng)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        losses.push(value);
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("step {step:>5}  loss {value:.6}");
        }

        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = w.leaves().into_iter().map(|&v| grads.take(v)).collect();
        drop(g);
        adam_step(&mut params.leaves_mut(), &grads, &mut adam, &hyper)?;
    }

    let final_loss = *losses.last().expect("at least one step");
    Ok(TrainRun {
        checkpoint: Checkpoint {
            encoder: cfg.encoder.clone(),
            params,
            train: cfg.clone(),
            final_loss,
        },
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(lr: f64) -> AdamHyper {
        AdamHyper {
            learning_rate: lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, &hyper(0.1)).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t=1: m = 0.2, v = 0.004; mhat = 2, vhat = 4; step = lr * 2 / (2 + 1e-8)
        let mut p = Tensor::new(vec![2], vec![0.0f32, 1.0]).unwrap();
        let mut st = AdamState::new(&[&p]);
        let g = Tensor::filled(&[2], 2.0f32);
        adam_step(&mut [&mut p], &[g], &mut st, &hyper(0.1)).unwrap();
        let expected = 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.data()[0] + expected as f32).abs() < 1e-6);
        assert!((p.data()[1] - (1.0 - expected as f32)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let mut st = AdamState::new(&[&p]);
        let g = Tensor::new(vec![1], vec![f32::NAN]).unwrap();
        assert!(adam_step(&mut [&mut p], &[g], &mut st, &hyper(0.1)).is_err());
        assert_eq!(st.t, 0);
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn schedule_covers_epoch() {
        let mut s = BatchSchedule::new(10, 4, 7).unwrap();
        let a = s.next_batch();
        let b = s.next_batch();
        let mut seen: Vec<usize> = a.iter().chain(&b).copied().collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        // third call starts a new epoch (2 leftovers dropped)
        assert_eq!(s.next_batch().len(), 4);
        let mut small = BatchSchedule::new(3, 8, 1).unwrap();
        assert_eq!(small.next_batch().len(), 3);
    }
}
