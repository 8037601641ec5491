//! Pieces shared by the secure protocol and the plaintext oracle: batch
//! schedules, seeded initialisation, per-iteration history and recorded
//! trajectories.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{GroupArch, PassiveModel};
use crate::error::Result;
use crate::grouping::Assembler;
use crate::rng::{substream, Stream};
use crate::secure_lr::init_weights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
    Inference,
}

impl Phase {
    fn index(self) -> u64 {
        match self {
            Phase::Pretrain => 0,
            Phase::Finetune => 1,
            Phase::Inference => 2,
        }
    }
}

/// Which LR model an init draw belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrOwner {
    Source,
    Target,
}

/// Shared batch order for one epoch. Both parties of a protocol pair derive
/// it from the common seed.
pub fn epoch_batches(ids: &[usize], batch_size: usize, seed: u64, phase: Phase, epoch: usize, reshuffle: bool) -> Vec<Vec<usize>> {
    let round = if reshuffle { epoch as u64 } else { 0 };
    let mut order = ids.to_vec();
    order.shuffle(&mut substream(seed, Stream::Shuffle, phase.index() << 32 | round));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Uniform draw with replacement from `pool`.
pub fn sample_target<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], n: usize) -> Vec<usize> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

pub fn target_rng(seed: u64) -> rand_chacha::ChaCha20Rng {
    substream(seed, Stream::TargetSample, 0)
}

/// Deterministic hold-out of `fraction` of `ids` for validation.
pub fn validation_split(ids: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = ids.to_vec();
    order.shuffle(&mut substream(seed, Stream::Shuffle, u64::MAX));
    let n_val = ((ids.len() as f64) * fraction).round().clamp(1.0, (ids.len().saturating_sub(1)) as f64) as usize;
    let val = order.split_off(order.len() - n_val);
    (order, val)
}

pub fn init_passive(assembler: &Assembler, archs: &[GroupArch], seed: u64) -> Result<PassiveModel> {
    PassiveModel::init(assembler.clone(), archs, &mut substream(seed, Stream::Init, 0))
}

/// `(W^C, W^p, b)` on the fixed-point grid.
pub fn init_lr(g: usize, m: usize, frac_bits: u32, seed: u64, owner: LrOwner) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let idx = match owner {
        LrOwner::Source => 1,
        LrOwner::Target => 2,
    };
    init_weights(g, m, frac_bits, &mut substream(seed, Stream::Init, idx))
}

pub fn phase_stream(seed: u64, which: Stream, phase: Phase) -> rand_chacha::ChaCha20Rng {
    substream(seed, which, 16 + phase.index())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub iteration: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adv_loss: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub disc_accuracy: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

/// Per-epoch means of the label loss.
pub fn epoch_losses(history: &[IterRecord], phase: Phase) -> Vec<f64> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in history.iter().filter(|r| r.phase == phase) {
        match out.last_mut() {
            Some(e) if e.0 == r.epoch => {
                e.1 += r.loss;
                e.2 += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter().map(|(_, s, n)| s / n as f64).collect()
}

/// LR weights after every iteration together with that iteration's logits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub w_c: Vec<Vec<f64>>,
    pub w_p: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn push(&mut self, w_c: Vec<f64>, w_p: Vec<f64>, b: f64, logits: Vec<f64>) {
        self.w_c.push(w_c);
        self.w_p.push(w_p);
        self.b.push(b);
        self.logits.push(logits);
    }

    pub fn extend(&mut self, other: Trajectory) {
        self.w_c.extend(other.w_c);
        self.w_p.extend(other.w_p);
        self.b.extend(other.b);
        self.logits.extend(other.logits);
    }

    pub fn truncate(&mut self, n: usize) {
        self.w_c.truncate(n);
        self.w_p.truncate(n);
        self.b.truncate(n);
        self.logits.truncate(n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_are_shared_and_cover_ids() {
        let ids: Vec<usize> = (10..47).collect();
        let a = epoch_batches(&ids, 8, 5, Phase::Pretrain, 0, true);
        assert_eq!(a, epoch_batches(&ids, 8, 5, Phase::Pretrain, 0, true));
        assert_ne!(a, epoch_batches(&ids, 8, 5, Phase::Pretrain, 1, true));
        assert_eq!(a, epoch_batches(&ids, 8, 5, Phase::Pretrain, 3, false));
        let mut flat: Vec<usize> = a.concat();
        flat.sort_unstable();
        assert_eq!(flat, ids);
        assert_eq!(a.len(), 5);
        assert_eq!(a[4].len(), 5);
    }

    #[test]
    fn validation_holdout() {
        let ids: Vec<usize> = (0..50).collect();
        let (tr, va) = validation_split(&ids, 0.2, 1);
        assert_eq!((tr.len(), va.len()), (40, 10));
        assert!(va.iter().all(|v| !tr.contains(v)));
    }

    #[test]
    fn epoch_means() {
        let rec = |e, l| IterRecord { phase: Phase::Finetune, epoch: e, iteration: 0, loss: l, adv_loss: None, disc_accuracy: vec![], val_loss: None };
        let h = vec![rec(0, 1.0), rec(0, 3.0), rec(1, 0.5)];
        assert_eq!(epoch_losses(&h, Phase::Finetune), vec![2.0, 0.5]);
        assert!(epoch_losses(&h, Phase::Pretrain).is_empty());
    }
}
