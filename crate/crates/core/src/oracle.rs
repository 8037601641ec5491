//! Plaintext replay of the training pipeline: the same models, schedules and
//! update equations with no encryption or masking. It is the reference
//! trajectory for protocol checks and the runner for the baseline settings.

use serde::{Deserialize, Serialize};

use crate::adversarial::{lambda_at, PassiveModel};
use crate::config::{Prepared, RunConfig, Setting};
use crate::data::{Party, TabularDataset};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{bce_loss, sigmoid};
use crate::pipeline::{
    epoch_batches, init_lr, init_passive, sample_target, target_rng, validation_split, IterRecord, LrOwner, Phase,
    Trajectory,
};
use crate::secure_lr::batch_scalars;

/// Logistic regression on `[mu, x]` in floating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlainLr {
    pub w_c: Vec<f64>,
    pub w_p: Vec<f64>,
    pub b: f64,
    pub eta: f64,
    pub t: u64,
}

/// One training step as seen from both sides.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainStep {
    pub loss: f64,
    pub z: Vec<f64>,
    /// Loss gradient with respect to `mu`, computed with the updated weights.
    pub delta_c: Vec<Vec<f64>>,
}

impl PlainLr {
    pub fn new((w_c, w_p, b): (Vec<f64>, Vec<f64>, f64), eta: f64) -> Self {
        PlainLr { w_c, w_p, b, eta, t: 0 }
    }

    pub fn logits(&self, mu: &[Vec<f64>], x: &[Vec<f64>]) -> Result<Vec<f64>> {
        if mu.len() != x.len() {
            return Err(Error::dim("oracle rows", mu.len(), x.len()));
        }
        mu.iter()
            .zip(x)
            .map(|(m, x)| {
                if m.len() != self.w_c.len() || x.len() != self.w_p.len() {
                    return Err(Error::dim("oracle features", self.w_c.len() + self.w_p.len(), m.len() + x.len()));
                }
                let z_c: f64 = m.iter().zip(&self.w_c).map(|(a, w)| a * w).sum();
                let z_p: f64 = x.iter().zip(&self.w_p).map(|(a, w)| a * w).sum::<f64>() + self.b;
                Ok(z_p + z_c)
            })
            .collect()
    }

    pub fn predict(&self, mu: &[Vec<f64>], x: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.logits(mu, x)?.into_iter().map(sigmoid).collect())
    }

    pub fn loss(&self, mu: &[Vec<f64>], x: &[Vec<f64>], y: &[u8]) -> Result<f64> {
        let z = self.logits(mu, x)?;
        let n = z.len().max(1) as f64;
        Ok(z.iter().zip(y).map(|(&z, &y)| bce_loss(sigmoid(z), y).0 / n).sum())
    }

    pub fn step(&mut self, mu: &[Vec<f64>], x: &[Vec<f64>], y: &[u8]) -> Result<PlainStep> {
        let z = self.logits(mu, x)?;
        if y.len() != z.len() {
            return Err(Error::dim("labels", z.len(), y.len()));
        }
        let n = z.len().max(1) as f64;
        let mut loss = 0.0;
        let delta_l: Vec<f64> = z
            .iter()
            .zip(y)
            .map(|(&zi, &yi)| {
                let (l, g) = bce_loss(sigmoid(zi), yi);
                loss += l / n;
                g
            })
            .collect();
        let s = batch_scalars(&delta_l);
        let mut gc = vec![0.0; self.w_c.len()];
        let mut gw = vec![0.0; self.w_p.len()];
        let mut gb = 0.0;
        for ((m, x), sb) in mu.iter().zip(x).zip(&s) {
            gc.iter_mut().zip(m).for_each(|(g, v)| *g += sb * v);
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += sb * v);
            gb += sb;
        }
        let eta = self.eta;
        self.w_c.iter_mut().zip(&gc).for_each(|(w, g)| *w -= eta * g);
        self.w_p.iter_mut().zip(&gw).for_each(|(w, g)| *w -= eta * g);
        self.b -= eta * gb;
        if !self.b.is_finite() || self.w_c.iter().chain(&self.w_p).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("oracle weights after update".into()));
        }
        self.t += 1;
        let delta_c = s.iter().map(|s| self.w_c.iter().map(|w| s * w).collect()).collect();
        Ok(PlainStep { loss, z, delta_c })
    }
}

/// Trained plaintext models. `passive` is absent for A-Local.
#[derive(Clone, Debug)]
pub struct OracleModels {
    pub passive: Option<PassiveModel>,
    pub lr: PlainLr,
    pub history: Vec<IterRecord>,
    pub trajectory: Trajectory,
}

struct PhaseSpec<'a> {
    phase: Phase,
    ids: &'a [usize],
    epochs: usize,
    eta: f64,
    /// Target pool for the adversarial step, when adapting.
    adapt_pool: Option<&'a [usize]>,
    freeze_extractors: bool,
    validation: Option<(&'a [usize], usize)>,
}

fn mu_rows(passive: Option<&PassiveModel>, data: &TabularDataset, ids: &[usize], run: &RunConfig) -> Result<Vec<Vec<f64>>> {
    match passive {
        Some(p) => p.predict(data, ids, run.exec),
        None => Ok(vec![Vec::new(); ids.len()]),
    }
}

fn run_phase(
    run: &RunConfig,
    data: &TabularDataset,
    spec: PhaseSpec<'_>,
    mut passive: Option<&mut PassiveModel>,
    lr: &mut PlainLr,
    record: bool,
) -> Result<(Vec<IterRecord>, Trajectory)> {
    let mut history = Vec::new();
    let mut traj = Trajectory::default();
    let mut trng = target_rng(run.seed);
    let total = spec.epochs * spec.ids.len().div_ceil(run.batch_size).max(1);
    let mut step = 0usize;
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    for epoch in 0..spec.epochs {
        for ids in epoch_batches(spec.ids, run.batch_size, run.seed, spec.phase, epoch, run.reshuffle) {
            let mut adv = None;
            let mut acc = Vec::new();
            if let (Some(pool), Some(p)) = (spec.adapt_pool, passive.as_deref_mut()) {
                let tgt = sample_target(&mut trng, pool, run.target_batch());
                let lambda = lambda_at(run.lambda, step as f64 / total as f64, run.lambda_warmup);
                let stats = p.adapt(data, &ids, &tgt, lambda, spec.eta, run.exec)?;
                adv = Some(stats.loss);
                acc = stats.accuracy;
            }
            let x = data.view(Party::Active, &ids).rows;
            let y = data.labels_of(&ids);
            let out = match passive.as_deref_mut() {
                Some(p) => {
                    let pass = p.forward(data, &ids, run.exec)?;
                    let out = lr.step(&pass.mu, &x, &y)?;
                    p.backward(data, pass, &out.delta_c, spec.eta, spec.freeze_extractors, run.exec)?;
                    out
                }
                None => lr.step(&vec![Vec::new(); ids.len()], &x, &y)?,
            };
            history.push(IterRecord {
                phase: spec.phase,
                epoch,
                iteration: lr.t,
                loss: out.loss,
                adv_loss: adv,
                disc_accuracy: acc,
                val_loss: None,
            });
            if record {
                traj.push(lr.w_c.clone(), lr.w_p.clone(), lr.b, out.z);
            }
            step += 1;
        }
        if let Some((val, patience)) = spec.validation {
            let mu = mu_rows(passive.as_deref(), data, val, run)?;
            let vl = lr.loss(&mu, &data.view(Party::Active, val).rows, &data.labels_of(val))?;
            if let Some(last) = history.last_mut() {
                last.val_loss = Some(vl);
            }
            if vl < best {
                best = vl;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok((history, traj))
}

/// Adversarial pre-training in plaintext with the source LR head.
pub fn pretrain(
    run: &RunConfig,
    data: &TabularDataset,
    source: &[usize],
    target_pool: Option<&[usize]>,
    passive: &mut PassiveModel,
    record: bool,
) -> Result<(PlainLr, Vec<IterRecord>, Trajectory)> {
    let m = data.schema.party_columns(Party::Active).len();
    let mut lr = PlainLr::new(init_lr(passive.g(), m, run.frac_bits, run.seed, LrOwner::Source)?, run.eta_pretrain);
    let spec = PhaseSpec {
        phase: Phase::Pretrain,
        ids: source,
        epochs: run.epochs_pretrain,
        eta: run.eta_pretrain,
        adapt_pool: target_pool,
        freeze_extractors: false,
        validation: None,
    };
    let (h, t) = run_phase(run, data, spec, Some(passive), &mut lr, record)?;
    Ok((lr, h, t))
}

/// Fine-tuning in plaintext with a fresh target LR head.
/// Without a passive model this is party A's local regression.
pub fn finetune(
    run: &RunConfig,
    data: &TabularDataset,
    labeled: &[usize],
    passive: Option<&mut PassiveModel>,
    record: bool,
) -> Result<(PlainLr, Vec<IterRecord>, Trajectory)> {
    let m = data.schema.party_columns(Party::Active).len();
    let g = passive.as_ref().map_or(0, |p| p.g());
    let mut lr = PlainLr::new(init_lr(g, m, run.frac_bits, run.seed, LrOwner::Target)?, run.eta_finetune);
    let (train, val) = match run.patience {
        Some(_) => validation_split(labeled, run.validation_fraction, run.seed),
        None => (labeled.to_vec(), Vec::new()),
    };
    let spec = PhaseSpec {
        phase: Phase::Finetune,
        ids: &train,
        epochs: run.epochs_finetune,
        eta: run.eta_finetune,
        adapt_pool: None,
        freeze_extractors: run.freeze_extractors,
        validation: run.patience.map(|p| (val.as_slice(), p)),
    };
    let (h, t) = run_phase(run, data, spec, passive, &mut lr, record)?;
    Ok((lr, h, t))
}

/// Train under one of the four data settings with the prepared variant.
pub fn oracle_train(run: &RunConfig, prep: &Prepared, setting: Setting, record: bool) -> Result<OracleModels> {
    let data = &prep.data;
    let split = &prep.split;
    if split.target_labeled.is_empty() && setting != Setting::AbVfl {
        return Err(Error::Data("no labeled target rows".into()));
    }
    match setting {
        Setting::ALocal => {
            let (lr, history, trajectory) = finetune(run, data, &split.target_labeled, None, record)?;
            Ok(OracleModels { passive: None, lr, history, trajectory })
        }
        Setting::AVfl => {
            let mut p = init_passive(&prep.assembler, &prep.archs, run.seed)?;
            let (lr, history, trajectory) = finetune(run, data, &split.target_labeled, Some(&mut p), record)?;
            Ok(OracleModels { passive: Some(p), lr, history, trajectory })
        }
        Setting::AbVfl => {
            let mut p = init_passive(&prep.assembler, &prep.archs, run.seed)?;
            let union: Vec<usize> = split.source.iter().chain(&split.target_labeled).copied().collect();
            let (lr, history, trajectory) = pretrain(run, data, &union, None, &mut p, record)?;
            Ok(OracleModels { passive: Some(p), lr, history, trajectory })
        }
        Setting::BToA => {
            let mut p = init_passive(&prep.assembler, &prep.archs, run.seed)?;
            let pool = split.target_all();
            let adapt = prep.variant.domain_adaptation().then_some(pool.as_slice());
            let (_, mut history, mut trajectory) = pretrain(run, data, &split.source, adapt, &mut p, record)?;
            let (lr, h2, t2) = finetune(run, data, &split.target_labeled, Some(&mut p), record)?;
            history.extend(h2);
            trajectory.extend(t2);
            Ok(OracleModels { passive: Some(p), lr, history, trajectory })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub auc: f64,
    pub ks: f64,
    pub predictions: Vec<f64>,
}

pub fn evaluation(predictions: Vec<f64>, labels: &[u8]) -> Result<Evaluation> {
    if predictions.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    Ok(Evaluation { auc: metrics::auc(&predictions, labels)?, ks: metrics::ks(&predictions, labels)?, predictions })
}

pub fn oracle_evaluate(models: &OracleModels, data: &TabularDataset, ids: &[usize], run: &RunConfig) -> Result<Evaluation> {
    let mu = mu_rows(models.passive.as_ref(), data, ids, run)?;
    let p = models.lr.predict(&mu, &data.view(Party::Active, ids).rows)?;
    evaluation(p, &data.labels_of(ids))
}

/// Constant `c` of the divergence budget `tol(t) = t * c * 2^-frac_bits`.
pub const TOLERANCE_CONSTANT: f64 = 16384.0;

pub fn tolerance(t: usize, frac_bits: u32) -> f64 {
    t as f64 * TOLERANCE_CONSTANT * (-(frac_bits as f64)).exp2()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// Max absolute difference over all LR weights after each iteration.
    pub weights: Vec<f64>,
    /// Max absolute logit difference in each iteration.
    pub logits: Vec<f64>,
    pub tolerance: Vec<f64>,
    pub first_failure: Option<usize>,
}

impl DivergenceReport {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_logit(&self) -> f64 {
        self.logits.iter().copied().fold(0.0, f64::max)
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Per-iteration divergence with the iteration index starting at 1.
pub fn compare_trajectories(secure: &Trajectory, oracle: &Trajectory, frac_bits: u32) -> Result<DivergenceReport> {
    if secure.len() != oracle.len() {
        return Err(Error::dim("trajectory length", oracle.len(), secure.len()));
    }
    let mut r = DivergenceReport { weights: vec![], logits: vec![], tolerance: vec![], first_failure: None };
    for t in 0..secure.len() {
        if secure.w_c[t].len() != oracle.w_c[t].len() || secure.logits[t].len() != oracle.logits[t].len() {
            return Err(Error::Invalid(format!("trajectory shapes differ at iteration {}", t + 1)));
        }
        let w = max_abs(&secure.w_c[t], &oracle.w_c[t])
            .max(max_abs(&secure.w_p[t], &oracle.w_p[t]))
            .max((secure.b[t] - oracle.b[t]).abs());
        let z = max_abs(&secure.logits[t], &oracle.logits[t]);
        let tol = tolerance(t + 1, frac_bits);
        if r.first_failure.is_none() && (w.max(z) > tol || !w.is_finite() || !z.is_finite()) {
            r.first_failure = Some(t + 1);
        }
        r.weights.push(w);
        r.logits.push(z);
        r.tolerance.push(tol);
    }
    Ok(r)
}
