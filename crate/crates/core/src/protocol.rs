//! Party actors and the message bus that connects them.
//!
//! Party C (the passive key holder with the grouped feature networks) runs
//! sessions with one active party at a time: B during pre-training, A during
//! fine-tuning and inference. Both sides derive the batch schedule from the
//! shared seed; C initiates every round. Each training round is the exchange
//!
//! ```text
//! C -> p  EncMu            [[mu]] for the batch
//! p -> C  MaskedLogit      [[z~ + eps^p]]
//! C -> p  LogitPlusMask    z^C + eps^p
//! p -> C  MaskedGradC      [[grad + eps^p]]
//! C -> p  MaskedGradTilde  grad + eps^p + nu
//! C -> p  EncAccumNoise    [[eps_{t+1}]]
//! p -> C  EncDeltaC        [[delta^C]]
//! ```
//!
//! and a prediction round stops after `LogitPlusMask`.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;
use std::sync::mpsc;
use std::sync::Mutex;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{lambda_at, AdvStats, MuPass, PassiveModel};
use crate::config::{Prepared, RunConfig, Setting};
use crate::data::{Party, TabularDataset};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{bce_loss, sigmoid};
use crate::oracle::{compare_trajectories, evaluation, oracle_train, DivergenceReport, Evaluation};
use crate::phe::{keygen, Ciphertext, FixedPoint, Keypair, PublicKey};
use crate::pipeline::{
    epoch_batches, init_lr, init_passive, phase_stream, sample_target, target_rng, validation_split, IterRecord,
    LrOwner, Phase, Trajectory,
};
use crate::rng::{stream, Stream};
use crate::secure_lr::{
    c_decrypt_delta, c_mask_grad, c_unmask_logits, encode_mu, encrypt_mu, p_enc_delta_c, p_finish_forward,
    p_masked_grad, p_masked_logits, p_update, secure_backward, secure_forward, ForwardOut, MaskScratch, NoiseState,
    PassiveLr, Rngs, SplitLrState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    ActiveA,
    ActiveB,
    PassiveC,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Kind {
    EncMu,
    MaskedLogit,
    LogitPlusMask,
    MaskedGradC,
    MaskedGradTilde,
    EncAccumNoise,
    EncDeltaC,
    Control,
}

impl Kind {
    /// Whether party C is the sender; `None` for control messages.
    pub fn from_c(self) -> Option<bool> {
        match self {
            Kind::EncMu | Kind::LogitPlusMask | Kind::MaskedGradTilde | Kind::EncAccumNoise => Some(true),
            Kind::MaskedLogit | Kind::MaskedGradC | Kind::EncDeltaC => Some(false),
            Kind::Control => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum Control {
    /// C closes the session.
    Done,
    /// p's early-stopping decision after a validation pass.
    EpochEnd { stop: bool },
    Abort { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body")]
pub enum Payload {
    /// `ids` are the aligned sample ids of the rows, known to both parties.
    EncMu { ids: Vec<usize>, train: bool, rows: Vec<Vec<Ciphertext>> },
    MaskedLogit(Vec<Ciphertext>),
    LogitPlusMask(Vec<FixedPoint>),
    MaskedGradC(Vec<Ciphertext>),
    MaskedGradTilde(Vec<FixedPoint>),
    EncAccumNoise(Vec<Ciphertext>),
    EncDeltaC(Vec<Vec<Ciphertext>>),
    Control(Control),
}

impl Payload {
    pub fn kind(&self) -> Kind {
        match self {
            Payload::EncMu { .. } => Kind::EncMu,
            Payload::MaskedLogit(_) => Kind::MaskedLogit,
            Payload::LogitPlusMask(_) => Kind::LogitPlusMask,
            Payload::MaskedGradC(_) => Kind::MaskedGradC,
            Payload::MaskedGradTilde(_) => Kind::MaskedGradTilde,
            Payload::EncAccumNoise(_) => Kind::EncAccumNoise,
            Payload::EncDeltaC(_) => Kind::EncDeltaC,
            Payload::Control(_) => Kind::Control,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        fn rect(rows: &[Vec<Ciphertext>]) -> Vec<usize> {
            vec![rows.len(), rows.first().map_or(0, Vec::len)]
        }
        match self {
            Payload::EncMu { rows, .. } | Payload::EncDeltaC(rows) => rect(rows),
            Payload::MaskedLogit(v) | Payload::MaskedGradC(v) | Payload::EncAccumNoise(v) => vec![v.len()],
            Payload::LogitPlusMask(v) | Payload::MaskedGradTilde(v) => vec![v.len()],
            Payload::Control(_) => vec![],
        }
    }

    /// Plaintext numbers carried, if any.
    pub fn plaintext(&self) -> Option<&[FixedPoint]> {
        match self {
            Payload::LogitPlusMask(v) | Payload::MaskedGradTilde(v) => Some(v),
            _ => None,
        }
    }

    pub fn ciphertexts(&self) -> Vec<&Ciphertext> {
        match self {
            Payload::EncMu { rows, .. } | Payload::EncDeltaC(rows) => rows.iter().flatten().collect(),
            Payload::MaskedLogit(v) | Payload::MaskedGradC(v) | Payload::EncAccumNoise(v) => v.iter().collect(),
            _ => Vec::new(),
        }
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("payload serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartyMessage {
    pub round_id: u64,
    /// Split-LR iteration the round belongs to.
    pub iteration: u64,
    pub from: Role,
    pub to: Role,
    pub payload: Payload,
}

impl PartyMessage {
    pub fn kind(&self) -> Kind {
        self.payload.kind()
    }
}

/// Direction, key and shape checks shared by both receivers.
pub fn check_schema(msg: &PartyMessage, pk: &PublicKey, g: usize) -> Result<()> {
    let kind = msg.kind();
    let c_sent = msg.from == Role::PassiveC;
    if msg.from == msg.to || (msg.from != Role::PassiveC && msg.to != Role::PassiveC) {
        return Err(Error::Protocol(format!("{kind:?} routed {:?} -> {:?}", msg.from, msg.to)));
    }
    if kind.from_c().is_some_and(|c| c != c_sent) {
        return Err(Error::Protocol(format!("{kind:?} may not be sent by {:?}", msg.from)));
    }
    if matches!(msg.payload, Payload::Control(Control::Done)) && !c_sent {
        return Err(Error::Protocol("only C closes a session".into()));
    }
    if matches!(msg.payload, Payload::Control(Control::EpochEnd { .. })) && c_sent {
        return Err(Error::Protocol("only the active party ends a validation pass".into()));
    }
    if msg.payload.ciphertexts().iter().any(|c| c.key_id != pk.fingerprint()) {
        return Err(Error::Protocol(format!("{kind:?} carries a ciphertext under a foreign key")));
    }
    let f = pk.frac_bits();
    let bad = |what: &str| Err(Error::Protocol(format!("{kind:?}: {what}")));
    match &msg.payload {
        Payload::EncMu { ids, rows, .. } => {
            if ids.is_empty() || ids.len() != rows.len() {
                return bad("row count does not match ids");
            }
            if rows.iter().any(|r| r.len() != g) {
                return bad("row width differs from g");
            }
        }
        Payload::EncDeltaC(rows) => {
            if rows.is_empty() || rows.iter().any(|r| r.len() != g) {
                return bad("row width differs from g");
            }
        }
        Payload::MaskedGradC(v) | Payload::EncAccumNoise(v) if v.len() != g => return bad("length differs from g"),
        Payload::MaskedGradTilde(v) if v.len() != g => return bad("length differs from g"),
        Payload::LogitPlusMask(v) | Payload::MaskedGradTilde(v) if v.iter().any(|x| x.exponent != 2 * f) => {
            return bad("values off the 2F grid");
        }
        Payload::MaskedLogit(v) if v.is_empty() => return bad("empty"),
        _ => {}
    }
    Ok(())
}

/// One line of the audit transcript. Payload contents are reduced to a
/// digest; `payload` is kept in memory only when requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub round_id: u64,
    pub iteration: u64,
    pub from: Role,
    pub to: Role,
    pub kind: Kind,
    pub shape: Vec<usize>,
    pub digest: String,
    #[serde(skip)]
    pub payload: Option<Payload>,
}

#[derive(Clone, Debug, Default)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
    pub keep_payloads: bool,
    rounds: u64,
}

impl Transcript {
    pub fn new(keep_payloads: bool) -> Self {
        Transcript { entries: Vec::new(), keep_payloads, rounds: 0 }
    }

    fn record(&mut self, msg: &PartyMessage) {
        self.entries.push(TranscriptEntry {
            seq: 0,
            round_id: msg.round_id,
            iteration: msg.iteration,
            from: msg.from,
            to: msg.to,
            kind: msg.kind(),
            shape: msg.payload.shape(),
            digest: msg.payload.digest(),
            payload: self.keep_payloads.then(|| msg.payload.clone()),
        });
    }

    /// Put the entries of the last session into protocol order. Rounds are
    /// strictly sequential and every kind appears at most once per round
    /// and direction, so the order does not depend on thread timing.
    fn seal(&mut self, from: usize) {
        let rank = |e: &TranscriptEntry| match &e.payload {
            _ if e.kind != Kind::Control => e.kind as u8,
            _ => 8 + (e.from == Role::PassiveC) as u8,
        };
        self.entries[from..].sort_by_key(|e| (e.round_id, rank(e)));
        let base = from as u64;
        for (i, e) in self.entries[from..].iter_mut().enumerate() {
            e.seq = base + i as u64;
        }
    }

    pub fn sent_by(&self, role: Role) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.iter().filter(move |e| e.from == role)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// What both parties of a session agree on before it starts.
#[derive(Clone, Debug, PartialEq)]
pub enum SessionKind {
    Train { phase: Phase, ids: Vec<usize>, epochs: usize, eta: f64, validation: Option<(Vec<usize>, usize)> },
    Predict { ids: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionPlan {
    pub kind: SessionKind,
    pub batch_size: usize,
    pub seed: u64,
    pub reshuffle: bool,
    pub g: usize,
}

impl SessionPlan {
    fn phase(&self) -> Phase {
        match &self.kind {
            SessionKind::Train { phase, .. } => *phase,
            SessionKind::Predict { .. } => Phase::Inference,
        }
    }

    fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        match &self.kind {
            SessionKind::Train { phase, ids, .. } => {
                epoch_batches(ids, self.batch_size, self.seed, *phase, epoch, self.reshuffle)
            }
            SessionKind::Predict { ids } => self.chunks(ids),
        }
    }

    fn chunks(&self, ids: &[usize]) -> Vec<Vec<usize>> {
        ids.chunks(self.batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    fn epochs(&self) -> usize {
        match &self.kind {
            SessionKind::Train { epochs, .. } => *epochs,
            SessionKind::Predict { .. } => 1,
        }
    }

    fn eta(&self) -> f64 {
        match &self.kind {
            SessionKind::Train { eta, .. } => *eta,
            SessionKind::Predict { .. } => 0.0,
        }
    }

    fn validation(&self) -> Option<&(Vec<usize>, usize)> {
        match &self.kind {
            SessionKind::Train { validation, .. } => validation.as_ref(),
            SessionKind::Predict { .. } => None,
        }
    }
}

pub trait Actor: Send {
    fn role(&self) -> Role;
    fn start(&mut self) -> Result<Vec<PartyMessage>>;
    fn handle(&mut self, msg: PartyMessage) -> Result<Vec<PartyMessage>>;
    fn finished(&self) -> bool;
}

fn peer_aborted(msg: &PartyMessage) -> Option<Error> {
    match &msg.payload {
        Payload::Control(Control::Abort { reason }) => Some(Error::Protocol(format!("{:?} aborted: {reason}", msg.from))),
        _ => None,
    }
}

/// C's private adversarial configuration for a pre-training session.
#[derive(Clone, Debug)]
pub struct AdaptPlan {
    pub pool: Vec<usize>,
    pub lambda: f64,
    pub warmup: bool,
    pub batch: usize,
}

struct CPending {
    mu: Vec<Vec<FixedPoint>>,
    pass: Option<MuPass>,
}

struct CSession {
    plan: SessionPlan,
    adapt: Option<(AdaptPlan, ChaCha20Rng)>,
    freeze: bool,
    epoch: usize,
    batches: Vec<Vec<usize>>,
    cursor: usize,
    step: usize,
    total: usize,
    pending: BTreeMap<u64, CPending>,
    awaiting_epoch_end: bool,
    done: bool,
}

/// Party C: owns the key pair, the grouped networks and the noise state.
pub struct PassiveParty {
    data: TabularDataset,
    pub model: PassiveModel,
    keypair: Keypair,
    pub noise: Option<NoiseState>,
    nonce: ChaCha20Rng,
    exec: Exec,
    peer: Role,
    round: u64,
    session: Option<CSession>,
    /// `eps` after each iteration, for trajectory reconstruction.
    pub eps_log: Vec<Vec<f64>>,
    /// Adversarial statistics per training iteration (`None` without DA).
    pub adv_log: Vec<Option<AdvStats>>,
}

impl PassiveParty {
    pub fn new(data: TabularDataset, model: PassiveModel, keypair: Keypair, exec: Exec) -> Self {
        PassiveParty {
            data,
            model,
            keypair,
            noise: None,
            nonce: stream(0, Stream::Nonce),
            exec,
            peer: Role::ActiveB,
            round: 0,
            session: None,
            eps_log: Vec::new(),
            adv_log: Vec::new(),
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keypair.public
    }

    pub fn keypair(&self) -> &Keypair {
        &self.keypair
    }

    /// Prepare a session with `peer`. A training session starts a fresh
    /// noise accumulator for the peer's new LR model.
    pub fn begin(&mut self, peer: Role, plan: SessionPlan, adapt: Option<AdaptPlan>, freeze: bool) -> Result<()> {
        if plan.g != self.model.g() {
            return Err(Error::dim("session g", self.model.g(), plan.g));
        }
        let f = self.keypair.public.frac_bits();
        let phase = plan.phase();
        if let SessionKind::Train { eta, .. } = plan.kind {
            self.noise = Some(NoiseState::new(plan.g, eta, f, phase_stream(plan.seed, Stream::NoiseC, phase)));
        } else if self.noise.is_none() {
            return Err(Error::Protocol("prediction requested before any training session".into()));
        }
        self.nonce = phase_stream(plan.seed, Stream::Nonce, phase);
        let batches = plan.batches(0);
        let per_epoch = match &plan.kind {
            SessionKind::Train { ids, .. } => ids.len().div_ceil(plan.batch_size.max(1)).max(1),
            SessionKind::Predict { .. } => 1,
        };
        let adapt = adapt.map(|a| (a, target_rng(plan.seed)));
        self.peer = peer;
        self.session = Some(CSession {
            total: plan.epochs() * per_epoch,
            plan,
            adapt,
            freeze,
            epoch: 0,
            batches,
            cursor: 0,
            step: 0,
            pending: BTreeMap::new(),
            awaiting_epoch_end: false,
            done: false,
        });
        Ok(())
    }

    fn session(&mut self) -> Result<&mut CSession> {
        self.session.as_mut().ok_or_else(|| Error::Protocol("C has no open session".into()))
    }

    fn noise(&self) -> Result<&NoiseState> {
        self.noise.as_ref().ok_or_else(|| Error::Protocol("C has no noise state".into()))
    }

    fn msg(&self, round_id: u64, payload: Payload) -> Result<PartyMessage> {
        Ok(PartyMessage { round_id, iteration: self.noise()?.t, from: Role::PassiveC, to: self.peer, payload })
    }

    fn done(&mut self) -> Result<Vec<PartyMessage>> {
        self.round += 1;
        self.session()?.done = true;
        Ok(vec![self.msg(self.round, Payload::Control(Control::Done))?])
    }

    fn send_mu(&mut self, ids: Vec<usize>, train: bool) -> Result<PartyMessage> {
        let exec = self.exec;
        let f = self.keypair.public.frac_bits();
        let (mu_plain, pass) = if train {
            let pass = self.model.forward(&self.data, &ids, exec)?;
            (pass.mu.clone(), Some(pass))
        } else {
            (self.model.predict(&self.data, &ids, exec)?, None)
        };
        let mu = encode_mu(&mu_plain, f)?;
        let rows = encrypt_mu(&self.keypair, &mu, &mut self.nonce, exec)?;
        self.round += 1;
        let round = self.round;
        self.session()?.pending.insert(round, CPending { mu, pass });
        self.msg(round, Payload::EncMu { ids, train, rows })
    }

    fn train_round(&mut self) -> Result<Vec<PartyMessage>> {
        let exec = self.exec;
        let s = self.session.as_mut().expect("open session");
        let ids = s.batches[s.cursor].clone();
        let eta = s.plan.eta();
        let progress = s.step as f64 / s.total as f64;
        let stats = match &mut s.adapt {
            Some((a, rng)) => {
                let tgt = sample_target(rng, &a.pool, a.batch);
                let lambda = lambda_at(a.lambda, progress, a.warmup);
                Some(self.model.adapt(&self.data, &ids, &tgt, lambda, eta, exec)?)
            }
            None => None,
        };
        self.adv_log.push(stats);
        Ok(vec![self.send_mu(ids, true)?])
    }

    /// Continue after a completed round or validation decision.
    fn advance(&mut self) -> Result<Vec<PartyMessage>> {
        loop {
            let s = self.session()?;
            if s.epoch >= s.plan.epochs() {
                return self.done();
            }
            if s.cursor < s.batches.len() {
                return self.train_round();
            }
            if let Some((val, _)) = s.plan.validation().filter(|_| !s.awaiting_epoch_end) {
                let chunks = s.plan.chunks(val);
                s.awaiting_epoch_end = true;
                return chunks.into_iter().map(|ids| self.send_mu(ids, false)).collect();
            }
            s.awaiting_epoch_end = false;
            s.epoch += 1;
            s.batches = s.plan.batches(s.epoch);
            s.cursor = 0;
        }
    }
}

impl Actor for PassiveParty {
    fn role(&self) -> Role {
        Role::PassiveC
    }

    fn start(&mut self) -> Result<Vec<PartyMessage>> {
        let s = self.session()?;
        match s.plan.kind.clone() {
            SessionKind::Train { .. } => self.advance(),
            SessionKind::Predict { ids } => {
                let mut out: Vec<PartyMessage> =
                    s.plan.chunks(&ids).into_iter().map(|c| self.send_mu(c, false)).collect::<Result<_>>()?;
                if out.is_empty() {
                    out = self.done()?;
                }
                Ok(out)
            }
        }
    }

    fn handle(&mut self, msg: PartyMessage) -> Result<Vec<PartyMessage>> {
        if let Some(e) = peer_aborted(&msg) {
            return Err(e);
        }
        let g = self.model.g();
        check_schema(&msg, &self.keypair.public, g)?;
        if msg.from != self.peer || msg.to != Role::PassiveC {
            return Err(Error::Protocol(format!("unexpected sender {:?}", msg.from)));
        }
        let exec = self.exec;
        let t = self.noise()?.t;
        match msg.payload {
            Payload::MaskedLogit(masked) => {
                check_iteration(msg.iteration, t)?;
                let s = self.session.as_ref().ok_or_else(|| Error::Protocol("C has no open session".into()))?;
                let pend = s.pending.get(&msg.round_id).ok_or_else(|| unknown_round(msg.round_id))?;
                let noise = self.noise.as_ref().expect("noise state");
                let lpm = c_unmask_logits(&self.keypair, noise, &pend.mu, &masked, exec)?;
                let s = self.session.as_mut().expect("open session");
                let predict = s.pending[&msg.round_id].pass.is_none();
                if predict {
                    s.pending.remove(&msg.round_id);
                }
                let mut out = vec![self.msg(msg.round_id, Payload::LogitPlusMask(lpm))?];
                let s = self.session()?;
                if predict && s.pending.is_empty() && matches!(s.plan.kind, SessionKind::Predict { .. }) {
                    out.extend(self.done()?);
                }
                Ok(out)
            }
            Payload::MaskedGradC(masked) => {
                check_iteration(msg.iteration, t)?;
                let s = self.session()?;
                if !s.pending.get(&msg.round_id).is_some_and(|p| p.pass.is_some()) {
                    return Err(unknown_round(msg.round_id));
                }
                let noise = self.noise.as_mut().expect("noise state");
                let (grad_tilde, enc_eps) = c_mask_grad(&self.keypair, noise, &masked, &mut self.nonce, exec)?;
                self.eps_log.push(noise.eps_f64());
                let mk = |payload| PartyMessage { round_id: msg.round_id, iteration: t, from: Role::PassiveC, to: self.peer, payload };
                Ok(vec![mk(Payload::MaskedGradTilde(grad_tilde)), mk(Payload::EncAccumNoise(enc_eps))])
            }
            Payload::EncDeltaC(enc) => {
                check_iteration(msg.iteration, t.wrapping_sub(1))?;
                let s = self.session()?;
                let pend = s.pending.remove(&msg.round_id).ok_or_else(|| unknown_round(msg.round_id))?;
                let pass = pend.pass.ok_or_else(|| unknown_round(msg.round_id))?;
                if enc.len() != pass.mu.len() {
                    return Err(Error::Protocol(format!("EncDeltaC has {} rows for a batch of {}", enc.len(), pass.mu.len())));
                }
                let (eta, freeze) = (s.plan.eta(), s.freeze);
                let delta = c_decrypt_delta(&self.keypair, &enc, exec)?;
                self.model.backward(&self.data, pass, &delta, eta, freeze, exec)?;
                if !self.model.models.is_finite() {
                    return Err(Error::NonFinite("party C model after update".into()));
                }
                let s = self.session()?;
                s.step += 1;
                s.cursor += 1;
                self.advance()
            }
            Payload::Control(Control::EpochEnd { stop }) => {
                let s = self.session()?;
                if !s.awaiting_epoch_end || !s.pending.is_empty() {
                    return Err(Error::Protocol("EpochEnd outside a validation pass".into()));
                }
                if stop {
                    return self.done();
                }
                self.advance()
            }
            other => Err(Error::Protocol(format!("C cannot accept {:?}", other.kind()))),
        }
    }

    fn finished(&self) -> bool {
        self.session.as_ref().is_none_or(|s| s.done)
    }
}

fn check_iteration(got: u64, expected: u64) -> Result<()> {
    if got != expected {
        return Err(Error::StaleIteration { expected, got });
    }
    Ok(())
}

fn unknown_round(r: u64) -> Error {
    Error::Protocol(format!("message for unknown or closed round {r}"))
}

struct PPending {
    ids: Vec<usize>,
    train: bool,
    iteration: u64,
    enc_mu: Vec<Vec<Ciphertext>>,
    scratch: Option<MaskScratch>,
    fwd: Option<ForwardOut>,
}

struct PSession {
    plan: SessionPlan,
    epoch: usize,
    batches: Vec<Vec<usize>>,
    cursor: usize,
    /// Prediction chunks expected next, in order.
    expected_chunks: VecDeque<Vec<usize>>,
    in_validation: bool,
    scores: Vec<f64>,
    best: f64,
    stale: usize,
    pending: BTreeMap<u64, PPending>,
    done: bool,
}

/// An active party (A or B): labels, its own columns and its LR model.
pub struct ActiveParty {
    role: Role,
    data: TabularDataset,
    pk: PublicKey,
    pub lr: Option<SplitLrState>,
    noise: ChaCha20Rng,
    exec: Exec,
    session: Option<PSession>,
    pub history: Vec<IterRecord>,
    /// Recorded per iteration; the `w_c` column holds `W~`.
    pub trajectory: Trajectory,
    /// Probabilities from the last prediction session, in id order.
    pub predictions: Vec<f64>,
}

impl ActiveParty {
    pub fn new(role: Role, data: TabularDataset, pk: PublicKey, exec: Exec) -> Result<Self> {
        if role == Role::PassiveC {
            return Err(Error::Invalid("an active party must be A or B".into()));
        }
        Ok(ActiveParty {
            role,
            data,
            pk,
            lr: None,
            noise: stream(0, Stream::NoiseP),
            exec,
            session: None,
            history: Vec::new(),
            trajectory: Trajectory::default(),
            predictions: Vec::new(),
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Prepare a session. Training starts a fresh LR model from the shared
    /// seed.
    pub fn begin(&mut self, plan: SessionPlan, frac_bits: u32) -> Result<()> {
        let phase = plan.phase();
        if let SessionKind::Train { eta, .. } = plan.kind {
            let owner = if phase == Phase::Pretrain { LrOwner::Source } else { LrOwner::Target };
            let m = self.data.schema.party_columns(Party::Active).len();
            let (w_c, w_p, b) = init_lr(plan.g, m, frac_bits, plan.seed, owner)?;
            self.lr = Some(SplitLrState::new(&w_c, w_p, b, eta, frac_bits)?);
        }
        let lr = self.lr.as_ref().ok_or_else(|| Error::Protocol("prediction requested without a model".into()))?;
        if lr.g() != plan.g || lr.frac_bits != self.pk.frac_bits() {
            return Err(Error::Protocol("session does not match the active party's model".into()));
        }
        self.noise = phase_stream(plan.seed, Stream::NoiseP, phase);
        let expected_chunks = match &plan.kind {
            SessionKind::Predict { ids } => plan.chunks(ids).into(),
            SessionKind::Train { .. } => VecDeque::new(),
        };
        if matches!(plan.kind, SessionKind::Predict { .. }) {
            self.predictions.clear();
        }
        self.session = Some(PSession {
            batches: plan.batches(0),
            plan,
            epoch: 0,
            cursor: 0,
            expected_chunks,
            in_validation: false,
            scores: Vec::new(),
            best: f64::INFINITY,
            stale: 0,
            pending: BTreeMap::new(),
            done: false,
        });
        Ok(())
    }

    fn lr(&self) -> Result<&SplitLrState> {
        self.lr.as_ref().ok_or_else(|| Error::Protocol("active party has no model".into()))
    }

    fn session(&mut self) -> Result<&mut PSession> {
        self.session.as_mut().ok_or_else(|| Error::Protocol("active party has no open session".into()))
    }

    fn reply(&self, round_id: u64, iteration: u64, payload: Payload) -> PartyMessage {
        PartyMessage { round_id, iteration, from: self.role, to: Role::PassiveC, payload }
    }

    /// Ids the next training round must carry.
    fn expected_train(&mut self) -> Result<Vec<usize>> {
        let s = self.session()?;
        while s.cursor >= s.batches.len() {
            if s.plan.validation().is_some() {
                return Err(Error::Protocol("training round where a validation pass is due".into()));
            }
            s.epoch += 1;
            if s.epoch >= s.plan.epochs() {
                return Err(Error::Protocol("training round after the last epoch".into()));
            }
            s.batches = s.plan.batches(s.epoch);
            s.cursor = 0;
        }
        Ok(s.batches[s.cursor].clone())
    }

    fn on_enc_mu(&mut self, msg: &PartyMessage, ids: Vec<usize>, train: bool, rows: Vec<Vec<Ciphertext>>) -> Result<Vec<PartyMessage>> {
        let t = self.lr()?.t;
        if msg.iteration != t {
            return Err(Error::StaleIteration { expected: t, got: msg.iteration });
        }
        let expected = if train {
            self.expected_train()?
        } else {
            let s = self.session()?;
            if s.expected_chunks.is_empty() {
                if let Some((val, _)) = s.plan.validation().filter(|_| s.cursor >= s.batches.len() && !s.in_validation) {
                    s.expected_chunks = s.plan.chunks(val).into();
                    s.in_validation = true;
                    s.scores.clear();
                }
            }
            s.expected_chunks.pop_front().ok_or_else(|| Error::Protocol("unexpected prediction round".into()))?
        };
        if ids != expected {
            return Err(Error::Protocol(format!("round {} rows do not follow the shared schedule", msg.round_id)));
        }
        let lr = self.lr.as_ref().expect("checked above");
        let (masked, scratch) = p_masked_logits(lr, &self.pk, &rows, &mut self.noise, self.exec)?;
        let pend = PPending { ids, train, iteration: t, enc_mu: rows, scratch: Some(scratch), fwd: None };
        self.session()?.pending.insert(msg.round_id, pend);
        Ok(vec![self.reply(msg.round_id, t, Payload::MaskedLogit(masked))])
    }

    fn on_logit(&mut self, round: u64, lpm: Vec<FixedPoint>) -> Result<Vec<PartyMessage>> {
        let exec = self.exec;
        let s = self.session.as_mut().ok_or_else(|| Error::Protocol("no session".into()))?;
        let mut pend = s.pending.remove(&round).ok_or_else(|| unknown_round(round))?;
        let scratch = pend.scratch.take().ok_or_else(|| unknown_round(round))?;
        let lr = self.lr.as_ref().ok_or_else(|| Error::Protocol("no model".into()))?;
        let x = self.data.view(Party::Active, &pend.ids).rows;
        if pend.train {
            let y = self.data.labels_of(&pend.ids);
            let fwd = p_finish_forward(lr, scratch, &lpm, &x, Some(&y))?;
            let (masked, scratch) = p_masked_grad(lr, &self.pk, &pend.enc_mu, &fwd.delta_l, &mut self.noise, exec)?;
            pend.scratch = Some(scratch);
            pend.fwd = Some(fwd);
            let it = pend.iteration;
            self.session()?.pending.insert(round, pend);
            return Ok(vec![self.reply(round, it, Payload::MaskedGradC(masked))]);
        }
        let z = p_finish_forward(lr, scratch, &lpm, &x, None)?.z;
        let t = lr.t;
        let s = self.session.as_mut().expect("open session");
        if !s.in_validation {
            self.predictions.extend(z.into_iter().map(sigmoid));
            return Ok(vec![]);
        }
        s.scores.extend(z);
        if !s.expected_chunks.is_empty() {
            return Ok(vec![]);
        }
        let (val, patience) = s.plan.validation().cloned().expect("validation plan");
        let y = self.data.labels_of(&val);
        let n = y.len().max(1) as f64;
        let loss: f64 = s.scores.iter().zip(&y).map(|(&z, &y)| bce_loss(sigmoid(z), y).0 / n).sum();
        if loss < s.best {
            s.best = loss;
            s.stale = 0;
        } else {
            s.stale += 1;
        }
        let stop = s.stale >= patience;
        s.in_validation = false;
        s.epoch += 1;
        if s.epoch < s.plan.epochs() && !stop {
            s.batches = s.plan.batches(s.epoch);
            s.cursor = 0;
        }
        if let Some(last) = self.history.last_mut() {
            last.val_loss = Some(loss);
        }
        Ok(vec![self.reply(round, t, Payload::Control(Control::EpochEnd { stop }))])
    }

    fn on_grad_tilde(&mut self, round: u64, iteration: u64, grad: Vec<FixedPoint>) -> Result<Vec<PartyMessage>> {
        let s = self.session.as_mut().ok_or_else(|| Error::Protocol("no session".into()))?;
        let (phase, epoch) = (s.plan.phase(), s.epoch);
        let pend = s.pending.get_mut(&round).ok_or_else(|| unknown_round(round))?;
        if pend.iteration != iteration {
            return Err(Error::StaleIteration { expected: pend.iteration, got: iteration });
        }
        let scratch = pend.scratch.take().ok_or_else(|| Error::Protocol(format!("duplicate gradient for round {round}")))?;
        let fwd = pend.fwd.as_ref().expect("forward done");
        let x = self.data.view(Party::Active, &pend.ids).rows;
        let lr = self.lr.as_mut().ok_or_else(|| Error::Protocol("no model".into()))?;
        p_update(lr, scratch, &grad, &x, &fwd.delta_l)?;
        self.history.push(IterRecord {
            phase,
            epoch,
            iteration: lr.t,
            loss: fwd.loss,
            adv_loss: None,
            disc_accuracy: Vec::new(),
            val_loss: None,
        });
        self.trajectory.push(lr.w_tilde_f64(), lr.w_p.clone(), lr.b, fwd.z.clone());
        Ok(vec![])
    }

    fn on_accum_noise(&mut self, round: u64, iteration: u64, enc_eps: Vec<Ciphertext>) -> Result<Vec<PartyMessage>> {
        let exec = self.exec;
        let s = self.session.as_mut().ok_or_else(|| Error::Protocol("no session".into()))?;
        let pend = s.pending.get(&round).ok_or_else(|| unknown_round(round))?;
        if pend.iteration != iteration || pend.scratch.is_some() {
            return Err(Error::StaleIteration { expected: pend.iteration, got: iteration });
        }
        let pend = s.pending.remove(&round).expect("checked");
        s.cursor += 1;
        let fwd = pend.fwd.expect("forward done");
        let enc = p_enc_delta_c(self.lr()?, &self.pk, &enc_eps, &fwd.delta_l, exec)?;
        Ok(vec![self.reply(round, iteration, Payload::EncDeltaC(enc))])
    }
}

impl Actor for ActiveParty {
    fn role(&self) -> Role {
        self.role
    }

    fn start(&mut self) -> Result<Vec<PartyMessage>> {
        self.session()?;
        Ok(vec![])
    }

    fn handle(&mut self, msg: PartyMessage) -> Result<Vec<PartyMessage>> {
        if let Some(e) = peer_aborted(&msg) {
            return Err(e);
        }
        let g = self.lr()?.g();
        check_schema(&msg, &self.pk, g)?;
        if msg.to != self.role {
            return Err(Error::Protocol(format!("message for {:?} delivered to {:?}", msg.to, self.role)));
        }
        let (round, it) = (msg.round_id, msg.iteration);
        match msg.payload.clone() {
            Payload::EncMu { ids, train, rows } => self.on_enc_mu(&msg, ids, train, rows),
            Payload::LogitPlusMask(v) => self.on_logit(round, v),
            Payload::MaskedGradTilde(v) => self.on_grad_tilde(round, it, v),
            Payload::EncAccumNoise(v) => self.on_accum_noise(round, it, v),
            Payload::Control(Control::Done) => {
                let s = self.session()?;
                if !s.pending.is_empty() {
                    return Err(Error::Protocol("session closed with rounds in flight".into()));
                }
                s.done = true;
                Ok(vec![])
            }
            other => Err(Error::Protocol(format!("{:?} cannot accept {:?}", self.role, other.kind()))),
        }
    }

    fn finished(&self) -> bool {
        self.session.as_ref().is_none_or(|s| s.done)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// One thread delivering queued messages in order.
    #[default]
    Sequential,
    /// Each party on its own thread, connected by channels.
    Threaded,
}

fn abort(from: Role, to: Role, e: &Error) -> PartyMessage {
    PartyMessage { round_id: u64::MAX, iteration: 0, from, to, payload: Payload::Control(Control::Abort { reason: e.to_string() }) }
}

fn run_sequential(c: &mut PassiveParty, p: &mut ActiveParty, log: &mut dyn FnMut(&PartyMessage)) -> Result<()> {
    let mut queue: VecDeque<PartyMessage> = c.start()?.into();
    queue.extend(p.start()?);
    while let Some(msg) = queue.pop_front() {
        log(&msg);
        let out = if msg.to == Role::PassiveC { c.handle(msg)? } else { p.handle(msg)? };
        queue.extend(out);
    }
    if !(c.finished() && p.finished()) {
        return Err(Error::Protocol("session stalled before completion".into()));
    }
    Ok(())
}

fn actor_loop(
    actor: &mut dyn Actor,
    peer: Role,
    rx: mpsc::Receiver<PartyMessage>,
    tx: mpsc::Sender<PartyMessage>,
    log: &Mutex<Vec<PartyMessage>>,
) -> Result<()> {
    let send = |msgs: Vec<PartyMessage>| {
        for m in msgs {
            log.lock().expect("transcript lock").push(m.clone());
            let _ = tx.send(m);
        }
    };
    let mut run = || -> Result<()> {
        send(actor.start()?);
        while !actor.finished() {
            let msg = rx.recv().map_err(|_| Error::Protocol(format!("{peer:?} hung up")))?;
            send(actor.handle(msg)?);
        }
        Ok(())
    };
    let r = run();
    if let Err(e) = &r {
        if !matches!(e, Error::Protocol(m) if m.contains("aborted") || m.contains("hung up")) {
            let _ = tx.send(abort(actor.role(), peer, e));
        }
    }
    r
}

fn run_threaded(c: &mut PassiveParty, p: &mut ActiveParty, log: &mut dyn FnMut(&PartyMessage)) -> Result<()> {
    let sent = Mutex::new(Vec::new());
    let (to_c, c_rx) = mpsc::channel();
    let (to_p, p_rx) = mpsc::channel();
    let p_role = p.role();
    let (rc, rp) = std::thread::scope(|scope| {
        let hc = scope.spawn(|| actor_loop(c, p_role, c_rx, to_p, &sent));
        let hp = scope.spawn(|| actor_loop(p, Role::PassiveC, p_rx, to_c, &sent));
        (hc.join().expect("party C thread"), hp.join().expect("active party thread"))
    });
    for m in sent.into_inner().expect("transcript lock") {
        log(&m);
    }
    match (rc, rp) {
        (Ok(()), Ok(())) => Ok(()),
        (Err(e), Ok(())) | (Ok(()), Err(e)) => Err(e),
        (Err(a), Err(b)) => Err(if matches!(&a, Error::Protocol(m) if m.contains("aborted") || m.contains("hung up")) { b } else { a }),
    }
}

/// Run one prepared session between C and `p` to completion.
pub fn run_session(c: &mut PassiveParty, p: &mut ActiveParty, scheduler: Scheduler, transcript: &mut Transcript) -> Result<()> {
    let from = transcript.entries.len();
    let mut log = |m: &PartyMessage| transcript.record(m);
    let r = match scheduler {
        Scheduler::Sequential => run_sequential(c, p, &mut log),
        Scheduler::Threaded => run_threaded(c, p, &mut log),
    };
    transcript.seal(from);
    transcript.rounds = c.round;
    r
}

/// Shard of `data` visible to one party: its own columns on `rows`, labels
/// only for an active party. Everything else is blanked.
pub fn shard(data: &TabularDataset, role: Role, rows: &[usize]) -> Result<TabularDataset> {
    let party = if role == Role::PassiveC { Party::PassiveC } else { Party::Active };
    let own = data.schema.party_columns(party);
    let mut keep = vec![false; data.len()];
    for &r in rows {
        *keep.get_mut(r).ok_or_else(|| Error::Data(format!("row {r} out of range")))? = true;
    }
    let blank = data.rows.iter().zip(&keep).map(|(row, &k)| {
        let mut out = vec![0.0; row.len()];
        if k {
            own.iter().for_each(|&c| out[c] = row[c]);
        }
        out
    });
    let labels = data
        .labels
        .iter()
        .zip(&keep)
        .map(|(&y, &k)| if k && role != Role::PassiveC { y } else { 0 })
        .collect();
    TabularDataset::new(data.schema.clone(), blank.collect(), labels)
}

/// The three parties with their shards: B holds the source rows, A the
/// target rows, C its columns on every row.
pub struct Parties {
    pub c: PassiveParty,
    pub a: ActiveParty,
    pub b: ActiveParty,
}

impl Parties {
    pub fn setup(run: &RunConfig, prep: &Prepared) -> Result<Self> {
        let kp = keygen(run.key_bits, &mut stream(run.seed, Stream::Keygen))?.with_frac_bits(run.frac_bits);
        Self::with_keys(run, prep, kp)
    }

    pub fn with_keys(run: &RunConfig, prep: &Prepared, keypair: Keypair) -> Result<Self> {
        if keypair.public.frac_bits() != run.frac_bits {
            return Err(Error::Invalid("key pair precision differs from frac_bits".into()));
        }
        let data = &prep.data;
        let all: Vec<usize> = (0..data.len()).collect();
        let target: Vec<usize> =
            prep.split.target_labeled.iter().chain(&prep.split.target_test).copied().collect();
        let model = init_passive(&prep.assembler, &prep.archs, run.seed)?;
        let pk = keypair.public.clone();
        Ok(Parties {
            c: PassiveParty::new(shard(data, Role::PassiveC, &all)?, model, keypair, run.exec),
            a: ActiveParty::new(Role::ActiveA, shard(data, Role::ActiveA, &target)?, pk.clone(), run.exec)?,
            b: ActiveParty::new(Role::ActiveB, shard(data, Role::ActiveB, &prep.split.source)?, pk, run.exec)?,
        })
    }
}

fn plan(run: &RunConfig, g: usize, kind: SessionKind) -> SessionPlan {
    SessionPlan { kind, batch_size: run.batch_size, seed: run.seed, reshuffle: run.reshuffle, g }
}

fn merge_adv(history: &mut [IterRecord], adv: &[Option<AdvStats>]) {
    for (h, a) in history.iter_mut().zip(adv) {
        if let Some(a) = a {
            h.adv_loss = Some(a.loss);
            h.disc_accuracy = a.accuracy.clone();
        }
    }
}

/// Federated pre-training between B and C. With `adapt_pool` set, C runs
/// an adversarial step on a target batch before every round.
pub fn pretrain(
    run: &RunConfig,
    c: &mut PassiveParty,
    b: &mut ActiveParty,
    source: &[usize],
    adapt_pool: Option<Vec<usize>>,
    scheduler: Scheduler,
    transcript: &mut Transcript,
) -> Result<Vec<IterRecord>> {
    let g = c.model.g();
    let kind = SessionKind::Train {
        phase: Phase::Pretrain,
        ids: source.to_vec(),
        epochs: run.epochs_pretrain,
        eta: run.eta_pretrain,
        validation: None,
    };
    let p = plan(run, g, kind);
    let adapt =
        adapt_pool.map(|pool| AdaptPlan { pool, lambda: run.lambda, warmup: run.lambda_warmup, batch: run.target_batch() });
    let (h0, a0) = (b.history.len(), c.adv_log.len());
    c.begin(b.role(), p.clone(), adapt, false)?;
    b.begin(p, run.frac_bits)?;
    run_session(c, b, scheduler, transcript)?;
    let mut history = b.history[h0..].to_vec();
    merge_adv(&mut history, &c.adv_log[a0..]);
    Ok(history)
}

/// Federated fine-tuning between A and C with a fresh LR model for A and no
/// adversarial steps.
pub fn finetune(
    run: &RunConfig,
    c: &mut PassiveParty,
    a: &mut ActiveParty,
    labeled: &[usize],
    scheduler: Scheduler,
    transcript: &mut Transcript,
) -> Result<Vec<IterRecord>> {
    let g = c.model.g();
    let (train, validation) = match run.patience {
        Some(p) => {
            let (t, v) = validation_split(labeled, run.validation_fraction, run.seed);
            (t, Some((v, p)))
        }
        None => (labeled.to_vec(), None),
    };
    let kind = SessionKind::Train {
        phase: Phase::Finetune,
        ids: train,
        epochs: run.epochs_finetune,
        eta: run.eta_finetune,
        validation,
    };
    let p = plan(run, g, kind);
    let h0 = a.history.len();
    c.begin(a.role(), p.clone(), None, run.freeze_extractors)?;
    a.begin(p, run.frac_bits)?;
    run_session(c, a, scheduler, transcript)?;
    Ok(a.history[h0..].to_vec())
}

/// Masked inference on `ids`; A scores the predictions with its labels.
pub fn evaluate(
    run: &RunConfig,
    c: &mut PassiveParty,
    a: &mut ActiveParty,
    ids: &[usize],
    scheduler: Scheduler,
    transcript: &mut Transcript,
) -> Result<Evaluation> {
    if ids.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let p = plan(run, c.model.g(), SessionKind::Predict { ids: ids.to_vec() });
    c.begin(a.role(), p.clone(), None, false)?;
    a.begin(p, run.frac_bits)?;
    run_session(c, a, scheduler, transcript)?;
    evaluation(a.predictions.clone(), &a.data.labels_of(ids))
}

/// One split-LR iteration in-process: masked forward, then masked backward.
/// Returns the forward result and `delta_C`.
pub fn run_algorithm3(
    state: &mut SplitLrState,
    c: &mut PassiveLr,
    mu: &[Vec<FixedPoint>],
    enc_mu: &[Vec<Ciphertext>],
    x_p: &[Vec<f64>],
    y: &[u8],
    rngs: &mut Rngs<'_>,
    exec: Exec,
) -> Result<(ForwardOut, Vec<Vec<f64>>)> {
    let fwd = secure_forward(state, c, mu, enc_mu, x_p, y, rngs, exec)?;
    let delta_c = secure_backward(state, c, enc_mu, x_p, &fwd.delta_l, rngs, exec)?;
    Ok((fwd, delta_c))
}

/// Outcome of a full secure B->A run.
pub struct SecureRun {
    pub parties: Parties,
    pub history: Vec<IterRecord>,
    /// Reconstructed `W^C = W~ + eps` with B's then A's iterations.
    pub trajectory: Trajectory,
    pub transcript: Transcript,
}

/// Adversarial pre-training then secure fine-tuning over the prepared split. Domain adaptation
/// follows the prepared variant.
pub fn train_secure(run: &RunConfig, prep: &Prepared, scheduler: Scheduler, keep_payloads: bool) -> Result<SecureRun> {
    train_secure_with(run, prep, Parties::setup(run, prep)?, scheduler, keep_payloads)
}

pub fn train_secure_with(
    run: &RunConfig,
    prep: &Prepared,
    mut parties: Parties,
    scheduler: Scheduler,
    keep_payloads: bool,
) -> Result<SecureRun> {
    let mut transcript = Transcript::new(keep_payloads);
    let pool = prep.variant.domain_adaptation().then(|| prep.split.target_all());
    let Parties { c, a, b } = &mut parties;
    let mut history = pretrain(run, c, b, &prep.split.source, pool, scheduler, &mut transcript)?;
    history.extend(finetune(run, c, a, &prep.split.target_labeled, scheduler, &mut transcript)?);
    let mut trajectory = b.trajectory.clone();
    trajectory.extend(a.trajectory.clone());
    reconstruct_w_c(&mut trajectory, &c.eps_log)?;
    Ok(SecureRun { parties, history, trajectory, transcript })
}

/// Turn the recorded `W~` column into `W~ + eps`.
pub fn reconstruct_w_c(trajectory: &mut Trajectory, eps_log: &[Vec<f64>]) -> Result<()> {
    if trajectory.len() != eps_log.len() {
        return Err(Error::dim("noise log", trajectory.len(), eps_log.len()));
    }
    for (w, e) in trajectory.w_c.iter_mut().zip(eps_log) {
        w.iter_mut().zip(e).for_each(|(w, e)| *w += e);
    }
    Ok(())
}

/// Secure run next to its plaintext replay over the first `iterations`
/// LR steps.
pub struct Verification {
    pub iterations: usize,
    pub epochs_pretrain: usize,
    pub report: DivergenceReport,
    pub secure: SecureRun,
}

/// Run B->A securely and in plaintext with pre-training stretched to cover
/// `iterations` steps (fine-tuning included), then compare the trajectories.
pub fn verify_protocol(
    run: &RunConfig,
    prep: &Prepared,
    parties: Parties,
    iterations: usize,
    scheduler: Scheduler,
    keep_payloads: bool,
) -> Result<Verification> {
    if iterations == 0 {
        return Err(Error::Invalid("need at least one iteration to compare".into()));
    }
    let mut run = run.clone();
    run.patience = None;
    let per_epoch = prep.split.source.len().div_ceil(run.batch_size);
    let finetune = run.epochs_finetune * prep.split.target_labeled.len().div_ceil(run.batch_size);
    if per_epoch == 0 {
        return Err(Error::Data("no source rows".into()));
    }
    run.epochs_pretrain = iterations.saturating_sub(finetune).div_ceil(per_epoch).max(1);
    let mut secure = train_secure_with(&run, prep, parties, scheduler, keep_payloads)?;
    let mut oracle = oracle_train(&run, prep, Setting::BToA, true)?.trajectory;
    if secure.trajectory.len() < iterations {
        return Err(Error::dim("secure iterations", iterations, secure.trajectory.len()));
    }
    secure.trajectory.truncate(iterations);
    oracle.truncate(iterations);
    let report = compare_trajectories(&secure.trajectory, &oracle, run.frac_bits)?;
    Ok(Verification { iterations, epochs_pretrain: run.epochs_pretrain, report, secure })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{prepare, ExperimentConfig, Variant};
    use crate::oracle::{compare_trajectories, oracle_evaluate, oracle_train};
    use crate::config::Setting;
    use std::sync::OnceLock;

    const CFG: &str = r#"
[data]
kind = "synthetic"
[data.synthetic]
group_dims = [3, 3]
active_dim = 2
n_source = 40
n_target_labeled = 24
n_target_unlabeled = 16
n_target_test = 20
[run]
epochs_pretrain = 1
epochs_finetune = 1
batch_size = 8
key_bits = 512
seed = 11
"#;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::parse(CFG, Path::new("t.toml")).unwrap()
    }

    fn keys() -> Keypair {
        static K: OnceLock<Keypair> = OnceLock::new();
        K.get_or_init(|| keygen(512, &mut stream(11, Stream::Keygen)).unwrap()).clone()
    }

    fn setup(c: &ExperimentConfig) -> (Prepared, Parties) {
        let p = prepare(c, Path::new("."), Variant::Prada).unwrap();
        let parties = Parties::with_keys(&c.run, &p, keys().with_frac_bits(c.run.frac_bits)).unwrap();
        (p, parties)
    }

    #[test]
    fn secure_run_tracks_oracle() {
        let c = cfg();
        let (p, parties) = setup(&c);
        let run = train_secure_with(&c.run, &p, parties, Scheduler::Sequential, false).unwrap();
        let oracle = oracle_train(&c.run, &p, Setting::BToA, true).unwrap();
        let report = compare_trajectories(&run.trajectory, &oracle.trajectory, c.run.frac_bits).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_weight() < 1e-8);
        assert_eq!(run.history.len(), oracle.history.len());
        for (s, o) in run.history.iter().zip(&oracle.history) {
            assert!((s.loss - o.loss).abs() < 1e-8);
            assert_eq!(s.adv_loss.is_some(), o.adv_loss.is_some());
        }
        let mut parties = run.parties;
        let mut t = Transcript::new(false);
        let ids = &p.split.target_test;
        let e = evaluate(&c.run, &mut parties.c, &mut parties.a, ids, Scheduler::Sequential, &mut t).unwrap();
        let o = oracle_evaluate(&oracle, &p.data, ids, &c.run).unwrap();
        assert_eq!(e.predictions.len(), ids.len());
        for (a, b) in e.predictions.iter().zip(&o.predictions) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(e.auc, o.auc);
        assert!(t.entries.iter().all(|e| !matches!(e.kind, Kind::MaskedGradC | Kind::EncDeltaC)));
    }

    #[test]
    fn schedulers_agree() {
        let c = cfg();
        let (p, a) = setup(&c);
        let (_, b) = setup(&c);
        let s = train_secure_with(&c.run, &p, a, Scheduler::Sequential, false).unwrap();
        let t = train_secure_with(&c.run, &p, b, Scheduler::Threaded, false).unwrap();
        assert_eq!(s.history, t.history);
        assert_eq!(s.trajectory, t.trajectory);
        assert_eq!(s.transcript.entries, t.transcript.entries);
        assert_eq!(s.parties.c.model, t.parties.c.model);
        assert_eq!(s.parties.a.lr, t.parties.a.lr);
    }

    #[test]
    fn zero_epochs_leave_initial_models() {
        let mut c = cfg();
        c.run.epochs_pretrain = 0;
        c.run.epochs_finetune = 0;
        let (p, parties) = setup(&c);
        let init = parties.c.model.clone();
        let run = train_secure_with(&c.run, &p, parties, Scheduler::Sequential, false).unwrap();
        assert!(run.history.is_empty());
        assert_eq!(run.parties.c.model, init);
        let m = p.data.schema.party_columns(Party::Active).len();
        let (w_c, w_p, b) = init_lr(init.g(), m, c.run.frac_bits, c.run.seed, LrOwner::Target).unwrap();
        let lr = run.parties.a.lr.unwrap();
        assert_eq!((lr.w_tilde_f64(), lr.w_p, lr.b, lr.t), (w_c, w_p, b, 0));
    }

    #[test]
    fn finetune_never_touches_discriminators() {
        let mut c = cfg();
        c.run.freeze_extractors = true;
        let (p, mut parties) = setup(&c);
        let mut t = Transcript::new(false);
        assert!(parties.a.lr.is_none());
        pretrain(&c.run, &mut parties.c, &mut parties.b, &p.split.source, Some(p.split.target_all()), Scheduler::Sequential, &mut t)
            .unwrap();
        assert!(parties.a.lr.is_none());
        let before = parties.c.model.clone();
        finetune(&c.run, &mut parties.c, &mut parties.a, &p.split.target_labeled, Scheduler::Sequential, &mut t).unwrap();
        let after = &parties.c.model.models;
        assert_eq!(after.discriminators, before.models.discriminators);
        assert_eq!(after.extractors, before.models.extractors);
        assert_eq!(after.embeddings, before.models.embeddings);
        assert_ne!(after.aggregators, before.models.aggregators);
    }

    #[test]
    fn patience_session_matches_oracle() {
        let mut c = cfg();
        c.run.epochs_finetune = 12;
        c.run.eta_finetune = 1.0;
        c.run.patience = Some(1);
        let (p, mut parties) = setup(&c);
        let mut t = Transcript::new(false);
        let h = finetune(&c.run, &mut parties.c, &mut parties.a, &p.split.target_labeled, Scheduler::Threaded, &mut t).unwrap();
        let o = oracle_train(&c.run, &p, Setting::AVfl, false).unwrap();
        assert_eq!(h.len(), o.history.len());
        assert!(h.len() < 12 * 3);
        let vs: Vec<_> = h.iter().filter_map(|r| r.val_loss).collect();
        let vo: Vec<_> = o.history.iter().filter_map(|r| r.val_loss).collect();
        assert_eq!(vs.len(), vo.len());
        vs.iter().zip(&vo).for_each(|(a, b)| assert!((a - b).abs() < 1e-8));
        assert!(t.entries.iter().any(|e| e.kind == Kind::Control && e.from == Role::ActiveA));
    }

    /// Drive C and B by hand so a message can be tampered with in flight.
    fn tamper(f: impl Fn(&mut PartyMessage) -> bool) -> Error {
        let c = cfg();
        let (p, mut parties) = setup(&c);
        let kind = SessionKind::Train { phase: Phase::Pretrain, ids: p.split.source.clone(), epochs: 1, eta: 0.05, validation: None };
        let plan = plan(&c.run, parties.c.model.g(), kind);
        parties.c.begin(Role::ActiveB, plan.clone(), None, false).unwrap();
        parties.b.begin(plan, c.run.frac_bits).unwrap();
        let mut queue: VecDeque<PartyMessage> = parties.c.start().unwrap().into();
        let mut armed = true;
        while let Some(mut m) = queue.pop_front() {
            if armed && f(&mut m) {
                armed = false;
            }
            let r = if m.to == Role::PassiveC { parties.c.handle(m) } else { parties.b.handle(m) };
            match r {
                Ok(out) => queue.extend(out),
                Err(e) => return e,
            }
        }
        panic!("tampered session completed");
    }

    #[test]
    fn stale_iteration_is_rejected() {
        let e = tamper(|m| {
            let hit = m.kind() == Kind::MaskedGradC && m.round_id == 2;
            if hit {
                m.iteration -= 1;
            }
            hit
        });
        assert!(matches!(e, Error::StaleIteration { expected: 1, got: 0 }), "{e}");
    }

    #[test]
    fn schema_violations_are_rejected() {
        let e = tamper(|m| {
            let hit = m.kind() == Kind::MaskedGradTilde;
            if let Payload::MaskedGradTilde(v) = &mut m.payload {
                v.pop();
            }
            hit
        });
        assert!(matches!(e, Error::Protocol(ref s) if s.contains("length")), "{e}");
        let e = tamper(|m| {
            let hit = m.kind() == Kind::EncMu;
            if let Payload::EncMu { ids, .. } = &mut m.payload {
                ids.reverse();
            }
            hit
        });
        assert!(matches!(e, Error::Protocol(ref s) if s.contains("schedule")), "{e}");
        let e = tamper(|m| {
            let hit = m.kind() == Kind::MaskedLogit;
            if hit {
                m.payload = Payload::LogitPlusMask(vec![]);
            }
            hit
        });
        assert!(matches!(e, Error::Protocol(_)), "{e}");
    }

    #[test]
    fn threaded_failure_aborts_both_parties() {
        let mut c = cfg();
        c.run.eta_pretrain = 1e300;
        let (p, mut parties) = setup(&c);
        let mut t = Transcript::new(false);
        let r = pretrain(&c.run, &mut parties.c, &mut parties.b, &p.split.source, None, Scheduler::Threaded, &mut t);
        assert!(r.unwrap_err().is_numeric_or_protocol());
    }

    #[test]
    fn shards_hide_foreign_columns_and_labels() {
        let c = cfg();
        let p = prepare(&c, Path::new("."), Variant::Prada).unwrap();
        let all: Vec<usize> = (0..p.data.len()).collect();
        let cs = shard(&p.data, Role::PassiveC, &all).unwrap();
        assert!(cs.labels.iter().all(|&y| y == 0));
        for col in p.data.schema.party_columns(Party::Active) {
            assert!(cs.rows.iter().all(|r| r[col] == 0.0));
        }
        let bs = shard(&p.data, Role::ActiveB, &p.split.source).unwrap();
        for col in p.data.schema.party_columns(Party::PassiveC) {
            assert!(bs.rows.iter().all(|r| r[col] == 0.0));
        }
        let t = p.split.target_test[0];
        assert!(bs.rows[t].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transcript_jsonl_has_digests_only() {
        let c = cfg();
        let (p, parties) = setup(&c);
        let run = train_secure_with(&c.run, &p, parties, Scheduler::Sequential, true).unwrap();
        let text = run.transcript.to_jsonl().unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["kind"], "EncMu");
        assert_eq!(first["digest"].as_str().unwrap().len(), 64);
        assert!(first.get("payload").is_none());
        let seqs: Vec<u64> = run.transcript.entries.iter().map(|e| e.seq).collect();
        assert_eq!(seqs, (0..seqs.len() as u64).collect::<Vec<_>>());
        assert!(run.transcript.entries.iter().all(|e| e.payload.as_ref().is_some_and(|p| p.digest() == e.digest)));
    }

    #[test]
    fn verification_stretches_pretraining() {
        let c = cfg();
        let (p, parties) = setup(&c);
        let v = verify_protocol(&c.run, &p, parties, 20, Scheduler::Sequential, false).unwrap();
        // 40 source rows and 24 labeled rows at batch 8: 5 + 3 per epoch
        assert_eq!(v.epochs_pretrain, 4);
        assert_eq!(v.report.weights.len(), 20);
        assert!(v.report.passed(), "{:?}", v.report);
        let (p, parties) = setup(&c);
        assert!(verify_protocol(&c.run, &p, parties, 0, Scheduler::Sequential, false).is_err());
    }

}
