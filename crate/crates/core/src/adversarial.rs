//! Party C's models: per-group feature extractors, domain discriminators and
//! scalar aggregators, with the gradient-reversal domain-adversarial update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grouping::{Assembler, GroupedBatch};
use crate::nn::{
    bce_loss, grl_backward, grl_forward, sgd_step, sigmoid, Activation, DenseNet, EmbeddingGrads, EmbeddingTable,
    NetGrads, Tape,
};

/// Layer widths of one group's extractor and discriminator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupArch {
    pub extractor: Vec<usize>,
    pub discriminator: Vec<usize>,
}

impl GroupArch {
    /// `d -> 2d -> d -> ceil(d/2)` extractor and `o -> 2o -> 1` discriminator.
    pub fn default_for(input_dim: usize) -> Self {
        let d = input_dim.max(1);
        let out = d.div_ceil(2).max(2);
        GroupArch { extractor: vec![d, 2 * d, d, out], discriminator: vec![out, 2 * out, 1] }
    }

    fn check(&self, name: &str, input_dim: usize) -> Result<()> {
        let e = &self.extractor;
        let d = &self.discriminator;
        if e.len() < 2 || e[0] != input_dim {
            return Err(Error::Invalid(format!(
                "group `{name}`: extractor input width {} does not match assembled width {input_dim}",
                e.first().copied().unwrap_or(0)
            )));
        }
        if d.len() < 2 || d[0] != *e.last().unwrap_or(&0) || *d.last().unwrap_or(&0) != 1 {
            return Err(Error::Invalid(format!(
                "group `{name}`: discriminator must map the extractor output ({}) to 1",
                e.last().unwrap_or(&0)
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupModels {
    pub names: Vec<String>,
    pub extractors: Vec<DenseNet>,
    /// Output a logit; the domain probability is its sigmoid.
    pub discriminators: Vec<DenseNet>,
    /// One dense layer, extractor output to a scalar, identity activation.
    pub aggregators: Vec<DenseNet>,
    pub embeddings: EmbeddingTable,
}

impl GroupModels {
    pub fn init<R: Rng + ?Sized>(assembler: &Assembler, archs: &[GroupArch], rng: &mut R) -> Result<Self> {
        let names = assembler.spec.names();
        let dims = assembler.input_dims();
        if archs.len() != names.len() {
            return Err(Error::dim("group architectures", names.len(), archs.len()));
        }
        let embeddings = assembler.init_embeddings(rng);
        let mut extractors = Vec::new();
        let mut discriminators = Vec::new();
        let mut aggregators = Vec::new();
        for ((name, arch), &d) in names.iter().zip(archs).zip(&dims) {
            arch.check(name, d)?;
            extractors.push(DenseNet::init(&arch.extractor, Activation::LeakyRelu, Activation::LeakyRelu, rng)?);
            discriminators.push(DenseNet::init(&arch.discriminator, Activation::LeakyRelu, Activation::Identity, rng)?);
            let out = *arch.extractor.last().unwrap_or(&1);
            aggregators.push(DenseNet::init(&[out, 1], Activation::Identity, Activation::Identity, rng)?);
        }
        Ok(GroupModels { names, extractors, discriminators, aggregators, embeddings })
    }

    pub fn g(&self) -> usize {
        self.extractors.len()
    }

    pub fn is_finite(&self) -> bool {
        self.extractors.iter().chain(&self.discriminators).chain(&self.aggregators).all(DenseNet::is_finite)
            && self.embeddings.columns.iter().all(|e| e.matrix.iter().all(|x| x.is_finite()))
    }

    fn check_batch(&self, batch: &GroupedBatch) -> Result<()> {
        if batch.g() != self.g() {
            return Err(Error::dim("grouped batch", self.g(), batch.g()));
        }
        for (i, rows) in batch.groups.iter().enumerate() {
            if rows.len() != batch.batch_size() {
                return Err(Error::Invalid("groups in a batch differ in row count".into()));
            }
            if let Some(r) = rows.first() {
                if r.len() != self.extractors[i].in_dim() {
                    return Err(Error::Invalid(format!(
                        "group `{}` input has width {}, extractor expects {}",
                        self.names[i],
                        r.len(),
                        self.extractors[i].in_dim()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Gradients of the adversarial loss, with the extractor part already passed
/// through gradient reversal.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvGrads {
    pub loss: f64,
    pub group_loss: Vec<f64>,
    /// Fraction of rows each discriminator labels correctly at threshold 0.5.
    pub accuracy: Vec<f64>,
    pub extractors: Vec<NetGrads>,
    pub discriminators: Vec<NetGrads>,
    pub source_input_grads: Vec<Vec<Vec<f64>>>,
    pub target_input_grads: Vec<Vec<Vec<f64>>>,
}

struct GroupAdv {
    loss: f64,
    correct: usize,
    f: NetGrads,
    d: NetGrads,
    src_in: Vec<Vec<f64>>,
    tgt_in: Vec<Vec<f64>>,
}

fn group_adv(models: &GroupModels, i: usize, source: &[Vec<f64>], target: &[Vec<f64>], lambda: f64) -> Result<GroupAdv> {
    let f_net = &models.extractors[i];
    let d_net = &models.discriminators[i];
    let mut out = GroupAdv {
        loss: 0.0,
        correct: 0,
        f: NetGrads::zeros_like(f_net),
        d: NetGrads::zeros_like(d_net),
        src_in: Vec::with_capacity(source.len()),
        tgt_in: Vec::with_capacity(target.len()),
    };
    let mut ft = Tape::new();
    let mut dt = Tape::new();
    for (rows, label) in [(source, 0u8), (target, 1u8)] {
        let scale = 1.0 / rows.len() as f64;
        for x in rows {
            let f = f_net.forward(x, &mut ft)?;
            let logit = d_net.forward(&grl_forward(&f), &mut dt)?[0];
            let p = sigmoid(logit);
            let (l, g) = bce_loss(p, label);
            out.loss += l * scale;
            out.correct += ((p > 0.5) == (label == 1)) as usize;
            let up_f = d_net.backward_into(&dt, &[g * scale], &mut out.d)?;
            let down = f_net.backward_into(&ft, &grl_backward(&up_f, lambda), &mut out.f)?;
            if label == 0 {
                out.src_in.push(down);
            } else {
                out.tgt_in.push(down);
            }
        }
    }
    Ok(out)
}

/// Adversarial loss and gradients without updating anything.
///
/// Target rows carry domain label 1 and source rows label 0; each domain's
/// term is a mean over its rows, and the groups' losses add up.
pub fn adv_gradients(
    models: &GroupModels,
    source: &GroupedBatch,
    target: &GroupedBatch,
    lambda: f64,
    exec: Exec,
) -> Result<AdvGrads> {
    models.check_batch(source)?;
    models.check_batch(target)?;
    if source.batch_size() == 0 || target.batch_size() == 0 {
        return Err(Error::Invalid("adversarial step needs nonempty source and target batches".into()));
    }
    if !lambda.is_finite() {
        return Err(Error::NonFinite(format!("lambda {lambda}")));
    }
    let parts = exec.try_map_range(models.g(), |i| group_adv(models, i, &source.groups[i], &target.groups[i], lambda))?;
    let n = (source.batch_size() + target.batch_size()) as f64;
    let group_loss: Vec<f64> = parts.iter().map(|p| p.loss).collect();
    let loss: f64 = group_loss.iter().sum();
    if !loss.is_finite() {
        let bad: Vec<&str> = models.names.iter().zip(&group_loss).filter(|(_, l)| !l.is_finite()).map(|(n, _)| n.as_str()).collect();
        return Err(Error::NonFinite(format!("adversarial loss in groups {bad:?}")));
    }
    let mut out = AdvGrads {
        loss,
        group_loss,
        accuracy: parts.iter().map(|p| p.correct as f64 / n).collect(),
        extractors: Vec::new(),
        discriminators: Vec::new(),
        source_input_grads: Vec::new(),
        target_input_grads: Vec::new(),
    };
    for p in parts {
        out.extractors.push(p.f);
        out.discriminators.push(p.d);
        out.source_input_grads.push(p.src_in);
        out.target_input_grads.push(p.tgt_in);
    }
    Ok(out)
}

/// One simultaneous min-max step: discriminators descend the adversarial
/// loss, extractors receive the reversed gradient. Returns the loss and
/// per-group statistics measured before the update, together with the input
/// gradients for routing into embeddings.
pub fn domain_adv_step(
    models: &mut GroupModels,
    source: &GroupedBatch,
    target: &GroupedBatch,
    lambda: f64,
    eta: f64,
    exec: Exec,
) -> Result<AdvGrads> {
    let grads = adv_gradients(models, source, target, lambda, exec)?;
    for (net, g) in models.discriminators.iter_mut().zip(&grads.discriminators) {
        sgd_step(net, g, eta)?;
    }
    for (net, g) in models.extractors.iter_mut().zip(&grads.extractors) {
        sgd_step(net, g, eta)?;
    }
    Ok(grads)
}

/// `mu[b][i] = G_i(F_i(x_(i)))` for every row `b` and group `i`.
pub fn aggregate_high_order(models: &GroupModels, batch: &GroupedBatch, exec: Exec) -> Result<Vec<Vec<f64>>> {
    models.check_batch(batch)?;
    let cols = exec.try_map_range(models.g(), |i| -> Result<Vec<f64>> {
        batch.groups[i]
            .iter()
            .map(|x| Ok(models.aggregators[i].predict(&models.extractors[i].predict(x)?)?[0]))
            .collect()
    })?;
    Ok(transpose(&cols, batch.batch_size()))
}

fn transpose(cols: &[Vec<f64>], rows: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|b| cols.iter().map(|c| c[b]).collect()).collect()
}

/// Recorded forward passes of extractors and aggregators for one batch.
#[derive(Debug)]
pub struct MuTapes {
    /// `[group][row] -> (extractor tape, aggregator tape)`
    tapes: Vec<Vec<(Tape, Tape)>>,
}

impl MuTapes {
    pub fn batch_size(&self) -> usize {
        self.tapes.first().map_or(0, |t| t.len())
    }
}

pub fn forward_mu(models: &GroupModels, batch: &GroupedBatch, exec: Exec) -> Result<(Vec<Vec<f64>>, MuTapes)> {
    models.check_batch(batch)?;
    let per_group = exec.try_map_range(models.g(), |i| -> Result<(Vec<f64>, Vec<(Tape, Tape)>)> {
        let mut mu = Vec::with_capacity(batch.batch_size());
        let mut tapes = Vec::with_capacity(batch.batch_size());
        for x in &batch.groups[i] {
            let mut ft = Tape::new();
            let mut gt = Tape::new();
            let f = models.extractors[i].forward(x, &mut ft)?;
            mu.push(models.aggregators[i].forward(&f, &mut gt)?[0]);
            tapes.push((ft, gt));
        }
        Ok((mu, tapes))
    })?;
    let (cols, tapes): (Vec<_>, Vec<_>) = per_group.into_iter().unzip();
    let mu = transpose(&cols, batch.batch_size());
    if mu.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("high-order features".into()));
    }
    Ok((mu, MuTapes { tapes }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MuGrads {
    pub extractors: Vec<NetGrads>,
    pub aggregators: Vec<NetGrads>,
    /// `[group][row]` gradients with respect to the assembled inputs.
    pub input_grads: Vec<Vec<Vec<f64>>>,
}

/// Backpropagate `delta_c[b][i]`, the loss gradient with respect to
/// `mu[b][i]`, through aggregators and extractors. Row gradients are summed.
pub fn backward_mu(models: &GroupModels, tapes: &MuTapes, delta_c: &[Vec<f64>], exec: Exec) -> Result<MuGrads> {
    if delta_c.len() != tapes.batch_size() {
        return Err(Error::dim("delta_C rows", tapes.batch_size(), delta_c.len()));
    }
    if let Some(r) = delta_c.iter().find(|r| r.len() != models.g()) {
        return Err(Error::dim("delta_C width", models.g(), r.len()));
    }
    let parts = exec.try_map_range(models.g(), |i| -> Result<(NetGrads, NetGrads, Vec<Vec<f64>>)> {
        let mut fg = NetGrads::zeros_like(&models.extractors[i]);
        let mut gg = NetGrads::zeros_like(&models.aggregators[i]);
        let mut inputs = Vec::with_capacity(delta_c.len());
        for ((ft, gt), d) in tapes.tapes[i].iter().zip(delta_c) {
            let up = models.aggregators[i].backward_into(gt, &[d[i]], &mut gg)?;
            inputs.push(models.extractors[i].backward_into(ft, &up, &mut fg)?);
        }
        Ok((fg, gg, inputs))
    })?;
    let mut out = MuGrads { extractors: Vec::new(), aggregators: Vec::new(), input_grads: Vec::new() };
    for (f, g, x) in parts {
        out.extractors.push(f);
        out.aggregators.push(g);
        out.input_grads.push(x);
    }
    Ok(out)
}

/// Party C's full model state: group assembly plus the group networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassiveModel {
    pub assembler: Assembler,
    pub models: GroupModels,
}

/// Statistics of one adaptation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvStats {
    pub loss: f64,
    pub accuracy: Vec<f64>,
}

/// A forward pass kept for the matching backward pass.
#[derive(Debug)]
pub struct MuPass {
    pub ids: Vec<usize>,
    pub mu: Vec<Vec<f64>>,
    tapes: MuTapes,
}

impl PassiveModel {
    pub fn init<R: Rng + ?Sized>(assembler: Assembler, archs: &[GroupArch], rng: &mut R) -> Result<Self> {
        let models = GroupModels::init(&assembler, archs, rng)?;
        Ok(PassiveModel { assembler, models })
    }

    pub fn g(&self) -> usize {
        self.models.g()
    }

    /// Adversarial step on assembled source and target rows, embeddings
    /// included on the extractor side.
    pub fn adapt(
        &mut self,
        data: &TabularDataset,
        source_ids: &[usize],
        target_ids: &[usize],
        lambda: f64,
        eta: f64,
        exec: Exec,
    ) -> Result<AdvStats> {
        let src = self.assembler.assemble(data, source_ids, &self.models.embeddings, exec)?;
        let tgt = self.assembler.assemble(data, target_ids, &self.models.embeddings, exec)?;
        let grads = domain_adv_step(&mut self.models, &src, &tgt, lambda, eta, exec)?;
        if !self.assembler.slots.is_empty() {
            let mut eg = self.models.embeddings.zero_grads();
            let rows = |ids: &[usize]| ids.iter().map(|&i| data.rows[i].as_slice()).collect::<Vec<_>>();
            self.assembler.scatter_grads(&rows(source_ids), &grads.source_input_grads, &self.models.embeddings, &mut eg)?;
            self.assembler.scatter_grads(&rows(target_ids), &grads.target_input_grads, &self.models.embeddings, &mut eg)?;
            self.models.embeddings.sgd_step(&eg, eta)?;
        }
        Ok(AdvStats { loss: grads.loss, accuracy: grads.accuracy })
    }

    pub fn forward(&self, data: &TabularDataset, ids: &[usize], exec: Exec) -> Result<MuPass> {
        let batch = self.assembler.assemble(data, ids, &self.models.embeddings, exec)?;
        let (mu, tapes) = forward_mu(&self.models, &batch, exec)?;
        Ok(MuPass { ids: ids.to_vec(), mu, tapes })
    }

    pub fn predict(&self, data: &TabularDataset, ids: &[usize], exec: Exec) -> Result<Vec<Vec<f64>>> {
        let batch = self.assembler.assemble(data, ids, &self.models.embeddings, exec)?;
        aggregate_high_order(&self.models, &batch, exec)
    }

    /// Apply the label loss gradient `delta_c` (shaped like `pass.mu`).
    /// With `freeze_extractors` only the aggregators move.
    pub fn backward(
        &mut self,
        data: &TabularDataset,
        pass: MuPass,
        delta_c: &[Vec<f64>],
        eta: f64,
        freeze_extractors: bool,
        exec: Exec,
    ) -> Result<()> {
        let grads = backward_mu(&self.models, &pass.tapes, delta_c, exec)?;
        for (net, g) in self.models.aggregators.iter_mut().zip(&grads.aggregators) {
            sgd_step(net, g, eta)?;
        }
        if freeze_extractors {
            return Ok(());
        }
        for (net, g) in self.models.extractors.iter_mut().zip(&grads.extractors) {
            sgd_step(net, g, eta)?;
        }
        if !self.assembler.slots.is_empty() {
            let mut eg: EmbeddingGrads = self.models.embeddings.zero_grads();
            let rows: Vec<&[f64]> = pass.ids.iter().map(|&i| data.rows[i].as_slice()).collect();
            self.assembler.scatter_grads(&rows, &grads.input_grads, &self.models.embeddings, &mut eg)?;
            self.models.embeddings.sgd_step(&eg, eta)?;
        }
        Ok(())
    }
}

/// Gradient-reversal weight after `progress` in [0, 1] of training when the
/// warm-up ramp is enabled: `lambda * (2 / (1 + exp(-10 p)) - 1)`.
pub fn lambda_at(lambda: f64, progress: f64, warmup: bool) -> f64 {
    if !warmup {
        return lambda;
    }
    lambda * (2.0 / (1.0 + (-10.0 * progress.clamp(0.0, 1.0)).exp()) - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnKind, ColumnSpec, Party, Schema};
    use crate::grouping::build_spec_named;
    use crate::rng::{stream, Stream};
    use rand_distr::{Distribution, StandardNormal};
    use std::collections::BTreeMap;

    fn setup(k: usize, width: usize, with_cat: bool) -> (Schema, PassiveModel) {
        let mut columns = Vec::new();
        let mut groups = Vec::new();
        for j in 0..k {
            let mut names = Vec::new();
            for c in 0..width {
                let name = format!("g{j}c{c}");
                columns.push(ColumnSpec { name: name.clone(), kind: ColumnKind::Numeric, party: Party::PassiveC, vocab: vec![] });
                names.push(name);
            }
            if with_cat {
                let name = format!("g{j}cat");
                columns.push(ColumnSpec {
                    name: name.clone(),
                    kind: ColumnKind::Categorical,
                    party: Party::PassiveC,
                    vocab: vec!["a".into(), "b".into(), "c".into()],
                });
                names.push(name);
            }
            groups.push((format!("g{j}"), names));
        }
        let schema = Schema { label: "y".into(), positive: "1".into(), negative: "0".into(), columns };
        let spec = build_spec_named(&schema, &groups, true).unwrap();
        let asm = Assembler::new(spec, &schema, &BTreeMap::new()).unwrap();
        let archs: Vec<GroupArch> = asm.input_dims().into_iter().map(GroupArch::default_for).collect();
        let pm = PassiveModel::init(asm, &archs, &mut stream(3, Stream::Init)).unwrap();
        (schema, pm)
    }

    fn gaussian_rows(schema: &Schema, n: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, Stream::Data);
        (0..n)
            .map(|_| {
                schema
                    .columns
                    .iter()
                    .map(|c| match c.kind {
                        ColumnKind::Numeric => {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z + shift
                        }
                        ColumnKind::Categorical => rng.random_range(0..c.vocab.len()) as f64,
                    })
                    .collect()
            })
            .collect()
    }

    fn batch(pm: &PassiveModel, rows: &[Vec<f64>]) -> GroupedBatch {
        pm.assembler.assemble_rows(rows, &pm.models.embeddings, Exec::Sequential).unwrap()
    }

    #[test]
    fn zero_lambda_freezes_extractors_only() {
        let (schema, pm) = setup(2, 3, false);
        let src = batch(&pm, &gaussian_rows(&schema, 16, 0.0, 1));
        let tgt = batch(&pm, &gaussian_rows(&schema, 16, 1.0, 2));
        let mut m = pm.models.clone();
        domain_adv_step(&mut m, &src, &tgt, 0.0, 0.1, Exec::Sequential).unwrap();
        assert_eq!(m.extractors, pm.models.extractors);
        assert_ne!(m.discriminators, pm.models.discriminators);
        assert_eq!(m.aggregators, pm.models.aggregators);
    }

    #[test]
    fn reversal_scales_extractor_gradient() {
        let (schema, pm) = setup(2, 3, false);
        let src = batch(&pm, &gaussian_rows(&schema, 8, 0.0, 1));
        let tgt = batch(&pm, &gaussian_rows(&schema, 8, 1.0, 2));
        // lambda = -1 turns the reversal into plain descent on the loss
        let plain = adv_gradients(&pm.models, &src, &tgt, -1.0, Exec::Sequential).unwrap();
        let rev = adv_gradients(&pm.models, &src, &tgt, 0.7, Exec::Sequential).unwrap();
        for (a, b) in plain.extractors.iter().zip(&rev.extractors) {
            for (x, y) in a.flat().iter().zip(b.flat()) {
                assert!((y + 0.7 * x).abs() <= 1e-12 * (1.0 + x.abs()), "{x} {y}");
            }
        }
        assert_eq!(plain.discriminators, rev.discriminators);
        assert_eq!(plain.loss, rev.loss);
    }

    #[test]
    fn loss_decomposes_over_groups() {
        let (schema, pm) = setup(3, 2, false);
        let s_rows = gaussian_rows(&schema, 8, 0.0, 1);
        let t_rows = gaussian_rows(&schema, 8, 1.0, 2);
        let src = batch(&pm, &s_rows);
        let tgt = batch(&pm, &t_rows);
        let a = adv_gradients(&pm.models, &src, &tgt, 1.0, Exec::Sequential).unwrap();
        assert!((a.loss - a.group_loss.iter().sum::<f64>()).abs() < 1e-12);
        let mut src2 = src.clone();
        for r in &mut src2.groups[1] {
            r.iter_mut().for_each(|x| *x = 0.0);
        }
        let b = adv_gradients(&pm.models, &src2, &tgt, 1.0, Exec::Sequential).unwrap();
        for i in 0..a.group_loss.len() {
            assert_eq!(a.group_loss[i] == b.group_loss[i], i != 1);
        }
        assert_eq!(adv_gradients(&pm.models, &src, &tgt, 1.0, Exec::Parallel).unwrap(), a);
    }

    #[test]
    fn identical_domains_confuse_discriminators() {
        let (schema, mut pm) = setup(2, 3, false);
        let rows = gaussian_rows(&schema, 2000, 0.0, 5);
        let mut acc = vec![];
        let mut rng = stream(6, Stream::TargetSample);
        for _ in 0..300 {
            let pick = |rng: &mut rand_chacha::ChaCha20Rng| (0..32).map(|_| rows[rng.random_range(0..rows.len())].clone()).collect::<Vec<_>>();
            let s = batch(&pm, &pick(&mut rng));
            let t = batch(&pm, &pick(&mut rng));
            acc = domain_adv_step(&mut pm.models, &s, &t, 1.0, 0.05, Exec::Parallel).unwrap().accuracy;
        }
        let eval_s = batch(&pm, &rows[..500]);
        let eval_t = batch(&pm, &rows[500..1000]);
        let final_acc = adv_gradients(&pm.models, &eval_s, &eval_t, 1.0, Exec::Sequential).unwrap().accuracy;
        assert_eq!(acc.len(), 3);
        for a in final_acc {
            assert!(a > 0.4 && a < 0.6, "{a}");
        }
    }

    #[test]
    fn mu_matches_manual_composition() {
        let (schema, pm) = setup(2, 3, true);
        let rows = gaussian_rows(&schema, 5, 0.0, 1);
        let b = batch(&pm, &rows);
        let mu = aggregate_high_order(&pm.models, &b, Exec::Parallel).unwrap();
        let (mu2, _) = forward_mu(&pm.models, &b, Exec::Sequential).unwrap();
        assert_eq!(mu, mu2);
        assert_eq!(mu[0].len(), 3);
        for (r, row) in mu.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                let f = pm.models.extractors[i].predict(&b.groups[i][r]).unwrap();
                let manual = pm.models.aggregators[i].predict(&f).unwrap()[0];
                assert!((v - manual).abs() <= 1e-12);
            }
        }
        let mut zero = pm.models.clone();
        for a in &mut zero.aggregators {
            a.layers_mut()[0].weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let mu0 = aggregate_high_order(&zero, &b, Exec::Sequential).unwrap();
        for row in mu0 {
            for (i, v) in row.iter().enumerate() {
                assert_eq!(*v, zero.aggregators[i].layers()[0].bias[0]);
            }
        }
    }

    #[test]
    fn census_width_mu() {
        let (schema, pm) = setup(4, 2, false);
        let rows = gaussian_rows(&schema, 3, 0.0, 1);
        let mu = aggregate_high_order(&pm.models, &batch(&pm, &rows), Exec::Sequential).unwrap();
        assert!(mu.iter().all(|r| r.len() == 10));
    }

    #[test]
    fn backward_mu_matches_finite_differences() {
        let (schema, pm) = setup(2, 2, false);
        let rows = gaussian_rows(&schema, 4, 0.0, 1);
        let b = batch(&pm, &rows);
        let delta: Vec<Vec<f64>> = (0..4).map(|r| (0..3).map(|i| 0.3 * r as f64 - 0.2 * i as f64 + 0.1).collect()).collect();
        let (_, tapes) = forward_mu(&pm.models, &b, Exec::Sequential).unwrap();
        let grads = backward_mu(&pm.models, &tapes, &delta, Exec::Sequential).unwrap();
        let objective = |m: &GroupModels| -> f64 {
            let mu = aggregate_high_order(m, &b, Exec::Sequential).unwrap();
            mu.iter().zip(&delta).map(|(a, d)| a.iter().zip(d).map(|(x, y)| x * y).sum::<f64>()).sum()
        };
        let h = 1e-6;
        for i in 0..3 {
            let flat = pm.models.extractors[i].params_flat();
            let analytic = grads.extractors[i].flat();
            for p in (0..flat.len()).step_by(7) {
                let mut m = pm.models.clone();
                let mut f = flat.clone();
                f[p] += h;
                m.extractors[i].set_params_flat(&f).unwrap();
                let up = objective(&m);
                f[p] -= 2.0 * h;
                m.extractors[i].set_params_flat(&f).unwrap();
                let down = objective(&m);
                let num = (up - down) / (2.0 * h);
                assert!((num - analytic[p]).abs() <= 1e-6 * (1.0 + num.abs()), "group {i} param {p}: {num} vs {}", analytic[p]);
            }
        }
    }

    #[test]
    fn adapt_and_backward_touch_embeddings() {
        let (schema, mut pm) = setup(2, 2, true);
        let rows = gaussian_rows(&schema, 40, 0.0, 1);
        let data = TabularDataset::new(schema.clone(), rows, vec![0; 40]).unwrap();
        let before = pm.models.embeddings.clone();
        let ids: Vec<usize> = (0..20).collect();
        let tids: Vec<usize> = (20..40).collect();
        pm.adapt(&data, &ids, &tids, 1.0, 0.1, Exec::Sequential).unwrap();
        assert_ne!(pm.models.embeddings, before);

        let frozen = pm.clone();
        let pass = pm.forward(&data, &ids, Exec::Sequential).unwrap();
        let delta = vec![vec![0.1; 3]; ids.len()];
        pm.backward(&data, pass, &delta, 0.1, true, Exec::Sequential).unwrap();
        assert_eq!(pm.models.extractors, frozen.models.extractors);
        assert_eq!(pm.models.embeddings, frozen.models.embeddings);
        assert_ne!(pm.models.aggregators, frozen.models.aggregators);
    }

    #[test]
    fn lambda_ramp() {
        assert_eq!(lambda_at(0.5, 0.3, false), 0.5);
        assert_eq!(lambda_at(0.5, 0.0, true), 0.0);
        assert!((lambda_at(0.5, 1.0, true) - 0.5).abs() < 1e-4);
    }
}
