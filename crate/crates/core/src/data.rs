//! Tabular data: schema, CSV ingestion, standardisation, domain splits,
//! positive-label subsampling and a synthetic covariate-shift generator.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// Which party holds a column. `Meta` columns (for example the attribute used
/// to split domains) are never model inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Active,
    PassiveC,
    Meta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub party: Party,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocab: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub label: String,
    #[serde(default = "default_positive")]
    pub positive: String,
    #[serde(default = "default_negative")]
    pub negative: String,
    pub columns: Vec<ColumnSpec>,
}

fn default_positive() -> String {
    "1".into()
}

fn default_negative() -> String {
    "0".into()
}

impl Schema {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn party_columns(&self, party: Party) -> Vec<usize> {
        (0..self.columns.len()).filter(|&i| self.columns[i].party == party).collect()
    }

    pub fn party_column_names(&self, party: Party) -> Vec<String> {
        self.party_columns(party).into_iter().map(|i| self.columns[i].name.clone()).collect()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) || c.name == self.label {
                return Err(Error::Data(format!("duplicate column `{}` in schema", c.name)));
            }
            if c.kind == ColumnKind::Categorical && c.vocab.is_empty() {
                return Err(Error::Data(format!("categorical column `{}` has an empty vocabulary", c.name)));
            }
        }
        Ok(())
    }
}

/// Rows hold one `f64` per schema column; categorical cells hold their
/// vocabulary index.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    pub schema: Schema,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

/// A party's columns for an ordered list of aligned row ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PartyView {
    pub party: Party,
    pub columns: Vec<String>,
    pub ids: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl TabularDataset {
    pub fn new(schema: Schema, rows: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self> {
        schema.validate()?;
        if rows.len() != labels.len() {
            return Err(Error::dim("dataset labels", rows.len(), labels.len()));
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != schema.columns.len() {
                return Err(Error::Data(format!("row {r} has {} cells, schema has {}", row.len(), schema.columns.len())));
            }
            for (c, col) in schema.columns.iter().enumerate() {
                let v = row[c];
                let ok = match col.kind {
                    ColumnKind::Numeric => v.is_finite(),
                    ColumnKind::Categorical => v >= 0.0 && v.fract() == 0.0 && (v as usize) < col.vocab.len(),
                };
                if !ok {
                    return Err(Error::Data(format!("row {r}, column `{}`: invalid value {v}", col.name)));
                }
            }
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Data(format!("label {l} is not 0 or 1")));
        }
        Ok(TabularDataset { schema, rows, labels })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn view(&self, party: Party, ids: &[usize]) -> PartyView {
        let cols = self.schema.party_columns(party);
        PartyView {
            party,
            columns: cols.iter().map(|&c| self.schema.columns[c].name.clone()).collect(),
            ids: ids.to_vec(),
            rows: ids.iter().map(|&i| cols.iter().map(|&c| self.rows[i][c]).collect()).collect(),
        }
    }

    pub fn labels_of(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter().map(|&i| self.labels[i]).collect()
    }

    /// Write as CSV with a header row; categoricals are written as their
    /// vocabulary strings.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut header: Vec<&str> = self.schema.columns.iter().map(|c| c.name.as_str()).collect();
        header.push(&self.schema.label);
        w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
        for (row, &y) in self.rows.iter().zip(&self.labels) {
            let mut rec: Vec<String> = row
                .iter()
                .zip(&self.schema.columns)
                .map(|(&v, c)| match c.kind {
                    ColumnKind::Numeric => format!("{v:?}"),
                    ColumnKind::Categorical => c.vocab[v as usize].clone(),
                })
                .collect();
            rec.push(if y == 1 { self.schema.positive.clone() } else { self.schema.negative.clone() });
            w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Parse a CSV with a header row against `schema`. Numeric values are kept
/// raw; see [`Standardizer`].
pub fn load_csv(path: &Path, schema: &Schema) -> Result<TabularDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<TabularDataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Data(format!("header: {e}")))?.clone();
    let mut position: HashMap<&str, usize> = HashMap::new();
    for (i, h) in header.iter().enumerate() {
        let h = h.trim();
        if h != schema.label && schema.index_of(h).is_none() {
            return Err(Error::Data(format!("unknown column `{h}` (not in schema)")));
        }
        position.insert(h, i);
    }
    let cols: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| position.get(c.name.as_str()).copied().ok_or_else(|| Error::Data(format!("missing column `{}`", c.name))))
        .collect::<Result<_>>()?;
    let label_pos = *position
        .get(schema.label.as_str())
        .ok_or_else(|| Error::Data(format!("missing label column `{}`", schema.label)))?;
    let vocab_maps: Vec<HashMap<&str, usize>> = schema
        .columns
        .iter()
        .map(|c| c.vocab.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect())
        .collect();

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2; // 1-based, after the header
        let rec = rec.map_err(|e| Error::Data(format!("row {line}: {e}")))?;
        let mut row = Vec::with_capacity(cols.len());
        for (c, &pos) in cols.iter().enumerate() {
            let spec = &schema.columns[c];
            let cell = rec.get(pos).unwrap_or("").trim();
            let v = match spec.kind {
                ColumnKind::Numeric => cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Data(format!("row {line}, column `{}`: cannot parse `{cell}` as a number", spec.name))
                })?,
                ColumnKind::Categorical => *vocab_maps[c].get(cell).ok_or_else(|| {
                    Error::Data(format!("row {line}, column `{}`: category `{cell}` is not in the vocabulary", spec.name))
                })? as f64,
            };
            row.push(v);
        }
        let l = rec.get(label_pos).unwrap_or("").trim();
        let y = if l == schema.positive {
            1
        } else if l == schema.negative {
            0
        } else {
            return Err(Error::Data(format!("row {line}, column `{}`: label `{l}` is neither `{}` nor `{}`", schema.label, schema.positive, schema.negative)));
        };
        rows.push(row);
        labels.push(y);
    }
    TabularDataset::new(schema.clone(), rows, labels)
}

/// Z-score statistics for numeric columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub columns: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on the given (training) rows only.
    pub fn fit(data: &TabularDataset, ids: &[usize]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data("cannot fit standardizer on zero rows".into()));
        }
        let columns: Vec<usize> = (0..data.schema.columns.len())
            .filter(|&c| data.schema.columns[c].kind == ColumnKind::Numeric && data.schema.columns[c].party != Party::Meta)
            .collect();
        let n = ids.len() as f64;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for &c in &columns {
            let m = ids.iter().map(|&i| data.rows[i][c]).sum::<f64>() / n;
            let v = ids.iter().map(|&i| (data.rows[i][c] - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        Ok(Standardizer { columns, mean, std })
    }

    pub fn apply(&self, data: &mut TabularDataset) {
        for row in &mut data.rows {
            for (k, &c) in self.columns.iter().enumerate() {
                row[c] = (row[c] - self.mean[k]) / self.std[k];
            }
        }
    }
}

/// Row-id partition of a dataset into domains. Ids index the shared dataset,
/// so they double as the alignment indices between party views.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub source: Vec<usize>,
    pub target_labeled: Vec<usize>,
    pub target_unlabeled: Vec<usize>,
    pub target_test: Vec<usize>,
}

impl DomainSplit {
    /// Every target row that party C may use for adaptation.
    pub fn target_all(&self) -> Vec<usize> {
        self.target_labeled.iter().chain(&self.target_unlabeled).copied().collect()
    }

    pub fn check(&self, min_source_ratio: f64) -> Result<()> {
        let sets = [&self.source, &self.target_labeled, &self.target_unlabeled, &self.target_test];
        let mut seen = HashSet::new();
        for s in sets {
            for &i in s.iter() {
                if !seen.insert(i) {
                    return Err(Error::Data(format!("row {i} appears in more than one partition")));
                }
            }
        }
        if (self.source.len() as f64) < min_source_ratio * self.target_labeled.len() as f64 {
            return Err(Error::Data(format!(
                "source has {} rows, fewer than {min_source_ratio} x {} labeled target rows",
                self.source.len(),
                self.target_labeled.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Categorical column whose value decides the domain.
    pub column: String,
    pub source_values: Vec<String>,
    pub target_values: Vec<String>,
    /// `None` keeps every matching source row.
    #[serde(default)]
    pub n_source: Option<usize>,
    pub n_target_labeled: usize,
    pub n_target_unlabeled: usize,
    #[serde(default)]
    pub n_target_test: usize,
    #[serde(default = "default_min_ratio")]
    pub min_source_ratio: f64,
}

fn default_min_ratio() -> f64 {
    1.0
}

pub fn split_domains(data: &TabularDataset, cfg: &SplitConfig, seed: u64) -> Result<DomainSplit> {
    let c = data
        .schema
        .index_of(&cfg.column)
        .ok_or_else(|| Error::Data(format!("split column `{}` not in schema", cfg.column)))?;
    let col = &data.schema.columns[c];
    if col.kind != ColumnKind::Categorical {
        return Err(Error::Data(format!("split column `{}` must be categorical", cfg.column)));
    }
    let codes = |vals: &[String]| -> Result<HashSet<usize>> {
        vals.iter()
            .map(|v| {
                col.vocab
                    .iter()
                    .position(|x| x == v)
                    .ok_or_else(|| Error::Data(format!("`{v}` is not a value of `{}`", cfg.column)))
            })
            .collect()
    };
    let src_codes = codes(&cfg.source_values)?;
    let tgt_codes = codes(&cfg.target_values)?;
    let mut rng = rng::stream(seed, Stream::Shuffle);
    let mut pick = |codes: &HashSet<usize>, what: &str| -> Result<Vec<usize>> {
        let mut ids: Vec<usize> = (0..data.len()).filter(|&i| codes.contains(&(data.rows[i][c] as usize))).collect();
        if ids.is_empty() {
            return Err(Error::Data(format!("no rows match the {what} predicate on `{}`", cfg.column)));
        }
        ids.shuffle(&mut rng);
        Ok(ids)
    };
    let mut src = pick(&src_codes, "source")?;
    let tgt = pick(&tgt_codes, "target")?;
    if let Some(n) = cfg.n_source {
        if n > src.len() {
            return Err(Error::Data(format!("requested {n} source rows, only {} available", src.len())));
        }
        src.truncate(n);
    }
    let need = cfg.n_target_labeled + cfg.n_target_unlabeled + cfg.n_target_test;
    if need > tgt.len() {
        return Err(Error::Data(format!("requested {need} target rows, only {} available", tgt.len())));
    }
    let (l, rest) = tgt.split_at(cfg.n_target_labeled);
    let (u, rest) = rest.split_at(cfg.n_target_unlabeled);
    let split = DomainSplit {
        source: src,
        target_labeled: l.to_vec(),
        target_unlabeled: u.to_vec(),
        target_test: rest[..cfg.n_target_test].to_vec(),
    };
    split.check(cfg.min_source_ratio)?;
    Ok(split)
}

/// Keep exactly `n_pos` positives in the labeled target set, plus enough
/// negatives that positives make up `ratio` of it. Relative order is kept.
pub fn subsample_positives(
    data: &TabularDataset,
    split: &DomainSplit,
    n_pos: usize,
    ratio: f64,
    seed: u64,
) -> Result<DomainSplit> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("positive ratio must be in (0, 1], got {ratio}")));
    }
    let (pos, neg): (Vec<usize>, Vec<usize>) = split.target_labeled.iter().partition(|&&i| data.labels[i] == 1);
    if n_pos > pos.len() {
        return Err(Error::Data(format!("requested {n_pos} positives, only {} available", pos.len())));
    }
    let total = (n_pos as f64 / ratio).round() as usize;
    let n_neg = total.saturating_sub(n_pos);
    if n_neg > neg.len() {
        return Err(Error::Data(format!("ratio {ratio} needs {n_neg} negatives, only {} available", neg.len())));
    }
    let mut rng = rng::stream(seed, Stream::Subsample);
    let choose = |v: &[usize], k: usize, rng: &mut rand_chacha::ChaCha20Rng| -> HashSet<usize> {
        if k == v.len() {
            v.iter().copied().collect()
        } else {
            v.choose_multiple(rng, k).copied().collect()
        }
    };
    let keep_pos = choose(&pos, n_pos, &mut rng);
    let keep_neg = choose(&neg, n_neg, &mut rng);
    Ok(DomainSplit {
        target_labeled: split
            .target_labeled
            .iter()
            .copied()
            .filter(|i| keep_pos.contains(i) || keep_neg.contains(i))
            .collect(),
        ..split.clone()
    })
}

/// Parameters of the synthetic covariate-shift generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Party-C numeric columns per feature group.
    pub group_dims: Vec<usize>,
    pub group_names: Vec<String>,
    pub active_dim: usize,
    pub n_source: usize,
    pub n_target_labeled: usize,
    pub n_target_unlabeled: usize,
    pub n_target_test: usize,
    /// Target translation of every group, in units of the latent std.
    pub shift: f64,
    /// Cosine between each group's shift direction and its label direction.
    pub shift_alignment: f64,
    /// Relative change of the per-group label weights in the target domain.
    pub concept_shift: f64,
    /// Weight of the pairwise cross-group products in the label logit.
    pub interaction: f64,
    /// Weight of the active party's own features in the label logit.
    pub active_signal: f64,
    pub bias: f64,
    pub label_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            group_dims: vec![4, 4],
            group_names: Vec::new(),
            active_dim: 2,
            n_source: 200,
            n_target_labeled: 60,
            n_target_unlabeled: 40,
            n_target_test: 100,
            shift: 1.0,
            shift_alignment: 0.5,
            concept_shift: 0.5,
            interaction: 0.5,
            active_signal: 0.5,
            bias: -1.0,
            label_noise: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn group_name(&self, j: usize) -> String {
        self.group_names.get(j).cloned().unwrap_or_else(|| format!("g{j}"))
    }

    /// Party-C column names per group.
    pub fn group_columns(&self) -> Vec<(String, Vec<String>)> {
        self.group_dims
            .iter()
            .enumerate()
            .map(|(j, &d)| {
                let name = self.group_name(j);
                let cols = (0..d).map(|i| format!("{name}_x{i}")).collect();
                (name, cols)
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.group_dims.is_empty() || self.group_dims.contains(&0) {
            return Err(Error::Invalid("synthetic data needs at least one group of nonzero width".into()));
        }
        if self.n_source == 0 || self.n_target_labeled == 0 {
            return Err(Error::Invalid("synthetic data needs source and labeled target rows".into()));
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return Err(Error::Invalid(format!("label noise {} outside [0, 0.5]", self.label_noise)));
        }
        if !(-1.0..=1.0).contains(&self.shift_alignment) {
            return Err(Error::Invalid("shift alignment must be a cosine".into()));
        }
        Ok(())
    }
}

fn unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit vector at cosine `cos` to `a` (itself unit length).
fn at_angle<R: Rng + ?Sized>(rng: &mut R, a: &[f64], cos: f64) -> Vec<f64> {
    if a.len() == 1 {
        return vec![a[0].signum()];
    }
    let r = unit(rng, a.len());
    let dot: f64 = r.iter().zip(a).map(|(x, y)| x * y).sum();
    let mut perp: Vec<f64> = r.iter().zip(a).map(|(x, y)| x - dot * y).collect();
    let n = perp.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    perp.iter_mut().for_each(|x| *x /= n);
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    a.iter().zip(&perp).map(|(x, p)| cos * x + sin * p).collect()
}

/// Source and target rows drawn from one latent model. Target features are
/// translated by `shift` per group and the target label weights of each group
/// are perturbed by `concept_shift`; labels come from a fixed logistic model
/// of the untranslated latents with pairwise group interactions.
pub fn synth_shift(cfg: &SynthConfig, seed: u64) -> Result<(TabularDataset, DomainSplit)> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, Stream::Data);
    let k = cfg.group_dims.len();

    // fixed ground truth
    let label_dir: Vec<Vec<f64>> = cfg.group_dims.iter().map(|&d| unit(&mut rng, d)).collect();
    let shift_dir: Vec<Vec<f64>> = label_dir.iter().map(|a| at_angle(&mut rng, a, cfg.shift_alignment)).collect();
    let w_source: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..2.0)).collect();
    let w_target: Vec<f64> = w_source
        .iter()
        .enumerate()
        .map(|(j, w)| w * (1.0 + cfg.concept_shift * if j % 2 == 0 { -1.0 } else { 1.0 }))
        .collect();
    let pair_w: Vec<f64> = (0..k * k).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let active_w: Vec<f64> = (0..cfg.active_dim).map(|_| rng.random_range(0.5..1.0)).collect();

    let mut columns = Vec::new();
    for i in 0..cfg.active_dim {
        columns.push(ColumnSpec { name: format!("a{i}"), kind: ColumnKind::Numeric, party: Party::Active, vocab: vec![] });
    }
    for (_, cols) in cfg.group_columns() {
        for name in cols {
            columns.push(ColumnSpec { name, kind: ColumnKind::Numeric, party: Party::PassiveC, vocab: vec![] });
        }
    }
    columns.push(ColumnSpec {
        name: "domain".into(),
        kind: ColumnKind::Categorical,
        party: Party::Meta,
        vocab: vec!["source".into(), "target".into()],
    });
    let schema = Schema { label: "label".into(), positive: "1".into(), negative: "0".into(), columns };

    let n_target = cfg.n_target_labeled + cfg.n_target_unlabeled + cfg.n_target_test;
    let mut rows = Vec::with_capacity(cfg.n_source + n_target);
    let mut labels = Vec::with_capacity(cfg.n_source + n_target);
    for r in 0..cfg.n_source + n_target {
        let target = r >= cfg.n_source;
        let mut row = Vec::with_capacity(schema.columns.len());
        let xa: Vec<f64> = (0..cfg.active_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut logit = cfg.bias + cfg.active_signal * xa.iter().zip(&active_w).map(|(x, w)| x * w).sum::<f64>();
        row.extend(&xa);
        let mut scores = Vec::with_capacity(k);
        for j in 0..k {
            let h: Vec<f64> = (0..cfg.group_dims[j]).map(|_| StandardNormal.sample(&mut rng)).collect();
            let u: f64 = h.iter().zip(&label_dir[j]).map(|(x, a)| x * a).sum();
            scores.push(u);
            let offset = if target { cfg.shift } else { 0.0 };
            row.extend(h.iter().zip(&shift_dir[j]).map(|(x, v)| x + offset * v));
            logit += if target { w_target[j] } else { w_source[j] } * u;
        }
        for i in 0..k {
            for j in i + 1..k {
                logit += cfg.interaction * pair_w[i * k + j] * scores[i] * scores[j];
            }
        }
        row.push(if target { 1.0 } else { 0.0 });
        let p = crate::nn::sigmoid(logit);
        let mut y = rng.random_bool(p) as u8;
        if cfg.label_noise > 0.0 && rng.random_bool(cfg.label_noise) {
            y = 1 - y;
        }
        rows.push(row);
        labels.push(y);
    }
    let data = TabularDataset::new(schema, rows, labels)?;
    let s = cfg.n_source;
    let split = DomainSplit {
        source: (0..s).collect(),
        target_labeled: (s..s + cfg.n_target_labeled).collect(),
        target_unlabeled: (s + cfg.n_target_labeled..s + cfg.n_target_labeled + cfg.n_target_unlabeled).collect(),
        target_test: (s + cfg.n_target_labeled + cfg.n_target_unlabeled..s + n_target).collect(),
    };
    Ok((data, split))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_schema() -> Schema {
        Schema {
            label: "y".into(),
            positive: "1".into(),
            negative: "0".into(),
            columns: vec![
                ColumnSpec { name: "age".into(), kind: ColumnKind::Numeric, party: Party::Active, vocab: vec![] },
                ColumnSpec {
                    name: "job".into(),
                    kind: ColumnKind::Categorical,
                    party: Party::PassiveC,
                    vocab: vec!["a".into(), "b".into(), "c".into()],
                },
                ColumnSpec { name: "hours".into(), kind: ColumnKind::Numeric, party: Party::PassiveC, vocab: vec![] },
            ],
        }
    }

    const FIXTURE: &str = "age,job,hours,y\n30,b,40.5,1\n41,a,20,0\n25,c,60,1\n";

    #[test]
    fn loads_typed_fixture() {
        let d = read_csv(FIXTURE.as_bytes(), &fixture_schema()).unwrap();
        assert_eq!(d.rows, vec![vec![30.0, 1.0, 40.5], vec![41.0, 0.0, 20.0], vec![25.0, 2.0, 60.0]]);
        assert_eq!(d.labels, vec![1, 0, 1]);
    }

    #[test]
    fn reports_row_and_column_of_bad_cells() {
        let bad = "age,job,hours,y\n30,b,40,1\n41,z,20,0\n";
        let e = read_csv(bad.as_bytes(), &fixture_schema()).unwrap_err().to_string();
        assert!(e.contains("row 3") && e.contains("`job`"), "{e}");
        let bad = "age,job,hours,y\n30,b,forty,1\n";
        let e = read_csv(bad.as_bytes(), &fixture_schema()).unwrap_err().to_string();
        assert!(e.contains("row 2") && e.contains("`hours`"), "{e}");
        let bad = "age,job,hours,extra,y\n30,b,40,1,1\n";
        assert!(read_csv(bad.as_bytes(), &fixture_schema()).unwrap_err().to_string().contains("unknown column"));
    }

    #[test]
    fn standardizer_uses_training_rows_only() {
        let mut d = read_csv(FIXTURE.as_bytes(), &fixture_schema()).unwrap();
        let train = [0, 1];
        let s = Standardizer::fit(&d, &train).unwrap();
        s.apply(&mut d);
        for &c in &s.columns {
            let m: f64 = train.iter().map(|&i| d.rows[i][c]).sum::<f64>() / 2.0;
            let v: f64 = train.iter().map(|&i| (d.rows[i][c] - m).powi(2)).sum::<f64>() / 2.0;
            assert!(m.abs() < 1e-9 && (v.sqrt() - 1.0).abs() < 1e-9);
        }
        // categorical untouched
        assert_eq!(d.rows[2][1], 2.0);
    }

    fn census_like(n_src: usize, n_tgt: usize) -> TabularDataset {
        let schema = Schema {
            label: "y".into(),
            positive: "1".into(),
            negative: "0".into(),
            columns: vec![
                ColumnSpec {
                    name: "education".into(),
                    kind: ColumnKind::Categorical,
                    party: Party::Meta,
                    vocab: vec!["undergraduate".into(), "postgraduate".into()],
                },
                ColumnSpec { name: "x".into(), kind: ColumnKind::Numeric, party: Party::PassiveC, vocab: vec![] },
                ColumnSpec { name: "a".into(), kind: ColumnKind::Numeric, party: Party::Active, vocab: vec![] },
            ],
        };
        let rows = (0..n_src + n_tgt).map(|i| vec![(i >= n_src) as u8 as f64, i as f64, -(i as f64)]).collect();
        let labels = (0..n_src + n_tgt).map(|i| (i % 10 == 0) as u8).collect();
        TabularDataset::new(schema, rows, labels).unwrap()
    }

    #[test]
    fn census_style_split_sizes() {
        let d = census_like(80_000, 14_000);
        let cfg = SplitConfig {
            column: "education".into(),
            source_values: vec!["undergraduate".into()],
            target_values: vec!["postgraduate".into()],
            n_source: Some(80_000),
            n_target_labeled: 4000,
            n_target_unlabeled: 9000,
            n_target_test: 1000,
            min_source_ratio: 10.0,
        };
        let s = split_domains(&d, &cfg, 1).unwrap();
        assert_eq!((s.source.len(), s.target_labeled.len(), s.target_unlabeled.len()), (80_000, 4000, 9000));
        assert!(s.source.iter().all(|&i| i < 80_000));
        assert!(s.target_all().iter().all(|&i| i >= 80_000));

        let mut zero = cfg.clone();
        zero.n_target_unlabeled = 0;
        assert!(split_domains(&d, &zero, 1).unwrap().target_unlabeled.is_empty());

        let mut too_many = cfg.clone();
        too_many.n_target_labeled = 14_000;
        assert!(split_domains(&d, &too_many, 1).is_err());
        let mut nothing = cfg;
        nothing.target_values = vec!["undergraduate".into()];
        nothing.source_values = vec![];
        assert!(split_domains(&d, &nothing, 1).is_err());
    }

    #[test]
    fn party_views_rejoin_to_rows() {
        let d = census_like(50, 50);
        let ids: Vec<usize> = vec![7, 3, 88, 41];
        let a = d.view(Party::Active, &ids);
        let c = d.view(Party::PassiveC, &ids);
        assert_eq!(a.ids, c.ids);
        for (k, &i) in ids.iter().enumerate() {
            assert_eq!(a.rows[k], vec![d.rows[i][2]]);
            assert_eq!(c.rows[k], vec![d.rows[i][1]]);
        }
    }

    #[test]
    fn subsampling_positives() {
        let d = census_like(100, 5000);
        let split = DomainSplit {
            source: (0..100).collect(),
            target_labeled: (100..5100).collect(),
            target_unlabeled: vec![],
            target_test: vec![],
        };
        let s = subsample_positives(&d, &split, 40, 0.01, 3).unwrap();
        assert_eq!(s.target_labeled.len(), 4000);
        assert_eq!(s.target_labeled.iter().filter(|&&i| d.labels[i] == 1).count(), 40);
        let t = subsample_positives(&d, &split, 40, 0.01, 4).unwrap();
        assert_ne!(s.target_labeled, t.target_labeled);
        assert_eq!(t.target_labeled.len(), 4000);

        let all_pos = split.target_labeled.iter().filter(|&&i| d.labels[i] == 1).count();
        let ratio = all_pos as f64 / split.target_labeled.len() as f64;
        assert_eq!(subsample_positives(&d, &split, all_pos, ratio, 5).unwrap(), split);
        assert!(subsample_positives(&d, &split, all_pos + 1, 0.5, 5).is_err());
    }

    #[test]
    fn synthetic_data_is_reproducible() {
        let cfg = SynthConfig::default();
        let (a, sa) = synth_shift(&cfg, 9).unwrap();
        let (b, sb) = synth_shift(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let (c, _) = synth_shift(&cfg, 10).unwrap();
        assert_ne!(a.rows, c.rows);
        sa.check(1.0).unwrap();
        assert!(synth_shift(&SynthConfig { group_dims: vec![], ..cfg }, 1).is_err());
    }

    #[test]
    fn synthetic_csv_round_trip() {
        let cfg = SynthConfig { n_source: 20, n_target_labeled: 5, n_target_unlabeled: 5, n_target_test: 5, ..Default::default() };
        let (d, _) = synth_shift(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        d.write_csv(&p).unwrap();
        let back = load_csv(&p, &d.schema).unwrap();
        assert_eq!(back, d);
    }
}
