//! Feature groups of the passive party: base groups, their pairwise
//! interaction groups, and assembly of per-group input vectors.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, Party, Schema, TabularDataset};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{default_embedding_dim, Embedding, EmbeddingGrads, EmbeddingTable};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDef {
    pub name: String,
    /// Schema column indices, in order.
    pub columns: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroupSpec {
    pub k: usize,
    pub groups: Vec<GroupDef>,
    pub interactions_enabled: bool,
}

impl FeatureGroupSpec {
    /// Total number of groups, base plus interaction.
    pub fn g(&self) -> usize {
        if self.interactions_enabled {
            self.k + self.k * (self.k - 1) / 2
        } else {
            self.k
        }
    }

    /// Interaction pairs `(i, j)` with `i < j`, in lexicographic order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        if !self.interactions_enabled {
            return Vec::new();
        }
        (0..self.k).flat_map(|i| (i + 1..self.k).map(move |j| (i, j))).collect()
    }

    /// Base groups feeding group `i`: one for a base group, two for an interaction.
    pub fn parents(&self, i: usize) -> Vec<usize> {
        if i < self.k {
            vec![i]
        } else {
            let (a, b) = self.pairs()[i - self.k];
            vec![a, b]
        }
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.g())
            .map(|i| self.parents(i).iter().map(|&p| self.groups[p].name.as_str()).collect::<Vec<_>>().join("-"))
            .collect()
    }

    pub fn columns(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|g| g.columns.iter().copied()).collect()
    }
}

/// Validate that `column_groups` partitions `party_columns` and derive the
/// full group list.
pub fn build_spec(
    column_groups: &[(String, Vec<usize>)],
    party_columns: &[usize],
    interactions_enabled: bool,
) -> Result<FeatureGroupSpec> {
    if column_groups.is_empty() {
        return Err(Error::Invalid("at least one feature group is required".into()));
    }
    let mut seen = HashSet::new();
    let mut names = HashSet::new();
    for (name, cols) in column_groups {
        if cols.is_empty() {
            return Err(Error::Invalid(format!("feature group `{name}` is empty")));
        }
        if !names.insert(name.as_str()) {
            return Err(Error::Invalid(format!("feature group `{name}` declared twice")));
        }
        for c in cols {
            if !seen.insert(*c) {
                return Err(Error::Invalid(format!("column {c} appears in more than one feature group")));
            }
        }
    }
    let allowed: HashSet<usize> = party_columns.iter().copied().collect();
    if let Some(c) = seen.iter().find(|c| !allowed.contains(c)) {
        return Err(Error::Invalid(format!("column {c} is not a passive-party column")));
    }
    let mut missing: Vec<usize> = party_columns.iter().copied().filter(|c| !seen.contains(c)).collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        return Err(Error::Invalid(format!("passive-party columns {missing:?} belong to no feature group")));
    }
    Ok(FeatureGroupSpec {
        k: column_groups.len(),
        groups: column_groups.iter().map(|(n, c)| GroupDef { name: n.clone(), columns: c.clone() }).collect(),
        interactions_enabled,
    })
}

/// Same as [`build_spec`] with column names resolved against the schema.
pub fn build_spec_named(
    schema: &Schema,
    column_groups: &[(String, Vec<String>)],
    interactions_enabled: bool,
) -> Result<FeatureGroupSpec> {
    let resolved = column_groups
        .iter()
        .map(|(g, cols)| {
            let ids = cols
                .iter()
                .map(|c| schema.index_of(c).ok_or_else(|| Error::Invalid(format!("group `{g}`: unknown column `{c}`"))))
                .collect::<Result<Vec<_>>>()?;
            Ok((g.clone(), ids))
        })
        .collect::<Result<Vec<_>>>()?;
    build_spec(&resolved, &schema.party_columns(Party::PassiveC), interactions_enabled)
}

/// The no-grouping variant: every passive-party column in one group.
pub fn single_group_spec(schema: &Schema) -> Result<FeatureGroupSpec> {
    build_spec(&[("all_feat".to_string(), schema.party_columns(Party::PassiveC))], &schema.party_columns(Party::PassiveC), false)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Numeric { column: usize },
    Embedded { column: usize, slot: usize, vocab: usize, dim: usize },
}

impl Segment {
    pub fn width(&self) -> usize {
        match self {
            Segment::Numeric { .. } => 1,
            Segment::Embedded { dim, .. } => *dim,
        }
    }
}

/// Per-group inputs for one batch; `groups[i][r]` is row `r` of group `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedBatch {
    pub groups: Vec<Vec<Vec<f64>>>,
}

impl GroupedBatch {
    pub fn g(&self) -> usize {
        self.groups.len()
    }

    pub fn batch_size(&self) -> usize {
        self.groups.first().map_or(0, |g| g.len())
    }
}

/// Maps schema rows to group inputs, looking categorical cells up in an
/// embedding table with one slot per categorical column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assembler {
    pub spec: FeatureGroupSpec,
    pub base: Vec<Vec<Segment>>,
    /// `(column, vocab, dim)` per embedding slot.
    pub slots: Vec<(usize, usize, usize)>,
}

impl Assembler {
    /// `embed_dims` overrides the default width for named columns.
    pub fn new(spec: FeatureGroupSpec, schema: &Schema, embed_dims: &BTreeMap<String, usize>) -> Result<Self> {
        let mut slots = Vec::new();
        let mut base = Vec::with_capacity(spec.k);
        for g in &spec.groups {
            let mut segs = Vec::with_capacity(g.columns.len());
            for &c in &g.columns {
                let col = schema
                    .columns
                    .get(c)
                    .ok_or_else(|| Error::Invalid(format!("group `{}`: column {c} outside schema", g.name)))?;
                segs.push(match col.kind {
                    ColumnKind::Numeric => Segment::Numeric { column: c },
                    ColumnKind::Categorical => {
                        let vocab = col.vocab.len();
                        let dim = embed_dims.get(&col.name).copied().unwrap_or_else(|| default_embedding_dim(vocab));
                        if dim == 0 {
                            return Err(Error::Invalid(format!("embedding width of `{}` must be positive", col.name)));
                        }
                        slots.push((c, vocab, dim));
                        Segment::Embedded { column: c, slot: slots.len() - 1, vocab, dim }
                    }
                });
            }
            base.push(segs);
        }
        Ok(Assembler { spec, base, slots })
    }

    pub fn g(&self) -> usize {
        self.spec.g()
    }

    pub fn base_dims(&self) -> Vec<usize> {
        self.base.iter().map(|s| s.iter().map(Segment::width).sum()).collect()
    }

    /// Input width of every group, base groups first.
    pub fn input_dims(&self) -> Vec<usize> {
        let b = self.base_dims();
        (0..self.g()).map(|i| self.spec.parents(i).iter().map(|&p| b[p]).sum()).collect()
    }

    pub fn init_embeddings<R: Rng + ?Sized>(&self, rng: &mut R) -> EmbeddingTable {
        EmbeddingTable { columns: self.slots.iter().map(|&(_, v, d)| Embedding::init(v, d, rng)).collect() }
    }

    fn check_table(&self, emb: &EmbeddingTable) -> Result<()> {
        if emb.columns.len() != self.slots.len()
            || emb.columns.iter().zip(&self.slots).any(|(e, &(_, v, d))| e.vocab != v || e.dim != d)
        {
            return Err(Error::dim("embedding table", self.slots.len(), emb.columns.len()));
        }
        Ok(())
    }

    fn base_row(&self, j: usize, row: &[f64], emb: &EmbeddingTable) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for seg in &self.base[j] {
            let c = match seg {
                Segment::Numeric { column } | Segment::Embedded { column, .. } => *column,
            };
            let v = *row.get(c).ok_or_else(|| Error::Data(format!("row is missing column {c}")))?;
            match seg {
                Segment::Numeric { .. } => out.push(v),
                Segment::Embedded { slot, vocab, .. } => {
                    if v < 0.0 || v.fract() != 0.0 || v as usize >= *vocab {
                        return Err(Error::Data(format!("unknown category index {v} in column {c}")));
                    }
                    out.extend_from_slice(emb.lookup(*slot, v as usize)?);
                }
            }
        }
        Ok(out)
    }

    /// Assemble full-width schema rows.
    pub fn assemble_rows<T: AsRef<[f64]> + Sync>(&self, rows: &[T], emb: &EmbeddingTable, exec: Exec) -> Result<GroupedBatch> {
        self.check_table(emb)?;
        let per_row: Vec<Vec<Vec<f64>>> = exec.try_map(rows, |r| -> Result<Vec<Vec<f64>>> {
            let base = (0..self.spec.k).map(|j| self.base_row(j, r.as_ref(), emb)).collect::<Result<Vec<_>>>()?;
            Ok((0..self.g()).map(|i| self.spec.parents(i).iter().flat_map(|&p| base[p].iter().copied()).collect()).collect())
        })?;
        let mut groups: Vec<Vec<Vec<f64>>> = (0..self.g()).map(|_| Vec::with_capacity(rows.len())).collect();
        for r in per_row {
            for (i, v) in r.into_iter().enumerate() {
                groups[i].push(v);
            }
        }
        Ok(GroupedBatch { groups })
    }

    pub fn assemble(&self, data: &TabularDataset, ids: &[usize], emb: &EmbeddingTable, exec: Exec) -> Result<GroupedBatch> {
        let rows: Vec<&[f64]> = ids
            .iter()
            .map(|&i| data.rows.get(i).map(Vec::as_slice).ok_or_else(|| Error::Data(format!("row id {i} out of range"))))
            .collect::<Result<_>>()?;
        self.assemble_rows(&rows, emb, exec)
    }

    /// Route input gradients (`input_grads[i][r]`, shaped like the batch)
    /// back to the embedding rows they were looked up from.
    pub fn scatter_grads<T: AsRef<[f64]>>(
        &self,
        rows: &[T],
        input_grads: &[Vec<Vec<f64>>],
        emb: &EmbeddingTable,
        out: &mut EmbeddingGrads,
    ) -> Result<()> {
        if input_grads.len() != self.g() {
            return Err(Error::dim("input gradient groups", self.g(), input_grads.len()));
        }
        let b = self.base_dims();
        for (i, per_row) in input_grads.iter().enumerate() {
            if per_row.len() != rows.len() {
                return Err(Error::dim("input gradient rows", rows.len(), per_row.len()));
            }
            for (row, grad) in rows.iter().zip(per_row) {
                let mut off = 0;
                for p in self.spec.parents(i) {
                    for seg in &self.base[p] {
                        if let Segment::Embedded { column, slot, dim, .. } = seg {
                            let idx = row.as_ref()[*column] as usize;
                            emb.accumulate(out, *slot, idx, &grad[off..off + dim])?;
                        }
                        off += seg.width();
                    }
                }
                let expect: usize = self.spec.parents(i).iter().map(|&p| b[p]).sum();
                if off != expect || grad.len() != expect {
                    return Err(Error::dim("input gradient width", expect, grad.len()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnSpec;
    use crate::rng::{stream, Stream};

    fn num(name: &str) -> ColumnSpec {
        ColumnSpec { name: name.into(), kind: ColumnKind::Numeric, party: Party::PassiveC, vocab: vec![] }
    }

    fn cat(name: &str, vocab: usize) -> ColumnSpec {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Categorical,
            party: Party::PassiveC,
            vocab: (0..vocab).map(|i| format!("v{i}")).collect(),
        }
    }

    fn schema(columns: Vec<ColumnSpec>) -> Schema {
        Schema { label: "y".into(), positive: "1".into(), negative: "0".into(), columns }
    }

    #[test]
    fn group_counts() {
        let cols: Vec<usize> = (0..10).collect();
        let groups = |k: usize| -> Vec<(String, Vec<usize>)> {
            (0..k).map(|j| (format!("g{j}"), (j..10).step_by(k).collect())).collect()
        };
        assert_eq!(build_spec(&groups(4), &cols, true).unwrap().g(), 10);
        assert_eq!(build_spec(&groups(5), &cols, true).unwrap().g(), 15);
        assert_eq!(build_spec(&groups(1), &cols, true).unwrap().g(), 1);
        assert_eq!(build_spec(&groups(4), &cols, false).unwrap().g(), 4);
        for k in 1..=10 {
            assert_eq!(build_spec(&groups(k), &cols, true).unwrap().g(), k + k * (k - 1) / 2);
        }
        let s = build_spec(&groups(4), &cols, true).unwrap();
        assert_eq!(s.names()[4..], ["g0-g1", "g0-g2", "g0-g3", "g1-g2", "g1-g3", "g2-g3"]);
    }

    #[test]
    fn rejects_bad_partitions() {
        let cols = [0, 1, 2];
        assert!(build_spec(&[("a".into(), vec![0, 1]), ("b".into(), vec![1, 2])], &cols, true).is_err());
        assert!(build_spec(&[("a".into(), vec![0, 1])], &cols, true).is_err());
        assert!(build_spec(&[("a".into(), vec![0, 1, 2, 3])], &cols, true).is_err());
        assert!(build_spec(&[], &cols, true).is_err());
    }

    #[test]
    fn trivial_dims() {
        let s = schema(vec![num("a"), num("b"), cat("c", 2), cat("d", 2), cat("e", 2)]);
        let spec = build_spec_named(
            &s,
            &[("x".into(), vec!["a".into(), "b".into()]), ("y".into(), vec!["c".into(), "d".into(), "e".into()])],
            true,
        )
        .unwrap();
        let asm = Assembler::new(spec, &s, &BTreeMap::new()).unwrap();
        assert_eq!(asm.input_dims(), vec![2, 3, 5]);
    }

    #[test]
    fn census_reference_dims() {
        // widths from the default rule: vocab 16 -> 8, 8 -> 4, 6 -> 3, 2 -> 1
        let emp = vec![cat("e0", 16), cat("e1", 16), cat("e2", 16), cat("e3", 8)];
        let demo = vec![cat("d0", 16), cat("d1", 16), cat("d2", 16), cat("d3", 2)];
        let migr: Vec<ColumnSpec> = (0..7).map(|i| cat(&format!("m{i}"), 16)).collect();
        let house = vec![cat("h0", 16), cat("h1", 16), cat("h2", 16), cat("h3", 6)];
        let names = |v: &[ColumnSpec]| v.iter().map(|c| c.name.clone()).collect::<Vec<_>>();
        let groups = vec![
            ("emp".to_string(), names(&emp)),
            ("demo".to_string(), names(&demo)),
            ("migr".to_string(), names(&migr)),
            ("house".to_string(), names(&house)),
        ];
        let s = schema([emp, demo, migr, house].concat());
        let spec = build_spec_named(&s, &groups, true).unwrap();
        let asm = Assembler::new(spec.clone(), &s, &BTreeMap::new()).unwrap();
        let dims = asm.input_dims();
        assert_eq!(dims[..4], [28, 25, 56, 27]);
        let named: BTreeMap<String, usize> = spec.names().into_iter().zip(dims).collect();
        assert_eq!(named["emp-demo"], 53);
        assert_eq!(named["emp-migr"], 84);
        assert_eq!(named["emp-house"], 55);
        assert_eq!(named["demo-migr"], 81);
        assert_eq!(named["demo-house"], 52);
        assert_eq!(named["migr-house"], 83);
        let all = Assembler::new(single_group_spec(&s).unwrap(), &s, &BTreeMap::new()).unwrap();
        assert_eq!(all.input_dims(), vec![136]);
    }

    fn mixed() -> (Schema, Assembler, EmbeddingTable) {
        let s = schema(vec![num("a"), cat("b", 4), num("c"), cat("d", 3), num("e")]);
        let spec = build_spec_named(
            &s,
            &[
                ("p".into(), vec!["a".into(), "b".into()]),
                ("q".into(), vec!["c".into()]),
                ("r".into(), vec!["d".into(), "e".into()]),
            ],
            true,
        )
        .unwrap();
        let asm = Assembler::new(spec, &s, &BTreeMap::new()).unwrap();
        let emb = asm.init_embeddings(&mut stream(1, Stream::Init));
        (s, asm, emb)
    }

    #[test]
    fn interactions_concatenate_parents() {
        let (_, asm, emb) = mixed();
        let rows = vec![vec![0.5, 3.0, -1.0, 2.0, 7.0], vec![1.5, 0.0, 2.0, 1.0, -7.0]];
        let b = asm.assemble_rows(&rows, &emb, Exec::Sequential).unwrap();
        assert_eq!(b.g(), 6);
        assert_eq!(b.batch_size(), 2);
        for (i, &(p, q)) in asm.spec.pairs().iter().enumerate() {
            for r in 0..2 {
                let cat: Vec<f64> = b.groups[p][r].iter().chain(&b.groups[q][r]).copied().collect();
                assert_eq!(b.groups[3 + i][r], cat);
            }
        }
        assert_eq!(b.groups[0][0][1..], *emb.lookup(0, 3).unwrap());
        assert_eq!(asm.assemble_rows(&rows, &emb, Exec::Parallel).unwrap(), b);
    }

    #[test]
    fn mutating_a_parent_touches_only_its_groups() {
        let (_, asm, emb) = mixed();
        let rows = vec![vec![0.5, 3.0, -1.0, 2.0, 7.0]];
        let before = asm.assemble_rows(&rows, &emb, Exec::Sequential).unwrap();
        let changed = vec![vec![0.5, 3.0, 4.0, 2.0, 7.0]];
        let after = asm.assemble_rows(&changed, &emb, Exec::Sequential).unwrap();
        let names = asm.spec.names();
        for i in 0..asm.g() {
            let touches_q = names[i].split('-').any(|n| n == "q");
            assert_eq!(before.groups[i] != after.groups[i], touches_q, "{}", names[i]);
        }
    }

    #[test]
    fn unknown_category_is_an_error() {
        let (_, asm, emb) = mixed();
        assert!(asm.assemble_rows(&[vec![0.5, 4.0, -1.0, 2.0, 7.0]], &emb, Exec::Sequential).is_err());
        assert!(asm.assemble_rows(&[vec![0.5, 1.0]], &emb, Exec::Sequential).is_err());
    }

    #[test]
    fn scatter_reaches_each_lookup() {
        let (_, asm, emb) = mixed();
        let rows = vec![vec![0.5, 3.0, -1.0, 2.0, 7.0]];
        let dims = asm.input_dims();
        let grads: Vec<Vec<Vec<f64>>> = dims.iter().map(|&d| vec![vec![1.0; d]]).collect();
        let mut out = emb.zero_grads();
        asm.scatter_grads(&rows, &grads, &emb, &mut out).unwrap();
        // column b feeds p, p-q, p-r; column d feeds r, p-r, q-r
        let d_b = asm.slots[0].2;
        assert_eq!(out.columns[0][3 * d_b..4 * d_b], vec![3.0; d_b][..]);
        assert!(out.columns[0][..3 * d_b].iter().all(|&x| x == 0.0));
        let d_d = asm.slots[1].2;
        assert_eq!(out.columns[1][2 * d_d..3 * d_d], vec![3.0; d_d][..]);
    }
}
