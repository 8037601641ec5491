//! Experiment configuration: one TOML file covering data, feature groups,
//! architectures, the run parameters and the ablation switches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::GroupArch;
use crate::data::{self, DomainSplit, Schema, SplitConfig, Standardizer, SynthConfig, TabularDataset};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grouping::{build_spec_named, single_group_spec, Assembler, FeatureGroupSpec};
use crate::nn::parse_arch;
use crate::phe::ALLOWED_KEY_BITS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Pre-training epochs over the source data.
    pub epochs_pretrain: usize,
    /// Fine-tuning epochs over the labeled target data.
    pub epochs_finetune: usize,
    pub batch_size: usize,
    /// Size of the target mini-batch for the adversarial loss; defaults to
    /// `batch_size`.
    pub target_batch_size: Option<usize>,
    pub eta_pretrain: f64,
    pub eta_finetune: f64,
    pub lambda: f64,
    pub lambda_warmup: bool,
    pub seed: u64,
    pub key_bits: u32,
    pub frac_bits: u32,
    /// Re-shuffle the shared batch order every epoch.
    pub reshuffle: bool,
    pub freeze_extractors: bool,
    /// Early stopping on validation loss during fine-tuning.
    pub patience: Option<usize>,
    /// Share of labeled target rows held out for validation when
    /// `patience` is set.
    pub validation_fraction: f64,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs_pretrain: 3,
            epochs_finetune: 5,
            batch_size: 16,
            target_batch_size: None,
            eta_pretrain: 0.005,
            eta_finetune: 0.01,
            lambda: 0.1,
            lambda_warmup: true,
            seed: 0,
            key_bits: 2048,
            frac_bits: 40,
            reshuffle: true,
            freeze_extractors: false,
            patience: None,
            validation_fraction: 0.2,
            exec: Exec::default(),
        }
    }
}

impl RunConfig {
    pub fn target_batch(&self) -> usize {
        self.target_batch_size.unwrap_or(self.batch_size)
    }

    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.batch_size == 0 {
            return Err(("run.batch_size", "must be at least 1".into()));
        }
        if self.target_batch_size == Some(0) {
            return Err(("run.target_batch_size", "must be at least 1".into()));
        }
        for (f, v) in [("run.eta_pretrain", self.eta_pretrain), ("run.eta_finetune", self.eta_finetune)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err((f, format!("learning rate must be positive, got {v}")));
            }
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(("run.lambda", format!("must be a finite non-negative number, got {}", self.lambda)));
        }
        if !ALLOWED_KEY_BITS.contains(&self.key_bits) {
            return Err(("run.key_bits", format!("{} is not one of {ALLOWED_KEY_BITS:?}", self.key_bits)));
        }
        if !(16..=60).contains(&self.frac_bits) {
            return Err(("run.frac_bits", format!("{} outside 16..=60", self.frac_bits)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(("run.validation_fraction", "must lie strictly between 0 and 1".into()));
        }
        if self.patience == Some(0) {
            return Err(("run.patience", "must be at least 1 when set".into()));
        }
        Ok(())
    }
}

/// Which components of the full method are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Domain adaptation on feature groups with pairwise interactions.
    Prada,
    NoIr,
    NoDaIr,
    NoFgIr,
    NoDaFgIr,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Prada, Variant::NoIr, Variant::NoDaIr, Variant::NoFgIr, Variant::NoDaFgIr];

    pub fn domain_adaptation(self) -> bool {
        matches!(self, Variant::Prada | Variant::NoIr | Variant::NoFgIr)
    }

    pub fn feature_groups(self) -> bool {
        matches!(self, Variant::Prada | Variant::NoIr | Variant::NoDaIr)
    }

    pub fn interactions(self) -> bool {
        self == Variant::Prada
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Prada => "prada",
            Variant::NoIr => "no_ir",
            Variant::NoDaIr => "no_da_ir",
            Variant::NoFgIr => "no_fg_ir",
            Variant::NoDaFgIr => "no_da_fg_ir",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant `{s}`; expected one of prada, no_ir, no_da_ir, no_fg_ir, no_da_fg_ir")))
    }
}

/// Which parties and rows take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Party A alone on its labeled target rows.
    ALocal,
    /// A and C on the labeled target rows.
    AVfl,
    /// A, B and C on source plus labeled target rows, no adaptation.
    AbVfl,
    /// Pre-train with B and C on the source, fine-tune with A and C.
    BToA,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::ALocal, Setting::AVfl, Setting::AbVfl, Setting::BToA];

    pub fn name(self) -> &'static str {
        match self {
            Setting::ALocal => "a_local",
            Setting::AVfl => "a_vfl",
            Setting::AbVfl => "ab_vfl",
            Setting::BToA => "b_to_a",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown setting `{s}`; expected a_local, a_vfl, ab_vfl or b_to_a")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_setting")]
    pub setting: Setting,
}

fn default_variant() -> Variant {
    Variant::Prada
}

fn default_setting() -> Setting {
    Setting::BToA
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { variant: Variant::Prada, setting: Setting::BToA }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositivesConfig {
    pub n_pos: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub path: PathBuf,
    pub schema: Schema,
    pub split: SplitConfig,
    #[serde(default)]
    pub positives: Option<PositivesConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic {
        #[serde(default)]
        synthetic: SynthConfig,
    },
    Csv(CsvData),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub name: String,
    pub columns: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupsConfig {
    /// Explicit base groups. Synthetic data derives them from its layout
    /// when this is empty.
    pub group: Vec<GroupConfig>,
    pub embedding_dims: BTreeMap<String, usize>,
}

/// Optional per-group architecture strings in `FC(a->b)-FC(b->c)` form,
/// keyed by group name (`emp`, `emp-demo`, `all_feat`).
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub extractors: BTreeMap<String, String>,
    pub discriminators: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub groups: GroupsConfig,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn config_err(path: &Path, field: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.display().to_string(), field: field.to_string(), message: message.into() }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parse TOML; `origin` is only used in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|s| text.get(..s.start))
                .map(|before| {
                    let line = before.lines().count();
                    let table = before.lines().rev().find(|l| l.trim_start().starts_with('[')).unwrap_or("(top level)");
                    format!("line {line}, in {}", table.trim())
                })
                .unwrap_or_else(|| "(unknown)".into());
            config_err(origin, &field, e.message().to_string())
        })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn validate(&self, origin: &Path) -> Result<()> {
        self.run.validate().map_err(|(f, m)| config_err(origin, f, m))?;
        for (k, v) in self.architecture.extractors.iter().chain(&self.architecture.discriminators) {
            parse_arch(v).map_err(|e| config_err(origin, &format!("architecture.{k}"), e.to_string()))?;
        }
        for (k, &d) in &self.groups.embedding_dims {
            if d == 0 {
                return Err(config_err(origin, &format!("groups.embedding_dims.{k}"), "must be positive"));
            }
        }
        if let DataConfig::Csv(c) = &self.data {
            if let Some(p) = &c.positives {
                if !(p.ratio > 0.0 && p.ratio <= 1.0) {
                    return Err(config_err(origin, "data.positives.ratio", "must lie in (0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Everything a run needs after loading data and resolving groups.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: TabularDataset,
    pub split: DomainSplit,
    pub assembler: Assembler,
    pub archs: Vec<GroupArch>,
    pub variant: Variant,
}

impl Prepared {
    pub fn spec(&self) -> &FeatureGroupSpec {
        &self.assembler.spec
    }
}

/// Load (or generate) the data and apply the split, positive subsampling and
/// standardisation. `base` resolves relative CSV paths.
pub fn load_data(cfg: &ExperimentConfig, base: &Path) -> Result<(TabularDataset, DomainSplit)> {
    let seed = cfg.run.seed;
    let (mut data, split) = match &cfg.data {
        DataConfig::Synthetic { synthetic } => data::synth_shift(synthetic, seed)?,
        DataConfig::Csv(c) => {
            let path = if c.path.is_absolute() { c.path.clone() } else { base.join(&c.path) };
            let d = data::load_csv(&path, &c.schema)?;
            let mut s = data::split_domains(&d, &c.split, seed)?;
            if let Some(p) = &c.positives {
                s = data::subsample_positives(&d, &s, p.n_pos, p.ratio, seed)?;
            }
            (d, s)
        }
    };
    Standardizer::fit(&data, &split.source)?.apply(&mut data);
    Ok((data, split))
}

/// Base groups named in the config, or the synthetic layout.
pub fn base_groups(cfg: &ExperimentConfig) -> Result<Vec<(String, Vec<String>)>> {
    if !cfg.groups.group.is_empty() {
        return Ok(cfg.groups.group.iter().map(|g| (g.name.clone(), g.columns.clone())).collect());
    }
    match &cfg.data {
        DataConfig::Synthetic { synthetic } => Ok(synthetic.group_columns()),
        DataConfig::Csv(_) => Err(Error::Config {
            path: String::new(),
            field: "groups.group".into(),
            message: "csv data needs explicit feature groups".into(),
        }),
    }
}

/// Feature groups and architectures for `variant`.
pub fn resolve_groups(cfg: &ExperimentConfig, schema: &Schema, variant: Variant) -> Result<(Assembler, Vec<GroupArch>)> {
    let spec = if variant.feature_groups() {
        build_spec_named(schema, &base_groups(cfg)?, variant.interactions())?
    } else {
        single_group_spec(schema)?
    };
    let asm = Assembler::new(spec, schema, &cfg.groups.embedding_dims)?;
    let archs = asm
        .spec
        .names()
        .iter()
        .zip(asm.input_dims())
        .map(|(name, d)| {
            let mut arch = GroupArch::default_for(d);
            if let Some(s) = cfg.architecture.extractors.get(name) {
                arch.extractor = parse_arch(s)?;
                let out = *arch.extractor.last().unwrap_or(&1);
                arch.discriminator = vec![out, 2 * out, 1];
            }
            if let Some(s) = cfg.architecture.discriminators.get(name) {
                arch.discriminator = parse_arch(s)?;
            }
            Ok(arch)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((asm, archs))
}

pub fn prepare(cfg: &ExperimentConfig, base: &Path, variant: Variant) -> Result<Prepared> {
    let (data, split) = load_data(cfg, base)?;
    let (assembler, archs) = resolve_groups(cfg, &data.schema, variant)?;
    Ok(Prepared { data, split, assembler, archs, variant })
}
