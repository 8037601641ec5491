//! `prada` command-line tool.

mod run_dir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use prada::config::{prepare, CsvData, DataConfig, ExperimentConfig, GroupConfig, Prepared, Setting, Variant};
use prada::data::{synth_shift, SplitConfig};
use prada::oracle::{oracle_evaluate, oracle_train, tolerance, Evaluation};
use prada::phe::{keygen, KeyFile, Keypair};
use prada::pipeline::{IterRecord, Phase};
use prada::protocol::{self, verify_protocol, Parties, Scheduler, Transcript};
use prada::rng::{stream, Stream};
use prada::{Error, Result};
use serde_json::json;

use run_dir::{read_json, write_json, RunDir};

#[derive(Parser, Debug)]
#[command(name = "prada", version, about = "Federated domain adaptation over feature groups with a masked split logistic regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchedulerArg {
    Sequential,
    Threaded,
}

impl From<SchedulerArg> for Scheduler {
    fn from(s: SchedulerArg) -> Self {
        match s {
            SchedulerArg::Sequential => Scheduler::Sequential,
            SchedulerArg::Threaded => Scheduler::Threaded,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Test,
    Labeled,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum PathArg {
    Oracle,
    Secure,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a Paillier key pair for party C.
    Keygen {
        #[arg(long, default_value_t = 2048)]
        bits: u32,
        /// Private key file; the public half goes next to it as `<stem>.pub.json`.
        #[arg(long)]
        out: PathBuf,
        /// Seed for reproducible keys; OS entropy when omitted.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 40)]
        frac_bits: u32,
    },
    /// Write the synthetic dataset of a config as CSV plus a matching CSV config.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Federated pre-training between B and C.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Key file from `keygen`; derived from the run seed when omitted.
        #[arg(long)]
        keys: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "sequential")]
        scheduler: SchedulerArg,
        /// Also write `transcript.jsonl`.
        #[arg(long)]
        transcript: bool,
    },
    /// Federated fine-tuning between A and C from a pre-training run.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Run directory written by `pretrain`.
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "sequential")]
        scheduler: SchedulerArg,
        #[arg(long)]
        transcript: bool,
    },
    /// Masked inference with a fine-tuned model, scored by A.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Run directory written by `finetune`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Write metrics and predictions here as well.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sequential")]
        scheduler: SchedulerArg,
    },
    /// Run the secure protocol and the plaintext oracle side by side.
    VerifyProtocol {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, value_enum, default_value = "sequential")]
        scheduler: SchedulerArg,
        /// Write the divergence report and transcript into a run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score several variants in the configured setting.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "prada,no_ir,no_fg_ir,no_da_fg_ir")]
        variants: Vec<String>,
        /// Seeds to average over; the config seed when omitted.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Override the configured setting.
        #[arg(long)]
        setting: Option<String>,
        /// `secure` runs the encrypted protocol (a_vfl and b_to_a only).
        #[arg(long, value_enum, default_value = "oracle")]
        path: PathArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric_or_protocol() { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Keygen { bits, out, seed, frac_bits } => cmd_keygen(bits, &out, seed, frac_bits),
        Command::SynthData { config, seed, out } => cmd_synth(&config, seed, &out),
        Command::Pretrain { config, keys, out, scheduler, transcript } => {
            cmd_pretrain(&config, keys.as_deref(), &out, scheduler.into(), transcript)
        }
        Command::Finetune { config, pretrained, out, scheduler, transcript } => {
            cmd_finetune(&config, &pretrained, &out, scheduler.into(), transcript)
        }
        Command::Evaluate { config, model, split, out, scheduler } => {
            cmd_evaluate(&config, &model, split, out.as_deref(), scheduler.into())
        }
        Command::VerifyProtocol { config, iters, scheduler, out } => cmd_verify(&config, iters, scheduler.into(), out.as_deref()),
        Command::Ablate { config, variants, seeds, setting, path, out } => {
            cmd_ablate(&config, &variants, &seeds, setting.as_deref(), path, out.as_deref())
        }
    }
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_prepared(config: &Path) -> Result<(ExperimentConfig, Prepared)> {
    let cfg = ExperimentConfig::load(config)?;
    let prep = prepare(&cfg, &base_dir(config), cfg.ablation.variant).map_err(|e| in_config(config, e))?;
    Ok((cfg, prep))
}

/// Attach the config path to data and argument errors.
fn in_config(config: &Path, e: Error) -> Error {
    let path = config.display().to_string();
    match e {
        Error::Data(m) => Error::Config { path, field: "data".into(), message: m },
        Error::Invalid(m) => Error::Config { path, field: "groups".into(), message: m },
        Error::Config { path: p, field, message } if p.is_empty() => Error::Config { path, field, message },
        other => other,
    }
}

fn read_keys(path: &Path) -> Result<Keypair> {
    let file: KeyFile = read_json(path)?;
    Ok(Keypair::from_file(&file)?)
}

fn pub_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("keys");
    out.with_file_name(format!("{stem}.pub.json"))
}

fn cmd_keygen(bits: u32, out: &Path, seed: Option<u64>, frac_bits: u32) -> Result<ExitCode> {
    let kp = match seed {
        Some(s) => keygen(bits, &mut stream(s, Stream::Keygen))?,
        None => keygen(bits, &mut rand::rng())?,
    }
    .with_frac_bits(frac_bits);
    let file = kp.to_file();
    write_json(out, &file)?;
    write_json(&pub_path(out), &file.public_only())?;
    println!("wrote {} ({} bits, key id {:016x})", out.display(), bits, kp.public.fingerprint());
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(config: &Path, seed: Option<u64>, out: &Path) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(config)?;
    let DataConfig::Synthetic { synthetic } = &cfg.data else {
        return Err(Error::Config {
            path: config.display().to_string(),
            field: "data.kind".into(),
            message: "synth-data needs a synthetic data section".into(),
        });
    };
    let seed = seed.unwrap_or(cfg.run.seed);
    let (data, split) = synth_shift(synthetic, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    data.write_csv(&out.join("data.csv"))?;
    write_json(&out.join("split.json"), &split)?;
    let mut csv_cfg = cfg.clone();
    csv_cfg.run.seed = seed;
    csv_cfg.data = DataConfig::Csv(CsvData {
        path: "data.csv".into(),
        schema: data.schema.clone(),
        split: SplitConfig {
            column: "domain".into(),
            source_values: vec!["source".into()],
            target_values: vec!["target".into()],
            n_source: Some(split.source.len()),
            n_target_labeled: split.target_labeled.len(),
            n_target_unlabeled: split.target_unlabeled.len(),
            n_target_test: split.target_test.len(),
            min_source_ratio: 1.0,
        },
        positives: None,
    });
    if csv_cfg.groups.group.is_empty() {
        csv_cfg.groups.group =
            synthetic.group_columns().into_iter().map(|(name, columns)| GroupConfig { name, columns }).collect();
    }
    let path = out.join("config.toml");
    std::fs::write(&path, csv_cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    println!(
        "wrote {} rows ({} source, {} target) to {}",
        data.len(),
        split.source.len(),
        split.target_all().len() + split.target_test.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn setup_parties(cfg: &ExperimentConfig, prep: &Prepared, keys: Option<Keypair>) -> Result<Parties> {
    match keys {
        Some(kp) => Parties::with_keys(&cfg.run, prep, kp.with_frac_bits(cfg.run.frac_bits)),
        None => Parties::setup(&cfg.run, prep),
    }
}

fn finish_transcript(dir: &RunDir, transcript: &Transcript, write: bool) -> Result<()> {
    if write {
        transcript.write_jsonl(&dir.path("transcript.jsonl"))?;
    }
    Ok(())
}

fn cmd_pretrain(config: &Path, keys: Option<&Path>, out: &Path, scheduler: Scheduler, write_transcript: bool) -> Result<ExitCode> {
    let (cfg, prep) = load_prepared(config)?;
    let keys = keys.map(read_keys).transpose()?;
    let mut parties = setup_parties(&cfg, &prep, keys)?;
    let dir = RunDir::create(out, "pretrain", config, &cfg, scheduler, Some(parties.c.public_key()))?;
    let mut transcript = Transcript::new(false);
    let pool = prep.variant.domain_adaptation().then(|| prep.split.target_all());
    let Parties { c, b, .. } = &mut parties;
    let history = protocol::pretrain(&cfg.run, c, b, &prep.split.source, pool, scheduler, &mut transcript)?;
    dir.save_passive(c)?;
    dir.save_lr("b", b.lr.as_ref())?;
    dir.write_history(&history)?;
    finish_transcript(&dir, &transcript, write_transcript)?;
    let summary = history_summary(&history, Phase::Pretrain);
    write_json(&dir.path("metrics.json"), &summary)?;
    print_summary("pretrain", &summary);
    Ok(ExitCode::SUCCESS)
}

fn cmd_finetune(config: &Path, pretrained: &Path, out: &Path, scheduler: Scheduler, write_transcript: bool) -> Result<ExitCode> {
    let (cfg, prep) = load_prepared(config)?;
    let from = RunDir::open(pretrained)?;
    let mut parties = setup_parties(&cfg, &prep, Some(from.load_keys()?))?;
    parties.c.model = from.load_model()?;
    if parties.c.model.g() != prep.assembler.g() {
        return Err(Error::Config {
            path: config.display().to_string(),
            field: "ablation.variant".into(),
            message: format!("pre-trained model has {} groups, config resolves {}", parties.c.model.g(), prep.assembler.g()),
        });
    }
    let dir = RunDir::create(out, "finetune", config, &cfg, scheduler, Some(parties.c.public_key()))?;
    let mut transcript = Transcript::new(false);
    let Parties { c, a, .. } = &mut parties;
    let history = protocol::finetune(&cfg.run, c, a, &prep.split.target_labeled, scheduler, &mut transcript)?;
    dir.save_passive(c)?;
    dir.save_lr("a", a.lr.as_ref())?;
    dir.write_history(&history)?;
    finish_transcript(&dir, &transcript, write_transcript)?;
    let summary = history_summary(&history, Phase::Finetune);
    write_json(&dir.path("metrics.json"), &summary)?;
    print_summary("finetune", &summary);
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(config: &Path, model: &Path, split: SplitArg, out: Option<&Path>, scheduler: Scheduler) -> Result<ExitCode> {
    let (cfg, prep) = load_prepared(config)?;
    let from = RunDir::open(model)?;
    let mut parties = setup_parties(&cfg, &prep, Some(from.load_keys()?))?;
    parties.c.model = from.load_model()?;
    parties.c.noise = Some(from.load_noise()?);
    parties.a.lr = Some(from.load_lr("a")?);
    let ids = match split {
        SplitArg::Test => &prep.split.target_test,
        SplitArg::Labeled => &prep.split.target_labeled,
    };
    let mut transcript = Transcript::new(false);
    let Parties { c, a, .. } = &mut parties;
    let e = protocol::evaluate(&cfg.run, c, a, ids, scheduler, &mut transcript)?;
    let name = format!("{split:?}").to_lowercase();
    let summary = json!({ "split": name, "rows": ids.len(), "auc": e.auc, "ks": e.ks });
    if let Some(out) = out {
        let dir = RunDir::create(out, "evaluate", config, &cfg, scheduler, Some(c.public_key()))?;
        write_json(&dir.path("metrics.json"), &summary)?;
        dir.write_predictions(ids, &e)?;
    }
    println!("{summary}");
    print_summary("evaluate", &summary);
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(config: &Path, iters: usize, scheduler: Scheduler, out: Option<&Path>) -> Result<ExitCode> {
    let (cfg, prep) = load_prepared(config)?;
    let parties = Parties::setup(&cfg.run, &prep)?;
    let keep = out.is_some();
    let dir = out.map(|o| RunDir::create(o, "verify-protocol", config, &cfg, scheduler, Some(parties.c.public_key()))).transpose()?;
    let v = verify_protocol(&cfg.run, &prep, parties, iters, scheduler, keep)?;
    let r = &v.report;
    let summary = json!({
        "iterations": v.iterations,
        "epochs_pretrain": v.epochs_pretrain,
        "max_weight_divergence": r.max_weight(),
        "max_logit_divergence": r.max_logit(),
        "tolerance_at_end": tolerance(v.iterations, cfg.run.frac_bits),
        "first_failure": r.first_failure,
        "passed": r.passed(),
    });
    if let Some(dir) = &dir {
        write_json(&dir.path("metrics.json"), &summary)?;
        write_json(&dir.path("divergence.json"), r)?;
        dir.write_history(&v.secure.history[..v.iterations.min(v.secure.history.len())])?;
        v.secure.transcript.write_jsonl(&dir.path("transcript.jsonl"))?;
    }
    println!("{summary}");
    print_summary("verify-protocol", &summary);
    if r.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: divergence exceeds the tolerance at iteration {}", r.first_failure.unwrap_or(0));
        Ok(ExitCode::from(2))
    }
}

fn secure_setting(cfg: &ExperimentConfig, prep: &Prepared, setting: Setting) -> Result<Evaluation> {
    let mut parties = Parties::setup(&cfg.run, prep)?;
    let mut t = Transcript::new(false);
    let Parties { c, a, b } = &mut parties;
    match setting {
        Setting::BToA => {
            let pool = prep.variant.domain_adaptation().then(|| prep.split.target_all());
            protocol::pretrain(&cfg.run, c, b, &prep.split.source, pool, Scheduler::Sequential, &mut t)?;
        }
        Setting::AVfl => {}
        other => return Err(Error::Invalid(format!("setting {} has no secure path", other.name()))),
    }
    protocol::finetune(&cfg.run, c, a, &prep.split.target_labeled, Scheduler::Sequential, &mut t)?;
    protocol::evaluate(&cfg.run, c, a, &prep.split.target_test, Scheduler::Sequential, &mut t)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

fn cmd_ablate(
    config: &Path,
    variants: &[String],
    seeds: &[u64],
    setting: Option<&str>,
    path: PathArg,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let base = ExperimentConfig::load(config)?;
    let variants = variants.iter().map(|v| Variant::parse(v.trim())).collect::<Result<Vec<_>>>()?;
    let setting = setting.map(Setting::parse).transpose()?.unwrap_or(base.ablation.setting);
    let seeds = if seeds.is_empty() { vec![base.run.seed] } else { seeds.to_vec() };
    let dir = out.map(|o| RunDir::create(o, "ablate", config, &base, Scheduler::Sequential, None)).transpose()?;
    let mut lines = Vec::new();
    let mut rows = Vec::new();
    for v in &variants {
        let (mut aucs, mut kss) = (Vec::new(), Vec::new());
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.run.seed = seed;
            cfg.ablation.variant = *v;
            cfg.ablation.setting = setting;
            let prep = prepare(&cfg, &base_dir(config), *v).map_err(|e| in_config(config, e))?;
            let e = match path {
                PathArg::Oracle => {
                    let m = oracle_train(&cfg.run, &prep, setting, false)?;
                    oracle_evaluate(&m, &prep.data, &prep.split.target_test, &cfg.run)?
                }
                PathArg::Secure => secure_setting(&cfg, &prep, setting)?,
            };
            let line = json!({
                "variant": v.name(), "setting": setting.name(), "seed": seed, "g": prep.assembler.g(),
                "auc": e.auc, "ks": e.ks,
            });
            println!("{line}");
            lines.push(line);
            aucs.push(e.auc);
            kss.push(e.ks);
        }
        rows.push((v.name(), mean_std(&aucs), mean_std(&kss)));
    }
    println!("{:<14} {:<8} {:>16} {:>16}", "variant", "setting", "AUC", "KS");
    for (name, (am, asd), (km, ksd)) in &rows {
        println!(
            "{:<14} {:<8} {:>16} {:>16}",
            name,
            setting.name(),
            format!("{:.2}±{:.2}", 100.0 * am, 100.0 * asd),
            format!("{:.2}±{:.2}", 100.0 * km, 100.0 * ksd)
        );
    }
    if let Some(dir) = &dir {
        dir.write_lines("metrics.jsonl", &lines)?;
        let summary: Vec<_> = rows
            .iter()
            .map(|(n, (am, asd), (km, ksd))| json!({"variant": n, "auc_mean": am, "auc_std": asd, "ks_mean": km, "ks_std": ksd}))
            .collect();
        write_json(&dir.path("metrics.json"), &json!({ "setting": setting.name(), "seeds": seeds, "variants": summary }))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn history_summary(history: &[IterRecord], phase: Phase) -> serde_json::Value {
    let losses = prada::pipeline::epoch_losses(history, phase);
    json!({
        "iterations": history.len(),
        "epochs": losses.len(),
        "epoch_loss": losses,
        "final_loss": history.last().map(|r| r.loss),
        "final_adv_loss": history.iter().rev().find_map(|r| r.adv_loss),
    })
}

fn print_summary(title: &str, v: &serde_json::Value) {
    println!("{title}");
    if let Some(map) = v.as_object() {
        for (k, val) in map {
            if !val.is_array() {
                println!("  {k:<24} {val}");
            }
        }
    }
}
