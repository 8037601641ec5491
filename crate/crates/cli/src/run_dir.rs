//! Run directory layout: `manifest.json`, `config.toml`, `history.jsonl`,
//! `history.csv`, `metrics.json`, optional `transcript.jsonl`, and one
//! `model/<party>/` folder per party.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use prada::adversarial::PassiveModel;
use prada::config::ExperimentConfig;
use prada::oracle::Evaluation;
use prada::phe::{KeyFile, Keypair, PublicKey};
use prada::pipeline::IterRecord;
use prada::protocol::{PassiveParty, Scheduler};
use prada::secure_lr::{NoiseState, SplitLrState};
use prada::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create the directory and write the manifest plus a copy of the config.
    pub fn create(
        root: &Path,
        command: &str,
        config: &Path,
        cfg: &ExperimentConfig,
        scheduler: Scheduler,
        key: Option<&PublicKey>,
    ) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let text = std::fs::read(config).map_err(|e| Error::io(config, e))?;
        let copy = root.join("config.toml");
        std::fs::write(&copy, &text).map_err(|e| Error::io(&copy, e))?;
        let manifest = json!({
            "tool": "prada",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "args": std::env::args().skip(1).collect::<Vec<_>>(),
            "config": config.display().to_string(),
            "config_sha256": hex::encode(Sha256::digest(&text)),
            "seed": cfg.run.seed,
            "variant": cfg.ablation.variant.name(),
            "setting": cfg.ablation.setting.name(),
            "exec": cfg.run.exec,
            "scheduler": scheduler,
            "key_bits": key.map(PublicKey::key_bits),
            "key_id": key.map(|k| format!("{:016x}", k.fingerprint())),
        });
        write_json(&root.join("manifest.json"), &manifest)?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.join("manifest.json").is_file() {
            return Err(Error::Invalid(format!("{} is not a run directory (no manifest.json)", root.display())));
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn party_dir(&self, party: &str) -> Result<PathBuf> {
        let d = self.root.join("model").join(party);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    /// C's networks, private key and noise accumulator.
    pub fn save_passive(&self, c: &PassiveParty) -> Result<()> {
        let d = self.party_dir("c")?;
        write_json(&d.join("passive.json"), &c.model)?;
        write_json(&d.join("keys.json"), &c.keypair().to_file())?;
        if let Some(n) = &c.noise {
            write_json(&d.join("noise.json"), n)?;
        }
        Ok(())
    }

    pub fn save_lr(&self, party: &str, lr: Option<&SplitLrState>) -> Result<()> {
        let lr = lr.ok_or_else(|| Error::Protocol(format!("party {party} finished without a model")))?;
        write_json(&self.party_dir(party)?.join("lr.json"), lr)
    }

    pub fn load_keys(&self) -> Result<Keypair> {
        let file: KeyFile = read_json(&self.path("model/c/keys.json"))?;
        Ok(Keypair::from_file(&file)?)
    }

    pub fn load_model(&self) -> Result<PassiveModel> {
        read_json(&self.path("model/c/passive.json"))
    }

    pub fn load_noise(&self) -> Result<NoiseState> {
        read_json(&self.path("model/c/noise.json"))
    }

    pub fn load_lr(&self, party: &str) -> Result<SplitLrState> {
        read_json(&self.path(&format!("model/{party}/lr.json")))
    }

    pub fn write_lines(&self, name: &str, lines: &[serde_json::Value]) -> Result<()> {
        let mut out = String::new();
        for l in lines {
            out.push_str(&serde_json::to_string(l)?);
            out.push('\n');
        }
        let p = self.path(name);
        std::fs::write(&p, out).map_err(|e| Error::io(&p, e))
    }

    /// `history.jsonl` and the plot-ready `history.csv`.
    pub fn write_history(&self, history: &[IterRecord]) -> Result<()> {
        let lines = history.iter().map(serde_json::to_value).collect::<std::result::Result<Vec<_>, _>>()?;
        self.write_lines("history.jsonl", &lines)?;
        let mut csv = String::from("phase,epoch,iteration,loss,adv_loss,val_loss,disc_accuracy_mean\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in history {
            let acc = (!r.disc_accuracy.is_empty())
                .then(|| r.disc_accuracy.iter().sum::<f64>() / r.disc_accuracy.len() as f64);
            let _ = writeln!(
                csv,
                "{:?},{},{},{},{},{},{}",
                r.phase,
                r.epoch,
                r.iteration,
                r.loss,
                opt(r.adv_loss),
                opt(r.val_loss),
                opt(acc)
            );
        }
        let p = self.path("history.csv");
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))
    }

    pub fn write_predictions(&self, ids: &[usize], e: &Evaluation) -> Result<()> {
        let mut csv = String::from("row,probability\n");
        for (i, p) in ids.iter().zip(&e.predictions) {
            let _ = writeln!(csv, "{i},{p}");
        }
        let p = self.path("predictions.csv");
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))
    }
}
