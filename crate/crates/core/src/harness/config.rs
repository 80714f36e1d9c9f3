//! Experiment configuration.
//!
//! The file format is line-oriented: `[section]` headers, `key = value`
//! pairs, blank lines and `#` comments. Unknown sections and keys are errors.
//! Relative paths resolve against the directory holding the file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::admm::AdmmConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nas::NasConfig;
use crate::quant::{BitWidth, Precision};
use crate::sensitivity::Probe;
use crate::train::SgdConfig;

use super::corpus::TokenMode;

#[derive(Debug, Default)]
struct Ini {
    sections: BTreeMap<String, BTreeMap<String, (usize, String)>>,
}

impl Ini {
    fn parse(text: &str) -> Result<Ini> {
        let mut ini = Ini::default();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim().to_owned();
                if ini.sections.contains_key(&name) {
                    return Err(Error::Config(format!("line {line_no}: section [{name}] repeated")));
                }
                ini.sections.insert(name.clone(), BTreeMap::new());
                current = Some(name);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`")))?;
            let section = current
                .as_ref()
                .ok_or_else(|| Error::Config(format!("line {line_no}: key outside a section")))?;
            let key = key.trim().to_owned();
            let entries = ini.sections.get_mut(section).expect("section inserted");
            if entries
                .insert(key.clone(), (line_no, value.trim().to_owned()))
                .is_some()
            {
                return Err(Error::Config(format!("line {line_no}: `{key}` repeated in [{section}]")));
            }
        }
        Ok(ini)
    }
}

/// Typed lookups that remember which keys were consumed.
struct Reader<'a> {
    ini: &'a Ini,
    used: BTreeSet<(String, String)>,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, section: &str, key: &str) -> Option<&'a (usize, String)> {
        let entry = self.ini.sections.get(section)?.get(key)?;
        self.used.insert((section.to_owned(), key.to_owned()));
        Some(entry)
    }

    fn get<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(default),
            Some((line, value)) => value
                .parse()
                .map_err(|e| Error::Config(format!("line {line}: [{section}] {key}: {e}"))),
        }
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(default),
            Some((line, value)) => value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|e| Error::Config(format!("line {line}: [{section}] {key}: {e}")))
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        for (section, entries) in &self.ini.sections {
            if !KNOWN_SECTIONS.contains(&section.as_str()) {
                return Err(Error::Config(format!("unknown section [{section}]")));
            }
            for (key, (line, _)) in entries {
                if !self.used.contains(&(section.clone(), key.clone())) {
                    return Err(Error::Config(format!("line {line}: unknown key `{key}` in [{section}]")));
                }
            }
        }
        Ok(())
    }
}

const KNOWN_SECTIONS: [&str; 8] = ["data", "model", "train", "admm", "quant", "sensitivity", "nas", "pipeline"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Baseline,
    Uniform,
    Manual,
    MinSen,
    Nas,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Baseline, Stage::Uniform, Stage::Manual, Stage::MinSen, Stage::Nas];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Uniform => "uniform",
            Stage::Manual => "manual",
            Stage::MinSen => "minsen",
            Stage::Nas => "nas",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// One entry of a manual bit map. `target` is a cluster id (`layer0.attn`),
/// a sub-layer kind applying to every layer (`attn`, `ffn`), or `embed`/`out`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitRule {
    pub target: String,
    pub precision: Precision,
}

impl FromStr for BitRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (target, bits) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bit rule `{s}` is not `cluster:bits`")))?;
        Ok(BitRule {
            target: target.trim().to_owned(),
            precision: bits.trim().parse()?,
        })
    }
}

impl BitRule {
    pub fn matches(&self, cluster: &str) -> bool {
        self.target == cluster || (cluster.contains('.') && cluster.rsplit('.').next() == Some(self.target.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub mode: TokenMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub tie_embeddings: bool,
}

impl ModelDims {
    pub fn with_vocab(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            max_len: self.max_len,
            tie_embeddings: self.tie_embeddings,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantSettings {
    pub candidates: Vec<BitWidth>,
    pub quantize_embeddings: bool,
    pub manual: Vec<BitRule>,
    /// Average-bit budget of the sensitivity allocation.
    pub budget: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivitySettings {
    pub samples: usize,
    pub probe: Probe,
    pub probe_tokens: usize,
    pub average_trace: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub stages: Vec<Stage>,
    pub out_dir: PathBuf,
    pub label: String,
    /// Report evaluation seconds; off renders `-` so dumps are reproducible.
    pub timings: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelDims,
    pub train: SgdConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub admm: AdmmConfig,
    pub quant: QuantSettings,
    pub sensitivity: SensitivitySettings,
    pub nas: NasConfig,
    /// Bit-width of the supernet's shared embeddings and output projection
    /// when embeddings are quantized.
    pub nas_shared_bits: BitWidth,
    pub pipeline: PipelineSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let desk = ModelConfig::desk(0);
        ExperimentConfig {
            data: DataConfig {
                train: PathBuf::from("data/desk/train.txt"),
                valid: PathBuf::from("data/desk/valid.txt"),
                test: PathBuf::from("data/desk/test.txt"),
                mode: TokenMode::Char,
            },
            model: ModelDims {
                n_layers: desk.n_layers,
                d_model: desk.d_model,
                d_ff: desk.d_ff,
                n_heads: desk.n_heads,
                max_len: desk.max_len,
                tie_embeddings: desk.tie_embeddings,
            },
            train: SgdConfig::default(),
            batch_size: 16,
            seed: 0,
            admm: AdmmConfig::default(),
            quant: QuantSettings {
                candidates: BitWidth::CANDIDATES.to_vec(),
                quantize_embeddings: true,
                manual: ["embed:4", "out:4", "attn:2", "ffn:1"]
                    .iter()
                    .map(|r| r.parse().expect("default rule"))
                    .collect(),
                budget: 2.0,
            },
            sensitivity: SensitivitySettings {
                samples: 16,
                probe: Probe::Gaussian,
                probe_tokens: 1024,
                average_trace: true,
            },
            nas: NasConfig::default(),
            nas_shared_bits: BitWidth::EIGHT,
            pipeline: PipelineSettings {
                stages: Stage::ALL.to_vec(),
                out_dir: PathBuf::from("runs/desk"),
                label: "transformer".to_owned(),
                timings: true,
            },
        }
    }
}

fn parse_probe(s: &str) -> Result<Probe> {
    match s {
        "gaussian" => Ok(Probe::Gaussian),
        "rademacher" => Ok(Probe::Rademacher),
        other => Err(Error::Config(format!("unknown probe `{other}`"))),
    }
}

fn parse_clip(s: &str) -> Result<Option<f64>> {
    if s == "none" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|e| Error::Config(format!("clip `{s}`: {e}")))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::parse(text)?;
        let mut r = Reader {
            ini: &ini,
            used: BTreeSet::new(),
        };
        let d = ExperimentConfig::default();
        let path = |r: &mut Reader, key: &str, default: &Path| -> Result<PathBuf> {
            let p: PathBuf = r.get("data", key, default.to_path_buf())?;
            Ok(base.join(p))
        };
        let data = DataConfig {
            train: path(&mut r, "train", &d.data.train)?,
            valid: path(&mut r, "valid", &d.data.valid)?,
            test: path(&mut r, "test", &d.data.test)?,
            mode: r.get("data", "mode", d.data.mode)?,
        };
        let model = ModelDims {
            n_layers: r.get("model", "layers", d.model.n_layers)?,
            d_model: r.get("model", "d_model", d.model.d_model)?,
            d_ff: r.get("model", "d_ff", d.model.d_ff)?,
            n_heads: r.get("model", "heads", d.model.n_heads)?,
            max_len: r.get("model", "max_len", d.model.max_len)?,
            tie_embeddings: r.get("model", "tie_embeddings", d.model.tie_embeddings)?,
        };
        let clip = |r: &mut Reader, section: &str, default: Option<f64>| -> Result<Option<f64>> {
            let raw: String = r.get(section, "clip", default.map_or("none".into(), |c| c.to_string()))?;
            parse_clip(&raw)
        };
        let train = SgdConfig {
            lr: r.get("train", "lr", d.train.lr)?,
            clip: clip(&mut r, "train", d.train.clip)?,
            epochs: r.get("train", "epochs", d.train.epochs)?,
            steps_per_epoch: r.get("train", "steps_per_epoch", d.train.steps_per_epoch)?,
        };
        let batch_size = r.get("train", "batch", d.batch_size)?;
        let seed = r.get("train", "seed", d.seed)?;
        let admm = AdmmConfig {
            sgd: SgdConfig {
                lr: r.get("admm", "lr", d.admm.sgd.lr)?,
                clip: clip(&mut r, "admm", d.admm.sgd.clip)?,
                epochs: r.get("admm", "epochs", d.admm.sgd.epochs)?,
                steps_per_epoch: r.get("admm", "steps_per_epoch", d.admm.sgd.steps_per_epoch)?,
            },
            rho: r.get("admm", "rho", d.admm.rho)?,
            rho_growth: r.get("admm", "rho_growth", d.admm.rho_growth)?,
            tolerance: r.get("admm", "tolerance", d.admm.tolerance)?,
            project_every: r.get("admm", "project_every", d.admm.project_every)?,
        };
        let quant = QuantSettings {
            candidates: r.list("quant", "candidates", d.quant.candidates.clone())?,
            quantize_embeddings: r.get("quant", "quantize_embeddings", d.quant.quantize_embeddings)?,
            manual: r.list("quant", "manual", d.quant.manual.clone())?,
            budget: r.get("quant", "budget", d.quant.budget)?,
        };
        let probe_name: String = r.get("sensitivity", "probe", "gaussian".to_owned())?;
        let sensitivity = SensitivitySettings {
            samples: r.get("sensitivity", "samples", d.sensitivity.samples)?,
            probe: parse_probe(&probe_name)?,
            probe_tokens: r.get("sensitivity", "probe_tokens", d.sensitivity.probe_tokens)?,
            average_trace: r.get("sensitivity", "average_trace", d.sensitivity.average_trace)?,
        };
        let nas = NasConfig {
            epochs: r.get("nas", "epochs", d.nas.epochs)?,
            steps_per_epoch: r.get("nas", "steps_per_epoch", d.nas.steps_per_epoch)?,
            batch_size: r.get("nas", "batch", d.nas.batch_size)?,
            lr_weights: r.get("nas", "lr_weights", d.nas.lr_weights)?,
            lr_arch: r.get("nas", "lr_arch", d.nas.lr_arch)?,
            beta: r.get("nas", "beta", d.nas.beta)?,
            clip: clip(&mut r, "nas", d.nas.clip)?,
            freeze_weights: r.get("nas", "freeze_weights", d.nas.freeze_weights)?,
            seed: d.nas.seed,
        };
        let nas_shared_bits = r.get("nas", "shared_bits", d.nas_shared_bits)?;
        let out_dir: PathBuf = r.get("pipeline", "out_dir", d.pipeline.out_dir.clone())?;
        let pipeline = PipelineSettings {
            stages: r.list("pipeline", "stages", d.pipeline.stages.clone())?,
            out_dir: base.join(out_dir),
            label: r.get("pipeline", "label", d.pipeline.label.clone())?,
            timings: r.get("pipeline", "timings", d.pipeline.timings)?,
        };
        r.finish()?;
        let config = ExperimentConfig {
            data,
            model,
            train,
            batch_size,
            seed,
            admm,
            quant,
            sensitivity,
            nas,
            nas_shared_bits,
            pipeline,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.layers", self.model.n_layers),
            ("model.d_model", self.model.d_model),
            ("model.d_ff", self.model.d_ff),
            ("model.heads", self.model.n_heads),
            ("model.max_len", self.model.max_len),
            ("train.epochs", self.train.epochs),
            ("train.steps_per_epoch", self.train.steps_per_epoch),
            ("train.batch", self.batch_size),
            ("admm.epochs", self.admm.sgd.epochs),
            ("admm.steps_per_epoch", self.admm.sgd.steps_per_epoch),
            ("sensitivity.samples", self.sensitivity.samples),
            ("sensitivity.probe_tokens", self.sensitivity.probe_tokens),
            ("nas.batch", self.nas.batch_size),
            ("nas.steps_per_epoch", self.nas.steps_per_epoch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.model.d_model % self.model.n_heads != 0 {
            return Err(Error::Config("model.d_model must be divisible by model.heads".into()));
        }
        let rates = [
            ("train.lr", f64::from(self.train.lr)),
            ("admm.lr", f64::from(self.admm.sgd.lr)),
            ("admm.rho", self.admm.rho),
            ("admm.rho_growth", self.admm.rho_growth),
            ("admm.tolerance", self.admm.tolerance),
            ("quant.budget", self.quant.budget),
            ("nas.lr_weights", f64::from(self.nas.lr_weights)),
            ("nas.lr_arch", f64::from(self.nas.lr_arch)),
        ];
        if let Some((name, _)) = rates.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.nas.beta >= 0.0 && self.nas.beta.is_finite()) {
            return Err(Error::Config("nas.beta must be non-negative".into()));
        }
        if self.quant.candidates.is_empty() {
            return Err(Error::Config("quant.candidates is empty".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Seed of a named sub-task, derived from the experiment seed.
    pub fn stage_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(offset)
    }
}
