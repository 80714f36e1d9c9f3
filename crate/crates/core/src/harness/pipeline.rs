//! Stage drivers and the end-to-end pipeline.
//!
//! Every stage writes its checkpoint and log into the output directory
//! before the next stage starts. Stages that need earlier results load them
//! from there, so a run can resume with a subset of stages.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{BitRule, ExperimentConfig, Stage};
use super::corpus::{ingest_corpus, Corpus};
use super::report::{format_table, write_dump, PrecisionKind, QuantMethod, ReportRow};
use crate::admm::{train_lm, AdmmResult};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{perplexity, ModelConfig, TransformerLm};
use crate::nas::{build_supernet, extract_1best, nas_assignment, search, SelectionWeights};
use crate::quant::{model_clusters, size_mb, model_size_mb, BitWidth, ClusterSpec, Precision, QuantizedModel};
use crate::sensitivity::{allocate_bits, AssignedCluster, analyze, probe_windows, PrecisionAssignment, SensitivityConfig, SensitivityReport};
use crate::train::{train_model, TrainLog};

const SEED_INIT: u64 = 1;
const SEED_TRAIN: u64 = 2;
pub const SEED_UNIFORM: u64 = 10;
pub const SEED_MANUAL: u64 = 20;
const SEED_SENSITIVITY: u64 = 30;
pub const SEED_MINSEN: u64 = 31;
const SEED_SEARCH: u64 = 40;
pub const SEED_NAS: u64 = 41;

pub fn load_corpus(config: &ExperimentConfig) -> Result<Corpus> {
    let d = &config.data;
    ingest_corpus(&d.train, &d.valid, &d.test, d.mode)
}

pub fn model_config(config: &ExperimentConfig, corpus: &Corpus) -> ModelConfig {
    config.model.with_vocab(corpus.vocab_size())
}

pub fn clusters(config: &ExperimentConfig, model: &ModelConfig) -> Vec<ClusterSpec> {
    model_clusters(model, config.quant.quantize_embeddings)
}

/// Initializes and trains the full-precision model.
pub fn train_baseline(config: &ExperimentConfig, corpus: &Corpus) -> Result<(TransformerLm, TrainLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.stage_seed(SEED_INIT));
    let mut model = TransformerLm::init(model_config(config, corpus), &mut rng)?;
    let log = train_model(
        &mut model,
        &corpus.train,
        &config.train,
        config.batch_size,
        config.stage_seed(SEED_TRAIN),
    )?;
    Ok((model, log))
}

pub fn uniform_assignment(clusters: &[ClusterSpec], bits: BitWidth) -> Vec<(ClusterSpec, Precision)> {
    clusters
        .iter()
        .map(|c| (c.clone(), Precision::Quantized(bits)))
        .collect()
}

/// Applies bit rules in order, later rules overriding earlier ones. Clusters
/// no rule mentions stay in full precision.
pub fn manual_assignment(clusters: &[ClusterSpec], rules: &[BitRule]) -> Vec<(ClusterSpec, Precision)> {
    clusters
        .iter()
        .map(|c| {
            let precision = rules
                .iter()
                .rev()
                .find(|r| r.matches(&c.id))
                .map_or(Precision::Full, |r| r.precision);
            (c.clone(), precision)
        })
        .collect()
}

pub fn assignment_from(clusters: &[ClusterSpec], chosen: &PrecisionAssignment) -> Vec<(ClusterSpec, Precision)> {
    clusters
        .iter()
        .map(|c| {
            let precision = chosen.bits_of(&c.id).map_or(Precision::Full, Precision::Quantized);
            (c.clone(), precision)
        })
        .collect()
}

pub fn run_admm(
    config: &ExperimentConfig,
    base: &TransformerLm,
    stream: &[usize],
    assignment: &[(ClusterSpec, Precision)],
    seed_offset: u64,
) -> Result<AdmmResult> {
    let result = train_lm(
        base,
        stream,
        assignment,
        &config.admm,
        config.batch_size,
        config.stage_seed(seed_offset),
    )?;
    if !result.converged {
        log::warn!("ADMM stopped before reaching the residual tolerance; keeping the best round");
    }
    Ok(result)
}

pub fn run_sensitivity(
    config: &ExperimentConfig,
    base: &TransformerLm,
    corpus: &Corpus,
) -> Result<SensitivityReport> {
    let windows = probe_windows(&corpus.train, base.config.max_len, config.sensitivity.probe_tokens);
    let specs = clusters(config, &base.config);
    let s = &config.sensitivity;
    analyze(
        base,
        windows,
        &specs,
        &SensitivityConfig {
            samples: s.samples,
            probe: s.probe,
            seed: config.stage_seed(SEED_SENSITIVITY),
            average_trace: s.average_trace,
            candidates: config.quant.candidates.clone(),
        },
    )
}

/// Builds the supernet from the uniform models, searches on the two halves
/// of the training split and extracts the 1-best precision per sub-layer.
pub fn run_search(
    config: &ExperimentConfig,
    uniform: &[(BitWidth, TransformerLm)],
    corpus: &Corpus,
) -> Result<(SelectionWeights, TrainLog, PrecisionAssignment)> {
    let shared = uniform
        .iter()
        .find(|(b, _)| *b == config.nas_shared_bits)
        .map(|(_, m)| m)
        .ok_or_else(|| {
            Error::MissingDependency(format!("no {}-bit uniform model for the shared components", config.nas_shared_bits))
        })?;
    let model_config = shared.config;
    let embed_bits = config.quant.quantize_embeddings.then_some(config.nas_shared_bits);
    let out_bits = (!model_config.tie_embeddings).then_some(config.nas_shared_bits);
    let candidates: Vec<(BitWidth, &TransformerLm)> = uniform.iter().map(|(b, m)| (*b, m)).collect();
    let mut net = build_supernet(&candidates, shared, embed_bits, out_bits)?;
    let half = corpus.train.len() / 2;
    let (weight_half, arch_half) = corpus.train.split_at(half);
    let mut nas = config.nas.clone();
    nas.seed = config.stage_seed(SEED_SEARCH);
    let (selection, log) = search(&mut net, weight_half, arch_half, &nas)?;
    let chosen = nas_precisions(config, &model_config, &selection)?;
    Ok((selection, log, chosen))
}

/// The 1-best assignment of a selection, with the embedding and output
/// clusters at the shared width.
pub fn nas_precisions(
    config: &ExperimentConfig,
    model: &ModelConfig,
    selection: &SelectionWeights,
) -> Result<PrecisionAssignment> {
    let embed_bits = config.quant.quantize_embeddings.then_some(config.nas_shared_bits);
    let out_bits = (!model.tie_embeddings).then_some(config.nas_shared_bits);
    let choice = extract_1best(selection);
    let specs = clusters(config, model);
    let assigned = nas_assignment(&choice, &specs, embed_bits, out_bits)?;
    PrecisionAssignment::new(
        assigned
            .iter()
            .filter_map(|(spec, p)| match p {
                Precision::Quantized(b) => Some(AssignedCluster {
                    cluster: spec.id.clone(),
                    params: spec.count,
                    bits: b.bits(),
                }),
                Precision::Full => None,
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub ppl: f64,
    pub seconds: f64,
}

/// Perplexity of a checkpoint on `stream`, timing only the evaluation loop.
pub fn evaluate(checkpoint: Checkpoint, stream: &[usize]) -> Result<Evaluation> {
    let model = checkpoint.into_model()?;
    if stream.iter().any(|&t| t >= model.config.vocab) {
        return Err(Error::Incompatible(format!(
            "split has token ids beyond the checkpoint's vocabulary of {}",
            model.config.vocab
        )));
    }
    let start = Instant::now();
    let ppl = perplexity(&model, stream)?;
    Ok(Evaluation {
        ppl,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Parameter-weighted mean bit-width of the quantized clusters.
pub fn average_bits(model: &QuantizedModel) -> f64 {
    let (weighted, total) = model.clusters().iter().fold((0.0, 0.0), |(w, t), c| {
        let n = c.spec.count as f64;
        (w + n * f64::from(c.table.bits().bits()), t + n)
    });
    weighted / total
}

/// File locations inside the output directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.0.join(format!("{name}.ckpt"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.0.join(format!("{name}.log.csv"))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn uniform_name(bits: BitWidth) -> String {
        format!("uniform-{bits}")
    }
}

pub fn write_csv_file(path: &Path, write: impl FnOnce(BufWriter<File>) -> Result<()>) -> Result<()> {
    write(BufWriter::new(File::create(path).map_err(Error::file(path))?))
}

fn load_model(path: &Path) -> Result<TransformerLm> {
    if !path.exists() {
        return Err(Error::MissingDependency(format!("{} not found; run its stage first", path.display())));
    }
    checkpoint::load(path)?.into_model()
}

fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    if !path.exists() {
        return Err(Error::MissingDependency(format!("{} not found; run its stage first", path.display())));
    }
    match checkpoint::load(path)? {
        Checkpoint::Quantized(q) => Ok(q),
        Checkpoint::Full(_) => Err(Error::format("kind", format!("{} is not quantized", path.display()))),
    }
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    corpus: Corpus,
    dir: RunDir,
    rows: Vec<ReportRow>,
    full_size: f64,
}

impl Runner<'_> {
    fn eval(&self, checkpoint: Checkpoint) -> Result<Evaluation> {
        evaluate(checkpoint, &self.corpus.test)
    }

    fn seconds(&self, e: &Evaluation) -> Option<f64> {
        self.config.pipeline.timings.then_some(e.seconds)
    }

    fn baseline(&self) -> Result<TransformerLm> {
        let model = load_model(&self.dir.checkpoint("baseline"))?;
        if model.config != model_config(self.config, &self.corpus) {
            return Err(Error::Incompatible("baseline checkpoint does not match the configuration".into()));
        }
        Ok(model)
    }

    fn quantized_row(&mut self, name: &str, model: &QuantizedModel, precision: PrecisionKind, method: QuantMethod) -> Result<()> {
        let e = self.eval(Checkpoint::Quantized(model.clone()))?;
        log::info!("{name}: test PPL {:.2}", e.ppl);
        let row = ReportRow::quantized(
            &self.config.pipeline.label,
            precision,
            method,
            average_bits(model),
            e.ppl,
            model_size_mb(model),
            self.full_size,
            self.seconds(&e),
        )?;
        self.rows.push(row);
        Ok(())
    }

    fn admm_stage(
        &mut self,
        name: &str,
        assignment: &[(ClusterSpec, Precision)],
        seed: u64,
        precision: PrecisionKind,
        method: QuantMethod,
    ) -> Result<QuantizedModel> {
        let base = self.baseline()?;
        let result = run_admm(self.config, &base, &self.corpus.train, assignment, seed)?;
        checkpoint::save_quantized(&self.dir.checkpoint(name), &result.model)?;
        write_csv_file(&self.dir.log(name), |w| result.log.write_csv(w))?;
        self.quantized_row(name, &result.model, precision, method)?;
        Ok(result.model)
    }

    fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let config = self.config;
        match stage {
            Stage::Baseline => {
                let (model, log) = train_baseline(config, &self.corpus)?;
                checkpoint::save_model(&self.dir.checkpoint("baseline"), &model)?;
                write_csv_file(&self.dir.log("baseline"), |w| log.write_csv(w))?;
                let e = self.eval(Checkpoint::Full(model))?;
                log::info!("baseline: test PPL {:.2}", e.ppl);
                self.rows.push(ReportRow::baseline(
                    &config.pipeline.label,
                    e.ppl,
                    self.full_size,
                    self.seconds(&e),
                ));
            }
            Stage::Uniform => {
                let specs = clusters(config, &model_config(config, &self.corpus));
                for &bits in &config.quant.candidates {
                    let name = RunDir::uniform_name(bits);
                    self.admm_stage(
                        &name,
                        &uniform_assignment(&specs, bits),
                        SEED_UNIFORM + u64::from(bits.bits()),
                        PrecisionKind::Uniform,
                        QuantMethod::Uniform,
                    )?;
                }
            }
            Stage::Manual => {
                let specs = clusters(config, &model_config(config, &self.corpus));
                let assignment = manual_assignment(&specs, &config.quant.manual);
                if assignment.iter().all(|(_, p)| *p == Precision::Full) {
                    return Err(Error::Config("the manual bit map quantizes no cluster".into()));
                }
                self.admm_stage("manual", &assignment, SEED_MANUAL, PrecisionKind::Mixed, QuantMethod::AdmmManual)?;
            }
            Stage::MinSen => {
                let base = self.baseline()?;
                let report = run_sensitivity(config, &base, &self.corpus)?;
                write_csv_file(&self.dir.file("sensitivity.csv"), |w| report.write_csv(w))?;
                let chosen = allocate_bits(&report, config.quant.budget)?;
                write_csv_file(&self.dir.file("minsen.assignment.csv"), |w| chosen.write_csv(w))?;
                let specs = clusters(config, &base.config);
                let assignment = assignment_from(&specs, &chosen);
                self.admm_stage("minsen", &assignment, SEED_MINSEN, PrecisionKind::Mixed, QuantMethod::MinSen)?;
            }
            Stage::Nas => {
                let uniform = config
                    .quant
                    .candidates
                    .iter()
                    .map(|&b| {
                        let q = load_quantized(&self.dir.checkpoint(&RunDir::uniform_name(b)))?;
                        Ok((b, q.dequantize()?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (selection, log, chosen) = run_search(config, &uniform, &self.corpus)?;
                write_csv_file(&self.dir.file("nas.selection.csv"), |w| selection.write_csv(w))?;
                write_csv_file(&self.dir.log("nas.search"), |w| log.write_csv(w))?;
                write_csv_file(&self.dir.file("nas.assignment.csv"), |w| chosen.write_csv(w))?;
                let specs = clusters(config, &model_config(config, &self.corpus));
                let assignment = assignment_from(&specs, &chosen);
                self.admm_stage("nas", &assignment, SEED_NAS, PrecisionKind::Mixed, QuantMethod::Nas)?;
            }
        }
        Ok(())
    }
}

/// Runs the configured stages in order and writes `report.txt` and
/// `report.csv` into the output directory.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let corpus = load_corpus(config).map_err(|e| Error::Stage {
        stage: "ingest",
        source: Box::new(e),
    })?;
    std::fs::create_dir_all(&config.pipeline.out_dir)?;
    let mut stages = config.pipeline.stages.clone();
    stages.sort();
    stages.dedup();
    let param_count = TransformerLm::param_shapes(&model_config(config, &corpus))
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum();
    let full_size = size_mb(&[], param_count);
    let mut runner = Runner {
        config,
        corpus,
        dir: RunDir(config.pipeline.out_dir.clone()),
        rows: Vec::new(),
        full_size,
    };
    for stage in stages {
        log::info!("stage {stage}");
        runner.run_stage(stage).map_err(|e| Error::Stage {
            stage: stage.name(),
            source: Box::new(e),
        })?;
    }
    let rows = runner.rows;
    if !rows.is_empty() {
        std::fs::write(runner.dir.file("report.txt"), format_table(&rows))?;
        write_csv_file(&runner.dir.file("report.csv"), |w| write_dump(&rows, w))?;
    }
    Ok(rows)
}
