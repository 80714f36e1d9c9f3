use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mixquant::checkpoint::{self, Checkpoint};
use mixquant::harness::config::ExperimentConfig;
use mixquant::harness::corpus::Corpus;
use mixquant::harness::pipeline::{
    self as stages, assignment_from, average_bits, load_corpus, manual_assignment, model_config, uniform_assignment,
    write_csv_file, RunDir,
};
use mixquant::harness::report::{format_table, read_dump};
use mixquant::nas::SelectionWeights;
use mixquant::quant::{model_size_mb, BitWidth};
use mixquant::sensitivity::{allocate_bits, PrecisionAssignment, SensitivityReport};
use mixquant::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "mixquant", version, about = "Mixed-precision quantization of small Transformer LMs")]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize the corpus and print vocabulary and split sizes.
    Ingest {
        /// Also write the vocabulary, one token per line in id order.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
    },
    /// Train the full-precision baseline.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ADMM-train a quantized model from the baseline.
    QuantizeAdmm {
        /// Uniform bit-width for every cluster.
        #[arg(long, conflicts_with_all = ["manual", "assignment"])]
        bits: Option<BitWidth>,
        /// Use the configured manual bit map.
        #[arg(long)]
        manual: bool,
        /// Per-cluster bit-widths from an allocation CSV.
        #[arg(long, conflicts_with = "manual")]
        assignment: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate per-cluster Hessian-trace sensitivities of the baseline.
    Sensitivity {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Choose bit-widths minimizing total sensitivity under a budget.
    Allocate {
        #[arg(long)]
        report: Option<PathBuf>,
        /// Average-bit budget; defaults to the configured one.
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search per-sub-layer precisions with the supernet.
    NasSearch {
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract the 1-best precision of every sub-layer from selection weights.
    Extract {
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perplexity and evaluation time of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print a report dump as an aligned table.
    Report {
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Run every configured stage and write the report.
    Pipeline,
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) => 1,
        Error::Diverged { .. } => 3,
        Error::Infeasible(_) => 4,
        _ => 2,
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(Error::file(path))?))
}

struct Context {
    config: ExperimentConfig,
    dir: RunDir,
}

impl Context {
    fn corpus(&self) -> Result<Corpus> {
        load_corpus(&self.config)
    }

    fn or_dir(&self, path: Option<PathBuf>, name: &str) -> PathBuf {
        path.unwrap_or_else(|| self.dir.file(name))
    }

    fn ensure_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir.0)?;
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    let ctx = Context {
        dir: RunDir(config.pipeline.out_dir.clone()),
        config,
    };
    let config = &ctx.config;
    match cli.command {
        Command::Ingest { vocab_out } => {
            let corpus = ctx.corpus()?;
            println!("mode {}", corpus.mode);
            println!("vocabulary {}", corpus.vocab_size());
            println!(
                "tokens train {} valid {} test {}",
                corpus.train.len(),
                corpus.valid.len(),
                corpus.test.len()
            );
            if let Some(path) = vocab_out {
                let mut text = String::new();
                for t in corpus.vocab.tokens() {
                    text.push_str(&t.escape_default().to_string());
                    text.push('\n');
                }
                std::fs::write(path, text)?;
            }
        }
        Command::Train { out } => {
            ctx.ensure_dir()?;
            let corpus = ctx.corpus()?;
            let (model, log) = stages::train_baseline(config, &corpus)?;
            let path = out.unwrap_or_else(|| ctx.dir.checkpoint("baseline"));
            checkpoint::save_model(&path, &model)?;
            write_csv_file(&path.with_extension("log.csv"), |w| log.write_csv(w))?;
            let ppl = mixquant::model::perplexity(&model, &corpus.valid)?;
            println!("saved {} (valid PPL {ppl:.2})", path.display());
        }
        Command::QuantizeAdmm {
            bits,
            manual,
            assignment,
            base,
            out,
        } => {
            ctx.ensure_dir()?;
            let corpus = ctx.corpus()?;
            let base = checkpoint::load(&base.unwrap_or_else(|| ctx.dir.checkpoint("baseline")))?.into_model()?;
            let specs = stages::clusters(config, &base.config);
            let (name, assigned, seed) = match (bits, manual, assignment) {
                (Some(b), _, _) => (
                    RunDir::uniform_name(b),
                    uniform_assignment(&specs, b),
                    stages::SEED_UNIFORM + u64::from(b.bits()),
                ),
                (None, true, _) => (
                    "manual".to_owned(),
                    manual_assignment(&specs, &config.quant.manual),
                    stages::SEED_MANUAL,
                ),
                (None, false, Some(path)) => {
                    let chosen = PrecisionAssignment::read_csv(open(&path)?)?;
                    let stem = path
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .map_or("mixed".to_owned(), |s| s.trim_end_matches(".assignment").to_owned());
                    let seed = match stem.as_str() {
                        "minsen" => stages::SEED_MINSEN,
                        "nas" => stages::SEED_NAS,
                        _ => 100,
                    };
                    (stem, assignment_from(&specs, &chosen), seed)
                }
                (None, false, None) => {
                    return Err(Error::Config("give one of --bits, --manual or --assignment".into()));
                }
            };
            let result = stages::run_admm(config, &base, &corpus.train, &assigned, seed)?;
            let path = out.unwrap_or_else(|| ctx.dir.checkpoint(&name));
            checkpoint::save_quantized(&path, &result.model)?;
            write_csv_file(&path.with_extension("log.csv"), |w| result.log.write_csv(w))?;
            println!(
                "saved {} ({:.1} bits, {:.4} MB, converged: {})",
                path.display(),
                average_bits(&result.model),
                model_size_mb(&result.model),
                result.converged
            );
        }
        Command::Sensitivity { base, out } => {
            ctx.ensure_dir()?;
            let corpus = ctx.corpus()?;
            let base = checkpoint::load(&base.unwrap_or_else(|| ctx.dir.checkpoint("baseline")))?.into_model()?;
            let report = stages::run_sensitivity(config, &base, &corpus)?;
            let path = ctx.or_dir(out, "sensitivity.csv");
            write_csv_file(&path, |w| report.write_csv(w))?;
            println!("saved {}", path.display());
        }
        Command::Allocate { report, budget, out } => {
            ctx.ensure_dir()?;
            let report = SensitivityReport::read_csv(open(&ctx.or_dir(report, "sensitivity.csv"))?)?;
            let chosen = allocate_bits(&report, budget.unwrap_or(config.quant.budget))?;
            for c in &chosen.clusters {
                println!("{} {}", c.cluster, c.bits);
            }
            println!("average bits {:.2}", chosen.average_bits());
            let path = ctx.or_dir(out, "minsen.assignment.csv");
            write_csv_file(&path, |w| chosen.write_csv(w))?;
        }
        Command::NasSearch { beta, out } => {
            ctx.ensure_dir()?;
            let corpus = ctx.corpus()?;
            let mut config = config.clone();
            if let Some(beta) = beta {
                config.nas.beta = beta;
            }
            let uniform = config
                .quant
                .candidates
                .iter()
                .map(|&b| Ok((b, checkpoint::load(&ctx.dir.checkpoint(&RunDir::uniform_name(b)))?.into_model()?)))
                .collect::<Result<Vec<_>>>()?;
            let (selection, log, chosen) = stages::run_search(&config, &uniform, &corpus)?;
            let path = ctx.or_dir(out, "nas.selection.csv");
            write_csv_file(&path, |w| selection.write_csv(w))?;
            write_csv_file(&ctx.dir.log("nas.search"), |w| log.write_csv(w))?;
            println!("saved {} (1-best average bits {:.2})", path.display(), chosen.average_bits());
        }
        Command::Extract { selection, out } => {
            ctx.ensure_dir()?;
            let corpus = ctx.corpus()?;
            let selection = SelectionWeights::read_csv(open(&ctx.or_dir(selection, "nas.selection.csv"))?)?;
            let chosen = stages::nas_precisions(config, &model_config(config, &corpus), &selection)?;
            for c in &chosen.clusters {
                println!("{} {}", c.cluster, c.bits);
            }
            println!("average bits {:.2}", chosen.average_bits());
            let path = ctx.or_dir(out, "nas.assignment.csv");
            write_csv_file(&path, |w| chosen.write_csv(w))?;
        }
        Command::Eval { checkpoint: path, split } => {
            let corpus = ctx.corpus()?;
            let ckpt = checkpoint::load(&path)?;
            let kind = match &ckpt {
                Checkpoint::Full(_) => "full",
                Checkpoint::Quantized(_) => "quantized",
            };
            let e = stages::evaluate(ckpt, corpus.split(&split)?)?;
            println!("{kind} checkpoint, {split} PPL {:.2}, eval time {:.2} s", e.ppl, e.seconds);
        }
        Command::Report { dump } => {
            let rows = read_dump(open(&ctx.or_dir(dump, "report.csv"))?)?;
            if rows.is_empty() {
                return Err(Error::EmptyInput("report dump has no rows".into()));
            }
            print!("{}", format_table(&rows));
        }
        Command::Pipeline => {
            let rows = stages::run_pipeline(config)?;
            print!("{}", format_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
