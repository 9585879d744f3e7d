use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::require;
use super::*;
use crate::decode::{finetune_loop, ExitMode};
use crate::metrics;
use crate::pretrain::{pretrain_loop, PermutationSampler, TrainingReport};
use crate::tokenizer::split_words;

#[derive(Debug, Parser)]
#[command(name = "layerexit", version, about = "Parallel text generation with token-level early exit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a word vocabulary from text files.
    BuildVocab {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 30_000)]
        max_size: usize,
    },
    /// Write a synthetic src.txt/tgt.txt pair.
    MakeSynthetic {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Denoising pre-training with the layer-permutation objective.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Task fine-tuning for hard or soft exit.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        mode: ExitMode,
    },
    /// Decode sources to line-delimited JSON records.
    Generate {
        #[command(flatten)]
        decode: DecodeArgs,
        /// Sources, one per line; defaults to [data] eval_src.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score hypotheses against references.
    Evaluate {
        /// Plain text lines, or generation records when the name ends in .jsonl.
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Per-example records.
        #[arg(long)]
        examples: Option<PathBuf>,
    },
    /// Latency and FLOP comparison of decoding modes.
    Bench {
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, value_delimiter = ',', default_value = "ar,nar,hard,soft")]
        modes: Vec<DecodeMode>,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = bench::MIN_REPETITIONS)]
        repetitions: usize,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Where to write the trained model.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training report (JSON lines).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Trained model; a fresh initialization from the config otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<DecodeMode>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    length: Option<usize>,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit status: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    Vocabulary::load(require(&cfg.data.vocab, "vocab")?)
}

/// Checkpoint if given, else a fresh model sized to the vocabulary.
fn load_model(cfg: &RunConfig, vocab: &Vocabulary, checkpoint: Option<&Path>) -> Result<Model> {
    let model = match checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let mut mc = cfg.model.clone();
            if mc.vocab_size == 0 {
                mc.vocab_size = vocab.len();
            }
            Model::new(mc, cfg.seed)?
        }
    };
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary {} differs from vocabulary file {}",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    Ok(model)
}

fn write_report(report: &TrainingReport, path: Option<&Path>) -> Result<()> {
    if let Some(path) = path {
        report.write_jsonl(BufWriter::new(File::create(path)?))?;
    }
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::BuildVocab {
            inputs,
            output,
            max_size,
        } => {
            let mut lines = Vec::new();
            for p in &inputs {
                lines.extend(read_lines(p)?);
            }
            let vocab = Vocabulary::build(lines.iter().map(String::as_str), max_size)?;
            vocab.save(&output)?;
            eprintln!("wrote {} entries to {}", vocab.len(), output.display());
            Ok(())
        }
        Command::MakeSynthetic {
            task,
            size,
            seed,
            out_dir,
        } => write_synthetic(task, size, seed, out_dir),
        Command::Pretrain { run, init } => {
            let mut cfg = load_config(&run.config, run.seed)?;
            if let Some(steps) = run.steps {
                cfg.training.steps = steps;
            }
            let vocab = load_vocab(&cfg)?;
            let mut model = load_model(&cfg, &vocab, init.as_deref())?;
            let corpus: Vec<Vec<TokenId>> = read_lines(require(&cfg.data.corpus, "corpus")?)?
                .iter()
                .map(|l| vocab.encode(l))
                .collect();
            let mut sampler =
                PermutationSampler::new(cfg.training.samples_per_sequence, model.layers(), cfg.seed)?;
            let mut opt = cfg.training.optimizer(&model);
            let report = pretrain_loop(
                &mut model,
                &corpus,
                vocab.full_stop(),
                &cfg.corruption,
                &cfg.training,
                &mut sampler,
                &mut opt,
            )?;
            save_checkpoint(&model, &run.checkpoint)?;
            write_report(&report, run.report.as_deref())
        }
        Command::Finetune { run, init, mode } => {
            let mut cfg = load_config(&run.config, run.seed)?;
            if let Some(steps) = run.steps {
                cfg.training.steps = steps;
            }
            let vocab = load_vocab(&cfg)?;
            let mut model = load_model(&cfg, &vocab, init.as_deref())?;
            let max_target = cfg.training.decode_len(&model) - 1;
            let data = load_parallel(
                &vocab,
                require(&cfg.data.train_src, "train_src")?,
                require(&cfg.data.train_tgt, "train_tgt")?,
                max_target,
            )?;
            let mut opt = cfg.training.optimizer(&model);
            let report = finetune_loop(&mut model, &data, mode, &cfg.training, cfg.seed, &mut opt)?;
            save_checkpoint(&model, &run.checkpoint)?;
            write_report(&report, run.report.as_deref())
        }
        Command::Generate { decode, input, output: out } => {
            let (cfg, vocab, model) = decode.setup()?;
            let input = match input {
                Some(p) => p,
                None => require(&cfg.data.eval_src, "eval_src")?.to_path_buf(),
            };
            let (mode, delta, length) = decode.strategy(&cfg);
            let mut w = output(out.as_deref())?;
            for (id, line) in read_lines(input)?.iter().enumerate() {
                let result = generate(&model, &vocab.encode(line), mode, length, delta)?;
                serde_json::to_writer(&mut w, &GenerationRecord::new(id, &vocab, &result)?)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            Ok(())
        }
        Command::Evaluate {
            hyp,
            reference,
            examples,
        } => {
            let hyps: Vec<String> = if hyp.extension().is_some_and(|e| e == "jsonl") {
                read_lines(&hyp)?
                    .iter()
                    .map(|l| serde_json::from_str::<GenerationRecord>(l).map(|r| r.text))
                    .collect::<std::result::Result<_, _>>()?
            } else {
                read_lines(&hyp)?
            };
            let refs = read_lines(&reference)?;
            if hyps.len() != refs.len() {
                return Err(Error::Config(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
            }
            let h: Vec<Vec<String>> = hyps.iter().map(|s| split_words(s)).collect();
            let r: Vec<Vec<String>> = refs.iter().map(|s| split_words(s)).collect();
            let pairs: Vec<(&[String], &[String])> = h.iter().zip(&r).map(|(a, b)| (&a[..], &b[..])).collect();
            write_summary(&metrics::summarize(&pairs), io::stdout().lock())?;
            if let Some(path) = examples {
                let records: Vec<EvalRecord> = pairs
                    .iter()
                    .enumerate()
                    .map(|(id, (a, b))| EvalRecord {
                        id,
                        scores: metrics::score_pair(a, b),
                    })
                    .collect();
                write_jsonl(&records, BufWriter::new(File::create(path)?))?;
            }
            Ok(())
        }
        Command::Bench {
            decode,
            modes,
            lengths,
            repetitions,
            input,
            output: out,
        } => {
            let (cfg, vocab, model) = decode.setup()?;
            let input = match input {
                Some(p) => p,
                None => require(&cfg.data.eval_src, "eval_src")?.to_path_buf(),
            };
            let sources: Vec<Vec<TokenId>> = read_lines(input)?.iter().map(|l| vocab.encode(l)).collect();
            let (_, delta, _) = decode.strategy(&cfg);
            let opts = BenchOptions {
                modes,
                lengths,
                repetitions,
                delta,
            };
            let records = bench_latency(&model, &sources, &opts)?;
            print!("{}", bench::format_table(&records));
            if let Some(path) = out {
                write_jsonl(&records, BufWriter::new(File::create(path)?))?;
            }
            Ok(())
        }
    }
}

impl DecodeArgs {
    fn setup(&self) -> Result<(RunConfig, Vocabulary, Model)> {
        let cfg = load_config(&self.config, self.seed)?;
        let vocab = load_vocab(&cfg)?;
        let model = load_model(&cfg, &vocab, self.checkpoint.as_deref())?;
        Ok((cfg, vocab, model))
    }

    fn strategy(&self, cfg: &RunConfig) -> (DecodeMode, f64, usize) {
        (
            self.mode.unwrap_or(cfg.decoding.mode),
            self.delta.unwrap_or(cfg.decoding.delta),
            self.length.unwrap_or_else(|| cfg.decode_length()),
        )
    }
}
