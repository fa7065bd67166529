use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use cocoa::data::{generate_corpus, read_corpus, write_corpus, CorpusSpec, Generator, MetaTask, Split, TrainingInstance};
use cocoa::eval::{attribute_recall, build_pool, eos_probe, precision_at_1, run_ablation, run_mask_sweep, Arm, EvalError, Protocol};
use cocoa::mask::{build_bidirectional, build_causal, build_truncated, SequenceLayout};
use cocoa::model::ModelConfig;
use cocoa::pipeline::{begin_stage, load_checkpoint, save_checkpoint, train, PipelineError, StageConfig, METRICS_HEADER};
use cocoa::rng;

#[derive(Parser)]
#[command(name = "cocoa", version, about = "Three-stage multimodal embedding training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus as JSON lines.
    GenData {
        /// retrieval, classification, vqa or all
        #[arg(long, default_value = "all")]
        meta_task: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        hard_mode: bool,
        #[arg(long, value_enum, default_value_t = SplitArg::Pretrain)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write a checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// JSON file with optional `model` and `stage` objects.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Accept an initial checkpoint that is not from the preceding stage.
        #[arg(long)]
        allow_skip: bool,
        /// Append per-step metrics to this CSV file.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Stop after this many total steps; rerun with the output as `--init` to resume.
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision@1 of a checkpoint on the pools built from an evaluation corpus.
    Eval {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = cocoa::eval::POOL_SIZE)]
        pool_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate ablation arms over several seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "full,contrastive-only")]
        arms: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// desk, smoke or a protocol JSON file
        #[arg(long, default_value = "desk")]
        protocol: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2+3 at several Block-B mask ratios.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,0.7")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "desk")]
        protocol: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the attention mask of a layout such as `A:2,EOS,B:2`.
    DumpMask {
        #[arg(long)]
        layout_spec: String,
        #[arg(long, value_enum, default_value_t = Format::Ascii)]
        format: Format,
        #[arg(long, value_enum, default_value_t = Mode::Truncated)]
        mode: Mode,
    },
    /// Decode Block-B text from the EOS state of a random image.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        image_seed: u64,
        #[arg(long, default_value_t = 6)]
        length: usize,
        #[arg(long)]
        hard_mode: bool,
        #[arg(long, default_value_t = cocoa::data::DEFAULT_CODE_SEED)]
        code_seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Pretrain,
    Contrastive,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ascii,
    Pgm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Truncated,
    Bidirectional,
    Causal,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::StageOrder { .. } | PipelineError::ConfigMismatch(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnknownArm(_) | EvalError::Protocol(_) => Failure::Usage(e.to_string()),
            EvalError::Pipeline(p) => p.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    model: Option<ModelConfig>,
    stage: Option<StageConfig>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn protocol(arg: &str) -> Result<Protocol, Failure> {
    let p = match arg {
        "desk" => Protocol::desk(),
        "smoke" => Protocol::smoke(),
        path => read_json(Path::new(path))?,
    };
    p.validate()?;
    Ok(p)
}

fn tasks(arg: &str) -> Result<Vec<MetaTask>, Failure> {
    if arg == "all" {
        return Ok(vec![MetaTask::Retrieval, MetaTask::Classification, MetaTask::Vqa]);
    }
    arg.split(',')
        .map(|t| MetaTask::parse(t.trim()).ok_or_else(|| Failure::Usage(format!("unknown meta-task {t:?}"))))
        .collect()
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn instances(path: &Path) -> Result<Vec<TrainingInstance>, Failure> {
    Ok(read_corpus(path).map_err(data_err)?.into_iter().map(|r| r.instance).collect())
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { meta_task, count, seed, hard_mode, split, out } => {
            let split = match split {
                SplitArg::Pretrain => Split::Pretrain,
                SplitArg::Contrastive => Split::Contrastive,
                SplitArg::Eval => Split::Eval,
            };
            let counts = tasks(&meta_task)?.into_iter().map(|t| (t, count)).collect();
            let gen = Generator::new(cocoa::data::DEFAULT_CODE_SEED).map_err(data_err)?;
            let records = generate_corpus(&gen, &CorpusSpec { root_seed: seed, split, counts, hard: hard_mode });
            write_corpus(&out, &records).map_err(data_err)?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Train { stage, config, data, init, allow_skip, metrics, max_steps, out } => {
            let file = match &config {
                Some(p) => read_json(p)?,
                None => TrainFile { model: None, stage: None },
            };
            let cfg = file.stage.unwrap_or_else(|| Protocol::desk().stage_config(stage));
            if cfg.stage != stage {
                return Err(Failure::Usage(format!("config is for stage {}, not {stage}", cfg.stage)));
            }
            let init = init.map(|p| load_checkpoint(&p)).transpose()?;
            let model = match (file.model, &init) {
                (Some(m), _) => m,
                (None, Some(s)) => s.params.config().clone(),
                (None, None) => Protocol::desk().model,
            };
            let corpus = instances(&data)?;
            let mut state = begin_stage(cfg, &model, init, allow_skip)?;
            let mut log = match &metrics {
                Some(p) => {
                    let fresh = !p.exists();
                    let mut f = OpenOptions::new().create(true).append(true).open(p).map_err(data_err)?;
                    if fresh {
                        writeln!(f, "{METRICS_HEADER}").map_err(data_err)?;
                    }
                    Some(f)
                }
                None => None,
            };
            let mut io_error = None;
            train(&mut state, &corpus, max_steps, &mut |row| {
                if let Some(f) = log.as_mut() {
                    if let Err(e) = writeln!(f, "{}", row.csv_line()) {
                        io_error.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = io_error {
                return Err(data_err(e));
            }
            save_checkpoint(&state, &out)?;
            let last = state.metrics.last().map_or(f64::NAN, |m| m.loss.total);
            eprintln!("stage {stage}: {} steps, last loss {last:.4}, saved {}", state.step, out.display());
        }
        Command::Eval { pool, checkpoint, pool_size, seed } => {
            let state = load_checkpoint(&checkpoint)?;
            let corpus = instances(&pool)?;
            let vocab = cocoa::data::Vocab::standard();
            let mut scores = Vec::new();
            println!("meta_task,p_at_1,queries");
            for task in [MetaTask::Retrieval, MetaTask::Classification, MetaTask::Vqa] {
                let items: Vec<TrainingInstance> = corpus.iter().filter(|i| i.meta_task == task).cloned().collect();
                if items.is_empty() {
                    continue;
                }
                let p = build_pool(task, &items, &vocab, pool_size, seed)?;
                let score = precision_at_1(&p, &state.params)?;
                println!("{},{score:.6},{}", task.name(), p.len());
                scores.push(score);
            }
            if scores.is_empty() {
                return Err(Failure::Data(format!("{}: no instances", pool.display())));
            }
            println!("mean,{:.6},", scores.iter().sum::<f64>() / scores.len() as f64);
        }
        Command::Ablate { arms, seeds, protocol: p, out } => {
            let arms = arms.iter().map(|a| Arm::parse(a)).collect::<Result<Vec<_>, _>>()?;
            let report = run_ablation(&protocol(&p)?, &arms, &seeds, &mut |m| eprintln!("{m}"))?;
            write_output(out.as_deref(), &report.to_csv())?;
        }
        Command::Sweep { ratios, seeds, protocol: p, out } => {
            let report = run_mask_sweep(&protocol(&p)?, &ratios, &seeds, &mut |m| eprintln!("{m}"))?;
            write_output(out.as_deref(), &report.to_csv())?;
        }
        Command::DumpMask { layout_spec, format, mode } => {
            let layout = SequenceLayout::parse_spec(&layout_spec).map_err(|e| Failure::Usage(e.to_string()))?;
            let mask = match mode {
                Mode::Truncated => build_truncated(&layout).map_err(|e| Failure::Usage(e.to_string()))?,
                Mode::Bidirectional => build_bidirectional(&layout),
                Mode::Causal => build_causal(layout.len()).map_err(|e| Failure::Usage(e.to_string()))?,
            };
            match format {
                Format::Ascii => print!("{}", mask.to_ascii(Some(&layout))),
                Format::Pgm => print!("{}", mask.to_pgm()),
            }
        }
        Command::Probe { checkpoint, image_seed, length, hard_mode, code_seed } => {
            let state = load_checkpoint(&checkpoint)?;
            let gen = Generator::new(code_seed).map_err(data_err)?;
            let image = gen.random_image(&mut rng::stream(image_seed, &[0]), hard_mode);
            let patches = gen.codes.render(&image, rng::derive_seed(image_seed, &[1]));
            let tokens = eos_probe(&state.params, &patches, length).map_err(|e| match e {
                EvalError::Model(m) => Failure::Usage(m.to_string()),
                other => other.into(),
            })?;
            let cells: Vec<String> = image.cells.iter().map(|c| c.phrase().join(" ")).collect();
            println!("image: {}", cells.join(" | "));
            println!("decoded: {}", gen.vocab.decode(&tokens));
            println!("attribute recall: {}", attribute_recall(&gen.vocab, &tokens, &image));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
