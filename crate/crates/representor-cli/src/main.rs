//! Single binary exposing the whole pipeline: vocabulary building, corpus
//! preparation, training, translation, BLEU scoring, parameter accounting
//! and evaluation reports.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric
//! failure. Diagnostics go to stderr; data goes to stdout or the requested
//! output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use representor::checkpoint;
use representor::counting;
use representor::data::{self, Objective};
use representor::decode::{DecodeMode, DecodeRequest, JointOptions};
use representor::eval;
use representor::model::{HyperParams, Representor, SharingConfig};
use representor::train::{self, TrainConfig, TrainError};
use representor::vocab::{build_frequency_vocab, SharedVocabulary, Side, S2T, T2S};

mod config;

use config::ConfigFile;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "representor",
    version,
    about = "Weight-shared bidirectional translation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a frequency-ranked shared vocabulary from a parallel corpus.
    BuildVocab(BuildVocabArgs),
    /// Expand a parallel corpus into direction-tagged examples (TSV).
    Prepare(PrepareArgs),
    /// Train a model; writes checkpoints and a metrics log.
    Train(Box<TrainArgs>),
    /// Translate a file with a trained checkpoint.
    Translate(TranslateArgs),
    /// Corpus BLEU between a hypothesis file and reference file(s).
    Bleu(BleuArgs),
    /// Analytic parameter counts per sharing configuration.
    Params(ParamsArgs),
    /// Evaluation report: BLEU, length buckets, direction ratio.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ObjectiveArg {
    Baseline,
    StTs,
    LrRl,
    Cfp,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Objective {
        match o {
            ObjectiveArg::Baseline => Objective::Baseline,
            ObjectiveArg::StTs => Objective::StTs,
            ObjectiveArg::LrRl => Objective::LrRl,
            ObjectiveArg::Cfp => Objective::Cfp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    L2r,
    R2l,
    Mixed,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    S2t,
    T2s,
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Source-language text file, one sentence per line.
    #[arg(long)]
    src: PathBuf,
    /// Target-language text file, one sentence per line.
    #[arg(long)]
    tgt: PathBuf,
    /// Source vocabulary size cap.
    #[arg(long, default_value_t = 35000)]
    src_size: usize,
    /// Target vocabulary size cap.
    #[arg(long, default_value_t = 30000)]
    tgt_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Cfp)]
    objective: ObjectiveArg,
    #[arg(long)]
    out: PathBuf,
}

/// Training flags. Every optional flag falls back to the config file given
/// with --config, then to the built-in default; explicit flags win.
#[derive(Args)]
struct TrainArgs {
    /// key=value config file supplying defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    tgt: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total optimizer steps (default 1000).
    #[arg(long)]
    steps: Option<usize>,
    /// Examples per step (default 64).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Warmup steps of the inverse-square-root schedule (default 4000).
    #[arg(long)]
    warmup: Option<usize>,
    /// Label smoothing mass (default 0.1).
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Global-norm gradient clip threshold; unset means no clipping.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Steps between intermediate checkpoints (0: final only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Encoder/decoder depth (default 2).
    #[arg(long)]
    layers: Option<usize>,
    /// Model width (default 64).
    #[arg(long)]
    dim: Option<usize>,
    /// Attention heads (default 4).
    #[arg(long)]
    heads: Option<usize>,
    /// Feed-forward inner width (default 128).
    #[arg(long)]
    ffn: Option<usize>,
    /// Longest supported sequence (default 256).
    #[arg(long)]
    max_len: Option<usize>,
    /// Embedding sharing (default true).
    #[arg(long)]
    es: Option<bool>,
    /// Encoder-decoder sharing (default true).
    #[arg(long)]
    eds: Option<bool>,
    /// Layer sharing (default false).
    #[arg(long)]
    ls: Option<bool>,
    /// Resume from this checkpoint (restores optimizer state).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Joint)]
    mode: ModeArg,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Length-penalty exponent.
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = TaskArg::S2t)]
    task: TaskArg,
    /// Longest payload to generate.
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Joint rerank terms: 2 (target given source, both orders) or 4 (adds
    /// the source-given-target terms).
    #[arg(long, default_value_t = 2)]
    joint_terms: usize,
    /// Disable length normalization inside the joint rerank score.
    #[arg(long)]
    no_length_normalize: bool,
    /// Emit tab-separated direction, score and payload columns.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct BleuArgs {
    #[arg(long)]
    hyp: PathBuf,
    /// Reference file; repeat for multiple references.
    #[arg(long = "ref", required = true)]
    refs: Vec<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    /// "paper-big": 6 layers, d=1024, 16 heads, ffn 4096, 30k/30k vocab.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 6)]
    layers: usize,
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    heads: usize,
    #[arg(long, default_value_t = 4096)]
    ffn: usize,
    #[arg(long, default_value_t = 30000)]
    src_vocab: usize,
    #[arg(long, default_value_t = 30000)]
    tgt_vocab: usize,
    /// "table" (human-readable) or "records" (CSV rows).
    #[arg(long, default_value = "table")]
    emit: String,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Source file enabling the per-length-bucket table.
    #[arg(long)]
    src: Option<PathBuf>,
    /// Source-length bucket width.
    #[arg(long, default_value_t = 10)]
    length_buckets: usize,
    /// Verbose translate output for the direction-ratio statistic.
    #[arg(long)]
    decodes: Option<PathBuf>,
    /// Also write machine-readable records to this file.
    #[arg(long)]
    emit_records: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildVocab(a) => build_vocab(a),
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => run_train(*a),
        Command::Translate(a) => translate(a),
        Command::Bleu(a) => bleu(a),
        Command::Params(a) => params(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

fn build_vocab(a: BuildVocabArgs) -> Result<(), CliError> {
    if a.src_size < 1 || a.tgt_size < 1 {
        return Err(CliError::Usage("vocabulary sizes must be positive".into()));
    }
    let src_lines = read_tokenized(&a.src)?;
    let tgt_lines = read_tokenized(&a.tgt)?;
    let src_refs: Vec<&[String]> = src_lines.iter().map(|v| v.as_slice()).collect();
    let tgt_refs: Vec<&[String]> = tgt_lines.iter().map(|v| v.as_slice()).collect();
    let src = build_frequency_vocab(src_refs, a.src_size).map_err(usage)?;
    let tgt = build_frequency_vocab(tgt_refs, a.tgt_size).map_err(usage)?;
    let vocab = SharedVocabulary::build_shared(src, tgt).map_err(usage)?;
    vocab.save(&a.out).map_err(usage)?;
    eprintln!(
        "vocabulary: {} src + {} tgt tokens, {} shared rows -> {}",
        vocab.src_size(),
        vocab.tgt_size(),
        vocab.shared_rows(),
        a.out.display()
    );
    Ok(())
}

fn prepare(a: PrepareArgs) -> Result<(), CliError> {
    let vocab = SharedVocabulary::load(&a.vocab).map_err(usage)?;
    let (pairs, load_stats) = data::load_parallel(&a.src, &a.tgt).map_err(usage)?;
    let (examples, stats) = data::prepare_examples(&pairs, &vocab, a.objective.into());
    fs::write(&a.out, data::dump_examples(&examples, &vocab)).map_err(usage)?;
    eprintln!(
        "prepared {} examples from {} pairs ({} blank, {} overlong skipped) -> {}",
        examples.len(),
        stats.pairs,
        load_stats.skipped_blank + stats.skipped_blank,
        stats.skipped_long,
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<(), CliError> {
    let file = match &a.config {
        Some(path) => ConfigFile::load(path).map_err(CliError::Usage)?,
        None => ConfigFile::empty(),
    };
    let merged = config::MergedTrain::merge(&a, &file).map_err(CliError::Usage)?;

    let vocab = SharedVocabulary::load(&merged.vocab).map_err(usage)?;
    let (pairs, load_stats) = data::load_parallel(&merged.src, &merged.tgt).map_err(usage)?;
    eprintln!(
        "corpus: {} pairs ({} blank lines skipped)",
        pairs.len(),
        load_stats.skipped_blank
    );

    let sharing = SharingConfig {
        embedding_sharing: merged.es,
        encoder_decoder_sharing: merged.eds,
        layer_sharing: merged.ls,
    };
    let hyper = HyperParams {
        num_layers: merged.layers,
        model_dim: merged.dim,
        num_heads: merged.heads,
        ffn_dim: merged.ffn,
        vocab_rows: vocab.shared_rows(),
        max_len: merged.max_len,
    };
    let cfg = TrainConfig {
        objective: merged.objective,
        warmup_steps: merged.warmup,
        label_smoothing: merged.label_smoothing,
        batch_size: merged.batch_size,
        max_steps: merged.steps,
        seed: merged.seed,
        checkpoint_every: merged.checkpoint_every,
        grad_clip: merged.grad_clip,
        dropout: merged.dropout,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(usage)?;

    let (mut model, resume_state) = match &merged.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path).map_err(usage)?;
            if ckpt.vocab_sha256 != vocab.sha256_hex() {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained with a different vocabulary",
                    path.display()
                )));
            }
            eprintln!("resuming from step {}", ckpt.step);
            (ckpt.model, ckpt.optimizer)
        }
        None => (
            Representor::init(sharing, hyper, merged.seed).map_err(usage)?,
            None,
        ),
    };

    fs::create_dir_all(&merged.out_dir)
        .map_err(|e| usage(format!("cannot create {}: {e}", merged.out_dir.display())))?;
    let effective = merged.echo();
    fs::write(merged.out_dir.join("config.txt"), &effective).map_err(usage)?;
    eprint!("{effective}");

    let report = train::train(
        &mut model,
        &pairs,
        &vocab,
        &cfg,
        Some(&merged.out_dir),
        resume_state,
    )
    .map_err(|e| match e {
        TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGrad { .. } => {
            CliError::Numeric(e.to_string())
        }
        other => usage(other),
    })?;
    eprintln!(
        "trained {} steps, final loss {:.4}, checkpoint {}",
        report.steps,
        report.final_loss,
        report
            .checkpoint_path
            .as_deref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    Ok(())
}

fn translate(a: TranslateArgs) -> Result<(), CliError> {
    if ![2, 4].contains(&a.joint_terms) {
        return Err(CliError::Usage("--joint-terms must be 2 or 4".into()));
    }
    let vocab = SharedVocabulary::load(&a.vocab).map_err(usage)?;
    let ckpt = checkpoint::load(&a.checkpoint).map_err(usage)?;
    if ckpt.vocab_sha256 != vocab.sha256_hex() {
        return Err(CliError::Usage(
            "checkpoint/vocabulary hash mismatch; pass the vocabulary the model was trained with"
                .into(),
        ));
    }
    let model = ckpt.model;
    let (task_label, input_side, output_side) = match a.task {
        TaskArg::S2t => (S2T, Side::Src, Side::Tgt),
        TaskArg::T2s => (T2S, Side::Tgt, Side::Src),
    };
    let mode = match a.mode {
        ModeArg::L2r => DecodeMode::L2R,
        ModeArg::R2l => DecodeMode::R2L,
        ModeArg::Mixed => DecodeMode::Mixed,
        ModeArg::Joint => DecodeMode::Joint,
    };
    let joint_opts = JointOptions {
        four_terms: a.joint_terms == 4,
        length_normalize: !a.no_length_normalize,
    };

    let lines = read_tokenized(&a.input)?;
    let mut out = String::new();
    for tokens in &lines {
        if tokens.is_empty() {
            out.push('\n');
            continue;
        }
        let mut source_ids = vec![task_label];
        source_ids.extend(vocab.tokens_to_ids(input_side, tokens));
        let req = DecodeRequest {
            source_ids,
            mode,
            beam: a.beam,
            alpha: a.alpha,
            max_len: a.max_len,
        };
        let result = representor::decode::translate(&model, &req, joint_opts)
            .map_err(|e| usage(format!("decode failed: {e}")))?;
        let text = vocab
            .ids_to_tokens(output_side, &result.payload_ids)
            .join(" ");
        if a.verbose {
            let dir = match result.order {
                data::Order::L2R => "l2r",
                data::Order::R2L => "r2l",
            };
            out.push_str(&format!("{dir}\t{:.6}\t{text}\n", result.score));
        } else {
            out.push_str(&text);
            out.push('\n');
        }
    }
    match &a.output {
        Some(path) => fs::write(path, out).map_err(usage)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn bleu(a: BleuArgs) -> Result<(), CliError> {
    let hyps = read_tokenized(&a.hyp)?;
    let mut ref_sets: Vec<Vec<Vec<String>>> = vec![Vec::new(); hyps.len()];
    for path in &a.refs {
        let lines = read_tokenized(path)?;
        if lines.len() != hyps.len() {
            return Err(CliError::Usage(format!(
                "reference {} has {} lines, hypothesis has {}",
                path.display(),
                lines.len(),
                hyps.len()
            )));
        }
        for (set, line) in ref_sets.iter_mut().zip(lines) {
            set.push(line);
        }
    }
    let report = eval::corpus_bleu(&hyps, &ref_sets).map_err(usage)?;
    println!("BLEU = {:.2}", report.bleu);
    println!(
        "p1 = {:.4}, p2 = {:.4}, p3 = {:.4}, p4 = {:.4}",
        report.precisions[0], report.precisions[1], report.precisions[2], report.precisions[3]
    );
    println!(
        "BP = {:.4}, hyp_len = {}, ref_len = {}",
        report.brevity_penalty, report.hyp_len, report.ref_len
    );
    Ok(())
}

fn params(a: ParamsArgs) -> Result<(), CliError> {
    let hyper = match a.preset.as_deref() {
        Some("paper-big") => HyperParams::big(30000 + representor::vocab::NUM_SPECIALS),
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown preset {other:?}; available: paper-big"
            )))
        }
        None => HyperParams {
            num_layers: a.layers,
            model_dim: a.dim,
            num_heads: a.heads,
            ffn_dim: a.ffn,
            vocab_rows: a.src_vocab.max(a.tgt_vocab) + representor::vocab::NUM_SPECIALS,
            max_len: 256,
        },
    };
    hyper.validate().map_err(usage)?;
    let configs = [
        SharingConfig {
            embedding_sharing: true,
            ..SharingConfig::none()
        },
        SharingConfig {
            encoder_decoder_sharing: true,
            ..SharingConfig::none()
        },
        SharingConfig::representor(),
        SharingConfig {
            embedding_sharing: true,
            encoder_decoder_sharing: true,
            layer_sharing: true,
        },
    ];
    let rows = counting::table(&configs, &hyper);
    match a.emit.as_str() {
        "table" => print!("{}", counting::format_table(&rows)),
        "records" => print!("{}", counting::format_records(&rows)),
        other => {
            return Err(CliError::Usage(format!(
                "unknown emit format {other:?}; use table or records"
            )))
        }
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), CliError> {
    let hyps = read_tokenized(&a.hyp)?;
    let refs = read_tokenized(&a.reference)?;
    let bleu = eval::corpus_bleu_single(&hyps, &refs).map_err(usage)?;
    let buckets = match &a.src {
        Some(src_path) => {
            let srcs = read_tokenized(src_path)?;
            eval::length_buckets(&hyps, &refs, &srcs, a.length_buckets).map_err(usage)?
        }
        None => Vec::new(),
    };
    let direction_ratio = match &a.decodes {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            let orders = eval::parse_verbose_directions(&text).map_err(usage)?;
            Some(eval::direction_ratio(&orders).map_err(usage)?)
        }
        None => None,
    };
    let report = eval::EvalReport {
        bleu,
        direction_ratio,
        buckets,
    };
    print!("{}", report.format_text());
    if let Some(path) = &a.emit_records {
        fs::write(path, report.format_records()).map_err(usage)?;
    }
    Ok(())
}
