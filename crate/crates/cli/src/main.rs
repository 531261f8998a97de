//! Benchmark harness for the two sequence-to-sequence architectures.
//!
//! Subcommands: `build-vocab`, `train`, `compare`, `count-params`,
//! `export-curves`. Everything is seeded, so two runs with the same flags
//! produce the same losses (timing columns aside).

mod svg;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use catformer::checkpoint;
use catformer::data::{
    batches_checksum, load_parallel_corpus, make_batches, tokenize_pairs, TokenizedPair,
};
use catformer::model::ConfigOverrides;
use catformer::train::{
    run_experiment, Budget, EpochMetrics, MetricsRow, TrainOptions, write_metrics_csv,
    read_metrics_csv,
};
use catformer::vocab::Vocab;
use catformer::{Element, Error, ModelConfig, Result, Seq2SeqModel, Variant};

#[derive(Parser)]
#[command(
    name = "catformer",
    version,
    about = "Train and compare additive vs concatenated positional-encoding transformers"
)]
struct Cli {
    /// Seeds weight initialization; batching and dropout streams derive from it.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Where metrics, checkpoints, and config snapshots are written.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,

    /// Arithmetic width for model weights and activations.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl Precision {
    fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VocabSide {
    Src,
    Tgt,
}

/// The corpus and the two vocabulary files every training command needs.
#[derive(clap::Args)]
struct DataArgs {
    /// Parallel corpus: one `source<TAB>target` pair per line.
    #[arg(long)]
    corpus: PathBuf,

    /// Source-side vocabulary file (from `build-vocab --side src`).
    #[arg(long)]
    src_vocab: PathBuf,

    /// Target-side vocabulary file (from `build-vocab --side tgt`).
    #[arg(long)]
    tgt_vocab: PathBuf,
}

#[derive(clap::Args, Clone)]
struct RunArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,

    #[arg(long, default_value_t = 32)]
    batch_size: usize,

    /// Learning-rate warmup steps.
    #[arg(long, default_value_t = 400)]
    warmup: usize,

    /// Wall-clock ceiling in hours, checked at epoch boundaries.
    #[arg(long, default_value_t = 10.0)]
    max_hours: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a wordpiece vocabulary from one side of a parallel corpus.
    BuildVocab {
        /// Parallel corpus: one `source<TAB>target` pair per line.
        #[arg(long)]
        corpus: PathBuf,

        /// Which side of the corpus to learn from.
        #[arg(long, value_enum)]
        side: VocabSide,

        /// Upper bound on the vocabulary size (reserved tokens included).
        #[arg(long, default_value_t = 4000)]
        size: usize,

        /// Output file (default: <out-dir>/vocab.<side>.txt).
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Train one model and write metrics.csv, checkpoint.bin, config.toml.
    Train {
        #[command(flatten)]
        data: DataArgs,

        #[arg(long, default_value = "proposed")]
        variant: Variant,

        /// TOML file overriding the variant's default hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,

        /// Held-out corpus for validation loss. Without it, every tenth
        /// pair of the training corpus is held out instead.
        #[arg(long)]
        val: Option<PathBuf>,

        #[command(flatten)]
        run: RunArgs,
    },

    /// Train both variants on the same batch stream and tabulate the results.
    Compare {
        #[command(flatten)]
        data: DataArgs,

        /// TOML overrides for the baseline model.
        #[arg(long)]
        config_baseline: Option<PathBuf>,

        /// TOML overrides for the proposed model.
        #[arg(long)]
        config_proposed: Option<PathBuf>,

        /// Held-out corpus for validation loss. Without it, every tenth
        /// pair of the training corpus is held out instead.
        #[arg(long)]
        val: Option<PathBuf>,

        /// Independent repetitions with different seeds.
        #[arg(long, default_value_t = 1)]
        trials: usize,

        /// Run each trial in its own OS process, all at once.
        #[arg(long)]
        parallel_trials: bool,

        /// Internal: run exactly this one trial (used by --parallel-trials).
        #[arg(long, hide = true)]
        trial_number: Option<usize>,

        #[command(flatten)]
        run: RunArgs,
    },

    /// Print the trainable-parameter budget without building a model.
    CountParams {
        /// Count one variant only (default: both plus their ratio).
        #[arg(long)]
        variant: Option<Variant>,

        /// TOML file overriding the variant's default hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,

        #[arg(long, default_value_t = 7765)]
        src_vocab_size: usize,

        #[arg(long, default_value_t = 7010)]
        tgt_vocab_size: usize,

        /// Emit a machine-readable JSON object instead of the table.
        #[arg(long)]
        json: bool,
    },

    /// Render a metrics.csv file as an SVG loss-curve plot.
    ExportCurves {
        /// A metrics.csv written by `train` or `compare`.
        #[arg(long)]
        metrics: PathBuf,

        /// Output file (default: the metrics path with an .svg extension).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Stable exit codes: 2 bad configuration, 3 bad input data or I/O,
/// 4 numerical fault, 1 internal invariant breakage.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Input(_) | Error::Parse { .. } | Error::Io { .. } => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let out_dir = cli.out_dir;
    let precision = cli.precision;
    match cli.command {
        Command::BuildVocab {
            corpus,
            side,
            size,
            out,
        } => cmd_build_vocab(&out_dir, &corpus, side, size, out),
        Command::Train {
            data,
            variant,
            config,
            val,
            run,
        } => match precision {
            Precision::F32 => {
                cmd_train::<f32>(seed, &out_dir, &data, variant, config.as_deref(), val, &run)
            }
            Precision::F64 => {
                cmd_train::<f64>(seed, &out_dir, &data, variant, config.as_deref(), val, &run)
            }
        },
        Command::Compare {
            data,
            config_baseline,
            config_proposed,
            val,
            trials,
            parallel_trials,
            trial_number,
            run,
        } => {
            let args = CompareArgs {
                seed,
                precision,
                data,
                config_baseline,
                config_proposed,
                val,
                trials,
                parallel_trials,
                trial_number,
                run,
            };
            match precision {
                Precision::F32 => cmd_compare::<f32>(&out_dir, &args),
                Precision::F64 => cmd_compare::<f64>(&out_dir, &args),
            }
        }
        Command::CountParams {
            variant,
            config,
            src_vocab_size,
            tgt_vocab_size,
            json,
        } => cmd_count_params(
            variant,
            config.as_deref(),
            src_vocab_size,
            tgt_vocab_size,
            json,
        ),
        Command::ExportCurves { metrics, out } => cmd_export_curves(&metrics, out),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

// ---------------------------------------------------------------------------
// build-vocab

fn cmd_build_vocab(
    out_dir: &Path,
    corpus: &Path,
    side: VocabSide,
    size: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let pairs = load_parallel_corpus(corpus)?;
    let (name, lines): (&str, Vec<String>) = match side {
        VocabSide::Src => ("src", pairs.into_iter().map(|(s, _)| s).collect()),
        VocabSide::Tgt => ("tgt", pairs.into_iter().map(|(_, t)| t).collect()),
    };
    let vocab = Vocab::train_wordpiece(&lines, size)?;
    let path = match out {
        Some(p) => p,
        None => {
            ensure_dir(out_dir)?;
            out_dir.join(format!("vocab.{name}.txt"))
        }
    };
    vocab.save(&path)?;
    println!(
        "learned {} tokens from {} {name} sentences -> {}",
        vocab.len(),
        lines.len(),
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared data/config loading

struct LoadedData {
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    train_pairs: Vec<TokenizedPair>,
    val_pairs: Vec<TokenizedPair>,
}

/// Loads vocabularies and corpus; `val` comes from its own file when given,
/// otherwise every tenth pair is held out (deterministically, so repeated
/// runs train on the same split).
fn load_data(data: &DataArgs, val: Option<&Path>) -> Result<LoadedData> {
    let src_vocab = Vocab::load(&data.src_vocab)?;
    let tgt_vocab = Vocab::load(&data.tgt_vocab)?;
    let pairs = load_parallel_corpus(&data.corpus)?;
    let tokenized = tokenize_pairs(&pairs, &src_vocab, &tgt_vocab);
    if tokenized.is_empty() {
        return Err(Error::Input(format!(
            "no usable sentence pairs in {}",
            data.corpus.display()
        )));
    }
    let (train_pairs, val_pairs) = match val {
        Some(path) => {
            let vp = load_parallel_corpus(path)?;
            (tokenized, tokenize_pairs(&vp, &src_vocab, &tgt_vocab))
        }
        None => {
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (i, p) in tokenized.into_iter().enumerate() {
                if i % 10 == 9 {
                    val.push(p);
                } else {
                    train.push(p);
                }
            }
            (train, val)
        }
    };
    Ok(LoadedData {
        src_vocab,
        tgt_vocab,
        train_pairs,
        val_pairs,
    })
}

fn load_overrides(path: Option<&Path>) -> Result<ConfigOverrides> {
    match path {
        Some(p) => ConfigOverrides::parse(&read_text(p)?),
        None => Ok(ConfigOverrides::default()),
    }
}

fn resolve_config(
    variant: Variant,
    config: Option<&Path>,
    src_vocab: usize,
    tgt_vocab: usize,
) -> Result<ModelConfig> {
    load_overrides(config)?.resolve(variant, src_vocab, tgt_vocab)
}

/// The resolved hyperparameters, in the same key set `--config` accepts.
#[derive(serde::Serialize)]
struct ConfigSnapshot {
    variant: Variant,
    n_blocks: usize,
    m: usize,
    s_ffn: usize,
    p: usize,
    r_q: usize,
    max_len: usize,
    dropout: f64,
    embed_scale: catformer::embedding::EmbedScaleMode,
    attn_scale: catformer::model::AttnScale,
}

/// Writes the resolved configuration as a TOML file that can be fed straight
/// back through `--config`, and proves it by parsing it back.
fn write_config_snapshot(path: &Path, cfg: &ModelConfig) -> Result<()> {
    let snap = ConfigSnapshot {
        variant: cfg.variant,
        n_blocks: cfg.n_blocks,
        m: cfg.m,
        s_ffn: cfg.s_ffn,
        p: cfg.p,
        r_q: cfg.r_q,
        max_len: cfg.max_len,
        dropout: cfg.dropout,
        embed_scale: cfg.embed_scale,
        attn_scale: cfg.attn_scale,
    };
    let body = toml::to_string(&snap)
        .map_err(|e| Error::Contract(format!("config serialization failed: {e}")))?;
    let text = format!(
        "# resolved model configuration; vocabulary sizes ({} source, {} target)\n\
         # always come from the vocabulary files, not from this file\n{body}",
        cfg.src_vocab, cfg.tgt_vocab
    );
    let back = ConfigOverrides::parse(&text)?.resolve(cfg.variant, cfg.src_vocab, cfg.tgt_vocab)?;
    if back != *cfg {
        return Err(Error::Contract(format!(
            "config snapshot did not round-trip: {back:?} vs {cfg:?}"
        )));
    }
    write_text(path, &text)
}

fn print_epoch(prefix: &str, e: &EpochMetrics) {
    if e.val_loss.is_nan() {
        println!(
            "{prefix}epoch {:>3}: train {:.6} ({:.1}s)",
            e.epoch, e.train_loss, e.epoch_seconds
        );
    } else {
        println!(
            "{prefix}epoch {:>3}: train {:.6} val {:.6} ({:.1}s)",
            e.epoch, e.train_loss, e.val_loss, e.epoch_seconds
        );
    }
}

// ---------------------------------------------------------------------------
// train

fn cmd_train<T: Element>(
    seed: u64,
    out_dir: &Path,
    data: &DataArgs,
    variant: Variant,
    config: Option<&Path>,
    val: Option<PathBuf>,
    run: &RunArgs,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let loaded = load_data(data, val.as_deref())?;
    let cfg = resolve_config(
        variant,
        config,
        loaded.src_vocab.len(),
        loaded.tgt_vocab.len(),
    )?;
    write_config_snapshot(&out_dir.join("config.toml"), &cfg)?;

    let model: Seq2SeqModel<T> = Seq2SeqModel::new(cfg.clone(), seed)?;
    println!(
        "{} model, {} parameters ({}), {} train / {} val pairs",
        cfg.variant,
        group_thousands(cfg.count_parameters()),
        T::NAME,
        loaded.train_pairs.len(),
        loaded.val_pairs.len()
    );

    let opts = TrainOptions {
        batch_size: run.batch_size,
        max_len: cfg.max_len,
        warmup: run.warmup,
        data_seed: seed.wrapping_add(1),
        dropout_seed: seed.wrapping_add(2),
        budget: Budget {
            max_epochs: run.epochs,
            max_hours: run.max_hours,
        },
    };
    let history = run_experiment(&model, &loaded.train_pairs, &loaded.val_pairs, &opts)?;
    for e in &history {
        print_epoch("", e);
    }

    let rows: Vec<MetricsRow> = history
        .iter()
        .map(|e| MetricsRow {
            trial: 1,
            epoch: e.epoch,
            variant: cfg.variant.to_string(),
            train_loss: e.train_loss,
            val_loss: e.val_loss,
            epoch_seconds: e.epoch_seconds,
        })
        .collect();
    let metrics_path = out_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &rows)?;
    let ckpt_path = out_dir.join("checkpoint.bin");
    checkpoint::save(&ckpt_path, model.parameters())?;
    println!(
        "wrote {}, {}, {}",
        metrics_path.display(),
        ckpt_path.display(),
        out_dir.join("config.toml").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// compare

struct CompareArgs {
    seed: u64,
    precision: Precision,
    data: DataArgs,
    config_baseline: Option<PathBuf>,
    config_proposed: Option<PathBuf>,
    val: Option<PathBuf>,
    trials: usize,
    parallel_trials: bool,
    trial_number: Option<usize>,
    run: RunArgs,
}

/// Per-trial seeds; both variants inside a trial share them, so they train
/// on identical batch streams.
fn trial_seeds(seed: u64, trial: usize) -> (u64, u64, u64) {
    let t = trial as u64;
    (
        seed.wrapping_add(t),
        seed.wrapping_add(1_000).wrapping_add(t),
        seed.wrapping_add(2_000).wrapping_add(t),
    )
}

fn cmd_compare<T: Element>(out_dir: &Path, args: &CompareArgs) -> Result<()> {
    if args.trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    ensure_dir(out_dir)?;
    let loaded = load_data(&args.data, args.val.as_deref())?;
    let cfg_b = resolve_config(
        Variant::Baseline,
        args.config_baseline.as_deref(),
        loaded.src_vocab.len(),
        loaded.tgt_vocab.len(),
    )?;
    let cfg_p = resolve_config(
        Variant::Proposed,
        args.config_proposed.as_deref(),
        loaded.src_vocab.len(),
        loaded.tgt_vocab.len(),
    )?;
    if cfg_b.variant != Variant::Baseline || cfg_p.variant != Variant::Proposed {
        return Err(Error::Config(
            "compare configs must keep their own variant (drop the `variant` key)".into(),
        ));
    }
    write_config_snapshot(&out_dir.join("config-baseline.toml"), &cfg_b)?;
    write_config_snapshot(&out_dir.join("config-proposed.toml"), &cfg_p)?;

    println!(
        "baseline {} parameters vs proposed {} parameters ({}), {} train / {} val pairs",
        group_thousands(cfg_b.count_parameters()),
        group_thousands(cfg_p.count_parameters()),
        T::NAME,
        loaded.train_pairs.len(),
        loaded.val_pairs.len()
    );

    let trial_list: Vec<usize> = match args.trial_number {
        Some(k) => vec![k],
        None => (1..=args.trials).collect(),
    };

    // Both variants must consume the same batches; the checksum over the
    // first epoch's stream proves it (max_len is the only config knob that
    // could secretly diverge them).
    for &k in &trial_list {
        let (_, data_seed, _) = trial_seeds(args.seed, k);
        let stream = |cfg: &ModelConfig| -> Result<u64> {
            let batches = make_batches(
                &loaded.train_pairs,
                args.run.batch_size,
                cfg.max_len,
                data_seed.wrapping_add(1),
            )?;
            Ok(batches_checksum(&batches))
        };
        let (cb, cp) = (stream(&cfg_b)?, stream(&cfg_p)?);
        if cb != cp {
            return Err(Error::Config(format!(
                "variants would train on different batch streams \
                 ({cb:#018x} vs {cp:#018x}); align max_len between the configs"
            )));
        }
        println!("trial {k}: batch stream checksum {cb:#018x}, shared by both variants");
    }

    let rows = if args.parallel_trials && args.trial_number.is_none() && args.trials > 1 {
        run_trials_in_processes(out_dir, args)?
    } else {
        let mut rows = Vec::new();
        for &k in &trial_list {
            run_one_trial::<T>(&mut rows, k, args, &loaded, &cfg_b, &cfg_p)?;
        }
        rows
    };

    let metrics_path = out_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &rows)?;

    if args.trial_number.is_none() {
        let table = summary_table(&rows);
        print!("{table}");
        write_text(&out_dir.join("summary.txt"), &table)?;
        println!(
            "wrote {}; plot it with: catformer export-curves --metrics {}",
            metrics_path.display(),
            metrics_path.display()
        );
    }
    Ok(())
}

fn run_one_trial<T: Element>(
    rows: &mut Vec<MetricsRow>,
    trial: usize,
    args: &CompareArgs,
    loaded: &LoadedData,
    cfg_b: &ModelConfig,
    cfg_p: &ModelConfig,
) -> Result<()> {
    let (model_seed, data_seed, dropout_seed) = trial_seeds(args.seed, trial);
    for cfg in [cfg_b, cfg_p] {
        let model: Seq2SeqModel<T> = Seq2SeqModel::new(cfg.clone(), model_seed)?;
        let opts = TrainOptions {
            batch_size: args.run.batch_size,
            max_len: cfg.max_len,
            warmup: args.run.warmup,
            data_seed,
            dropout_seed,
            budget: Budget {
                max_epochs: args.run.epochs,
                max_hours: args.run.max_hours,
            },
        };
        let history = run_experiment(&model, &loaded.train_pairs, &loaded.val_pairs, &opts)?;
        let prefix = format!("trial {trial} {}: ", cfg.variant);
        for e in &history {
            print_epoch(&prefix, e);
            rows.push(MetricsRow {
                trial,
                epoch: e.epoch,
                variant: cfg.variant.to_string(),
                train_loss: e.train_loss,
                val_loss: e.val_loss,
                epoch_seconds: e.epoch_seconds,
            });
        }
    }
    Ok(())
}

/// Spawns one child process per trial (all at once), then merges their
/// metrics files. Seeds are derived per trial, so the merged result is
/// loss-identical to a sequential run.
fn run_trials_in_processes(out_dir: &Path, args: &CompareArgs) -> Result<Vec<MetricsRow>> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current exe", e))?;
    let mut children = Vec::new();
    for k in 1..=args.trials {
        let child_dir = out_dir.join(format!("trial-{k}"));
        let mut cmd = std::process::Command::new(&exe);
        cmd.arg("--seed")
            .arg(args.seed.to_string())
            .arg("--out-dir")
            .arg(&child_dir)
            .arg("--precision")
            .arg(args.precision.as_str())
            .arg("compare")
            .arg("--corpus")
            .arg(&args.data.corpus)
            .arg("--src-vocab")
            .arg(&args.data.src_vocab)
            .arg("--tgt-vocab")
            .arg(&args.data.tgt_vocab)
            .arg("--trials")
            .arg(args.trials.to_string())
            .arg("--trial-number")
            .arg(k.to_string())
            .arg("--epochs")
            .arg(args.run.epochs.to_string())
            .arg("--batch-size")
            .arg(args.run.batch_size.to_string())
            .arg("--warmup")
            .arg(args.run.warmup.to_string())
            .arg("--max-hours")
            .arg(args.run.max_hours.to_string());
        if let Some(p) = &args.config_baseline {
            cmd.arg("--config-baseline").arg(p);
        }
        if let Some(p) = &args.config_proposed {
            cmd.arg("--config-proposed").arg(p);
        }
        if let Some(p) = &args.val {
            cmd.arg("--val").arg(p);
        }
        let child = cmd
            .spawn()
            .map_err(|e| Error::io(exe.display().to_string(), e))?;
        children.push((k, child_dir, child));
    }

    let mut rows = Vec::new();
    for (k, child_dir, mut child) in children {
        let status = child
            .wait()
            .map_err(|e| Error::io(format!("trial {k}"), e))?;
        if !status.success() {
            return Err(Error::Input(format!(
                "trial {k} process failed with {status}"
            )));
        }
        rows.extend(read_metrics_csv(&child_dir.join("metrics.csv"))?);
    }
    rows.sort_by(|a, b| {
        (a.trial, &a.variant, a.epoch).cmp(&(b.trial, &b.variant, b.epoch))
    });
    Ok(rows)
}

/// Final-epoch figures averaged over trials, one line per variant.
fn summary_table(rows: &[MetricsRow]) -> String {
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>5} {:>13} {:>11} {:>12}",
        "variant", "Ep.", "Train. loss", "Val. loss", "Comp. Time"
    );
    for v in variants {
        let trials: Vec<usize> = {
            let mut t: Vec<usize> = rows
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| r.trial)
                .collect();
            t.dedup();
            t
        };
        let mut n = 0usize;
        let (mut epochs, mut train, mut val, mut secs) = (0usize, 0.0, 0.0, 0.0);
        let mut val_seen = false;
        for &t in &trials {
            let last = rows
                .iter()
                .filter(|r| r.variant == v && r.trial == t)
                .max_by_key(|r| r.epoch)
                .expect("trial present");
            epochs = epochs.max(last.epoch);
            train += last.train_loss;
            if !last.val_loss.is_nan() {
                val += last.val_loss;
                val_seen = true;
            }
            secs += rows
                .iter()
                .filter(|r| r.variant == v && r.trial == t)
                .map(|r| r.epoch_seconds)
                .sum::<f64>();
            n += 1;
        }
        let k = n as f64;
        let val_text = if val_seen {
            format!("{:>11.4}", val / k)
        } else {
            format!("{:>11}", "-")
        };
        let _ = writeln!(
            out,
            "{:<10} {:>5} {:>13.4} {} {:>10.1} s",
            v,
            epochs,
            train / k,
            val_text,
            secs / k
        );
    }
    out
}

// ---------------------------------------------------------------------------
// count-params

fn cmd_count_params(
    variant: Option<Variant>,
    config: Option<&Path>,
    src_vocab_size: usize,
    tgt_vocab_size: usize,
    json: bool,
) -> Result<()> {
    let overrides = load_overrides(config)?;
    let variants: Vec<Variant> = match variant.or(overrides.variant) {
        Some(v) => vec![v],
        None => vec![Variant::Baseline, Variant::Proposed],
    };
    let configs: Vec<ModelConfig> = variants
        .iter()
        .map(|&v| overrides.resolve(v, src_vocab_size, tgt_vocab_size))
        .collect::<Result<_>>()?;

    if json {
        let entries: Vec<serde_json::Value> = configs
            .iter()
            .map(|cfg| {
                let sections: Vec<serde_json::Value> = cfg
                    .parameter_breakdown()
                    .into_iter()
                    .map(|(name, params)| serde_json::json!({"name": name, "params": params}))
                    .collect();
                serde_json::json!({
                    "variant": cfg.variant.to_string(),
                    "stream_width": cfg.stream_width(),
                    "total": cfg.count_parameters(),
                    "sections": sections,
                })
            })
            .collect();
        let mut doc = serde_json::json!({
            "src_vocab": src_vocab_size,
            "tgt_vocab": tgt_vocab_size,
            "configs": entries,
        });
        if configs.len() == 2 {
            let ratio = configs[0].count_parameters() as f64
                / configs[1].count_parameters() as f64;
            doc["ratio"] = serde_json::json!(ratio);
        }
        println!("{}", serde_json::to_string_pretty(&doc).expect("valid json"));
        return Ok(());
    }

    for cfg in &configs {
        println!("variant: {}", cfg.variant);
        for (name, params) in cfg.parameter_breakdown() {
            println!("  {:<28} {:>12}", name, group_thousands(params));
        }
        println!("  {:<28} {:>12}", "total", group_thousands(cfg.count_parameters()));
    }
    if configs.len() == 2 {
        println!(
            "parameter ratio baseline/proposed: {:.3}",
            configs[0].count_parameters() as f64 / configs[1].count_parameters() as f64
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// export-curves

fn cmd_export_curves(metrics: &Path, out: Option<PathBuf>) -> Result<()> {
    let rows = read_metrics_csv(metrics)?;
    let image = svg::render_curves(&rows)?;
    let path = out.unwrap_or_else(|| metrics.with_extension("svg"));
    write_text(&path, &image)?;
    println!("wrote {}", path.display());
    Ok(())
}
