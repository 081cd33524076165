//! `e2e-absa`: train, evaluate and run the aspect/sentiment tagger.
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime and numeric failures.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use e2e_absa::checkpoint::Checkpoint;
use e2e_absa::corpus::{self, Example, Vocab};
use e2e_absa::gradcheck::{self, GradCheckConfig};
use e2e_absa::tagging::tags_to_spans;
use e2e_absa::tensor::OP_NAMES;
use e2e_absa::training::{self, trajectory_csv, MultiSeedReport};

use config::{usage, RunConfig, UsageError};

#[derive(Parser)]
#[command(name = "e2e-absa", version, about = "Aspect extraction and sentiment tagging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and write checkpoints and reports.
    ///
    /// Takes `--config FILE` and any config key as `--key value`.
    Train {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OPTIONS")]
        options: Vec<String>,
    },
    /// Score a checkpoint on a labeled dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Tag raw text (one sentence per line) or a tab-separated file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input file; standard input when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Finite-difference check of every head and the CRF.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Sentence and aspect counts of dataset files.
    Stats {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { options } => cmd_train(&options),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::Predict { checkpoint, input } => cmd_predict(&checkpoint, input.as_deref()),
        Command::Gradcheck { corrupt } => cmd_gradcheck(corrupt.as_deref()),
        Command::Stats { files } => cmd_stats(&files),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use e2e_absa::Error as E;
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match e.downcast_ref::<E>() {
        Some(E::Config(_) | E::Parse { .. } | E::Annotation { .. } | E::Validity { .. } | E::Checkpoint(_) | E::Io(_)) => 1,
        _ => 2,
    }
}

fn find_split(dir: &Path, name: &str) -> Result<PathBuf> {
    ["txt", "conll", "jsonl"]
        .iter()
        .map(|ext| dir.join(format!("{name}.{ext}")))
        .find(|p| p.exists())
        .ok_or_else(|| usage(format!("no {name}.txt, {name}.conll or {name}.jsonl in {}", dir.display())))
}

fn load(path: &Path) -> Result<Vec<Example>> {
    if !path.exists() {
        return Err(usage(format!("{} does not exist", path.display())));
    }
    Ok(corpus::read_dataset(path)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn report_text(report: &MultiSeedReport) -> String {
    let mut out = String::new();
    for r in &report.per_seed {
        let ck = &r.outcome.checkpoint;
        writeln!(out, "seed {} (step {}): dev {}  test {}", r.seed, ck.step, r.dev, r.test).unwrap();
    }
    writeln!(out, "mean dev  {}", report.mean_dev).unwrap();
    writeln!(out, "mean test {}", report.mean_test).unwrap();
    out
}

fn write_seed_artifacts(dir: &Path, report: &MultiSeedReport) -> Result<()> {
    for r in &report.per_seed {
        let seed_dir = dir.join(format!("seed-{}", r.seed));
        fs::create_dir_all(&seed_dir)?;
        r.outcome.checkpoint.save(&seed_dir.join("checkpoint.json"))?;
        write(&seed_dir.join("trajectory.csv"), &trajectory_csv(&r.outcome.trajectory))?;
        let text = format!(
            "selected step {}\ndev {}\ntest {}\n\n[test]\n{}",
            r.outcome.checkpoint.step,
            r.dev,
            r.test,
            r.test.key_values()
        );
        write(&seed_dir.join("report.txt"), &text)?;
    }
    write(&dir.join("report.txt"), &report_text(report))
}

fn cmd_train(options: &[String]) -> Result<ExitCode> {
    let cfg = RunConfig::from_args(options)?;
    let data = cfg.data.clone().expect("validated");
    let train_set = load(&find_split(&data, "train")?)?;
    let dev_set = load(&find_split(&data, "dev")?)?;
    let test_set = load(&find_split(&data, "test")?)?;
    let vocab = Vocab::build(&train_set, cfg.train.min_freq)?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write(&cfg.out.join("config.resolved"), &cfg.render())?;

    if cfg.compare_frozen {
        let cmp = training::compare_frozen(&cfg.model, &cfg.train, &vocab, &train_set, &dev_set, &test_set)?;
        write_seed_artifacts(&cfg.out.join("fine-tuned"), &cmp.fine_tuned)?;
        write_seed_artifacts(&cfg.out.join("frozen"), &cmp.frozen)?;
        let table = cmp.table();
        write(&cfg.out.join("compare_frozen.tsv"), &table)?;
        print!("{table}");
    } else {
        let report = training::multi_seed_run(&cfg.model, &cfg.train, &vocab, &train_set, &dev_set, &test_set)?;
        write_seed_artifacts(&cfg.out, &report)?;
        print!("{}", report_text(&report));
    }
    Ok(ExitCode::SUCCESS)
}

fn load_checkpoint(path: &Path) -> Result<e2e_absa::model::Model> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?.to_model()?)
}

fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<ExitCode> {
    let model = load_checkpoint(checkpoint)?;
    let examples = load(data)?;
    corpus::check_lengths(&examples, model.config.encoder.max_len, &data.display().to_string())?;
    let report = model.evaluate(&examples)?;
    println!("{report}");
    print!("{}", report.key_values());
    Ok(ExitCode::SUCCESS)
}

fn read_input(input: Option<&Path>) -> Result<String> {
    match input {
        Some(p) => fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display()))),
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn cmd_predict(checkpoint: &Path, input: Option<&Path>) -> Result<ExitCode> {
    let model = load_checkpoint(checkpoint)?;
    let text = read_input(input)?;
    let origin = input.map(|p| p.display().to_string()).unwrap_or_else(|| "<stdin>".into());
    let is_tabular = input.is_some_and(|p| p.extension().is_some_and(|e| e == "conll" || e == "jsonl"))
        || text.lines().any(|l| l.contains('\t'));
    let sentences: Vec<Vec<String>> = if is_tabular {
        let examples = match input.and_then(|p| p.extension()) {
            Some(e) if e == "jsonl" => corpus::parse_jsonl(&text, &origin)?,
            _ => corpus::parse_conll(&text, &origin)?,
        };
        examples.into_iter().map(|e| e.tokens).collect()
    } else {
        text.lines().map(corpus::tokenize).filter(|t| !t.is_empty()).collect()
    };
    corpus::check_lengths(
        &sentences.iter().cloned().map(Example::unlabeled).collect::<Vec<_>>(),
        model.config.encoder.max_len,
        &origin,
    )?;

    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (i, tokens) in sentences.iter().enumerate() {
        let unknown: Vec<&str> = tokens
            .iter()
            .filter(|t| model.vocab.get(t).is_none())
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            eprintln!("warning: sentence {}: out-of-vocabulary tokens mapped to <unk>: {}", i + 1, unknown.join(" "));
        }
        let tags = model.predict_tags(tokens)?;
        if i > 0 {
            writeln!(out)?;
        }
        for (tok, tag) in tokens.iter().zip(&tags) {
            writeln!(out, "{tok}\t{tag}")?;
        }
        let spans: Vec<String> = tags_to_spans(&tags)?
            .iter()
            .map(|s| format!("{}/{}", tokens[s.start..=s.end].join(" "), s.sentiment))
            .collect();
        writeln!(out, "# aspects: {}", if spans.is_empty() { "-".to_string() } else { spans.join(", ") })?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(corrupt: Option<&str>) -> Result<ExitCode> {
    let corrupt = match corrupt {
        None => None,
        Some(op) => Some(
            *OP_NAMES
                .iter()
                .find(|&&n| n == op)
                .ok_or_else(|| usage(format!("unknown op `{op}` (one of {})", OP_NAMES.join(", "))))?,
        ),
    };
    let cfg = GradCheckConfig::default();
    println!(
        "dim_h={} T={} h={:e} tolerance={:e} (relative error floor {:e})",
        cfg.dim_h, cfg.seq_len, cfg.step, cfg.tolerance, cfg.floor
    );
    let results = gradcheck::run_suite(&cfg, corrupt)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        let op = corrupt.map(|o| format!(" (backward of `{o}` corrupted)")).unwrap_or_default();
        eprintln!("{failed} gradient check(s) failed{op}");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_stats(files: &[PathBuf]) -> Result<ExitCode> {
    println!("file\tsentences\taspects");
    let mut total = corpus::CorpusStats::default();
    for f in files {
        let s = corpus::stats(&load(f)?);
        println!("{}\t{}\t{}", f.display(), s.sentences, s.aspects);
        total = total + s;
    }
    if files.len() > 1 {
        println!("total\t{}\t{}", total.sentences, total.aspects);
    }
    Ok(ExitCode::SUCCESS)
}
