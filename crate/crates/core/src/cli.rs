//! Subcommands of the `grouptie` binary.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::corpus::{RawCorpus, VocabOrder, Vocabulary};
use crate::eval::{fit, run_experiment};
use crate::groups::{build_groups, GroupTable, ResourceKind, DEFAULT_PREFIX_DEPTH};
use crate::hashshare::SharingPlan;
use crate::model::{load_checkpoint, save_checkpoint, Channel2, Trainer};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "grouptie", version, about = "Text classification with group-tied word embeddings")]
pub struct Cli {
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compile a grouping resource into canonical key<TAB>word form.
    BuildGroups(BuildGroupsArgs),
    /// Train one model on the whole corpus and write a checkpoint.
    Train(TrainArgs),
    /// Run replicated cross-validation and write a report.
    Evaluate(EvaluateArgs),
    /// Label documents with a trained checkpoint.
    Predict(PredictArgs),
    /// Show how a word's embedding coordinates map onto its groups.
    InspectSharing(InspectArgs),
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("words").required(true).args(["vocab", "corpus"])))]
pub struct BuildGroupsArgs {
    /// Resource format: tsv, brown, mesh or sentilex.
    #[arg(long, value_parser = parse_kind)]
    pub kind: ResourceKind,
    /// Resource file.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Vocabulary file, one word per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Corpus (label<TAB>tokens) whose tokens form the vocabulary.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output TSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of leading tree-number components kept for MeSH grouping.
    #[arg(long, default_value_t = DEFAULT_PREFIX_DEPTH)]
    pub prefix_depth: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Report file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Maximum number of folds trained at once.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Documents, one per line; a leading `label<TAB>` is ignored.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output TSV of label<TAB>score; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint written by `train` in group_init_share mode.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Word to inspect.
    #[arg(long)]
    pub word: String,
}

fn parse_kind(s: &str) -> std::result::Result<ResourceKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::BuildGroups(a) => cmd_build_groups(&a, &mut out),
        Command::Train(a) => cmd_train(&a, &mut out),
        Command::Evaluate(a) => cmd_evaluate(&a, &mut out),
        Command::Predict(a) => cmd_predict(&a, &mut out),
        Command::InspectSharing(a) => cmd_inspect_sharing(&a, &mut out),
    }
}

/// Reads a word list, one word per line, skipping blank lines.
pub fn read_word_list(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = std::collections::HashSet::new();
    let words: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .filter(|w| seen.insert(w.to_string()))
        .map(String::from)
        .collect();
    Vocabulary::from_words(words)
}

/// `N`, coverage and the membership histogram of `table`.
pub fn coverage_summary(table: &GroupTable) -> String {
    let v = table.num_words();
    let covered = table.covered_words();
    let pct = if v == 0 { 0.0 } else { 100.0 * covered as f64 / v as f64 };
    let mut s = String::new();
    let _ = writeln!(s, "groups={}", table.num_groups());
    let _ = writeln!(s, "vocabulary={v}");
    let _ = writeln!(s, "covered={covered} ({pct:.2}%)");
    for (k, n) in table.membership_histogram().iter().enumerate() {
        let _ = writeln!(s, "words_in_{k}_groups={n}");
    }
    let st = table.stats();
    let _ = writeln!(
        s,
        "lines={} pairs={} oov_skipped={} multiword_skipped={} objective_skipped={}",
        st.lines, st.pairs, st.oov_skipped, st.multiword_skipped, st.objective_skipped
    );
    s
}

pub fn cmd_build_groups(a: &BuildGroupsArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = match (&a.vocab, &a.corpus) {
        (Some(v), _) => read_word_list(v)?,
        (None, Some(c)) => {
            let raw = RawCorpus::read(c)?;
            Vocabulary::build(&raw.token_lists(), VocabOrder::FirstOccurrence)?
        }
        (None, None) => return Err(Error::InvalidArgument("pass --vocab or --corpus".into())),
    };
    let table = build_groups(a.kind, &a.input, &vocab, a.prefix_depth)?;
    let file = fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut w = BufWriter::new(file);
    table.write_tsv(&mut w, &vocab).map_err(|e| Error::io(&a.out, e))?;
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    out.write_all(coverage_summary(&table).as_bytes())?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::read(&a.config)?;
    let loaded = cfg.load()?;
    let data = &loaded.data;
    let model = cfg.model_config(data.dataset.num_classes().max(2), seed::derive(cfg.seed, "train", &[]));
    let mut trainer = Trainer::new(model, &data.pretrained, data.groups.as_ref())?;
    let all: Vec<usize> = (0..data.dataset.len()).collect();
    let mut lines = Vec::new();
    fit(&mut trainer, &data.dataset, &all, cfg.schedule(), |e, loss| {
        log::info!("epoch {}: loss {loss:.6}", e + 1);
        lines.push(format!("epoch={} loss={loss:.10}", e + 1));
    })?;
    save_checkpoint(&a.out, &trainer, &loaded.vocab)?;
    for l in lines {
        writeln!(out, "{l}")?;
    }
    writeln!(out, "checkpoint={}", a.out.display())?;
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::read(&a.config)?;
    let loaded = cfg.load()?;
    let template = cfg.model_config(loaded.data.dataset.num_classes().max(2), cfg.seed);
    let report = run_experiment(&loaded.data, &template, &cfg.protocol(), &cfg.echo(), a.jobs)?;
    let text = report.render();
    match &a.out {
        Some(p) => fs::write(p, &text).map_err(|e| Error::io(p, e))?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Token lists of a document file; a `label<TAB>` prefix is dropped.
pub fn read_documents(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let body = line.split_once('\t').map_or(line, |(_, b)| b);
        let ids: Vec<usize> = body.split_whitespace().map(|t| vocab.lookup(t)).collect();
        if ids.is_empty() {
            return Err(Error::parse(path, n + 1, "document has no tokens"));
        }
        docs.push(ids);
    }
    Ok(docs)
}

pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let (trainer, vocab) = load_checkpoint(&a.checkpoint)?;
    let docs = read_documents(&a.input, &vocab)?;
    let preds = trainer.predict(&docs)?;
    let mut text = String::new();
    for p in preds {
        let _ = writeln!(text, "{}\t{:.6}", p.label, p.score);
    }
    match &a.out {
        Some(p) => fs::write(p, &text).map_err(|e| Error::io(p, e))?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Human-readable sharing pattern of word `id`.
pub fn render_sharing(word: &str, id: usize, table: &GroupTable, plan: &SharingPlan) -> String {
    let mut s = String::new();
    let groups = table.groups_of(id);
    let _ = writeln!(s, "word={word} id={id}");
    let _ = writeln!(s, "K={}", groups.len());
    if plan.is_private(id) {
        let _ = writeln!(s, "private row (no groups; trained independently)");
        return s;
    }
    let keys: Vec<&str> = groups.iter().map(|&k| table.key(k)).collect();
    let _ = writeln!(s, "groups={}", keys.join(","));
    let _ = writeln!(s, "dim\tgroup\tsign");
    for j in 0..plan.dim() {
        let k = plan.group_at(id, j).expect("grouped row");
        let sign = if plan.sign_at(id, j) < 0 { '-' } else { '+' };
        let _ = writeln!(s, "{j}\t{}\t{sign}", table.key(k));
    }
    s
}

pub fn cmd_inspect_sharing(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let (trainer, vocab) = load_checkpoint(&a.checkpoint)?;
    let id = vocab
        .id(&a.word)
        .ok_or_else(|| Error::InvalidArgument(format!("word {:?} is not in the vocabulary", a.word)))?;
    match &trainer.params.channel2 {
        Some(Channel2::Shared { shared, table, .. }) => {
            out.write_all(render_sharing(&a.word, id, table, shared.plan()).as_bytes())?;
            Ok(())
        }
        _ => Err(Error::InvalidArgument(format!(
            "checkpoint was trained in {} mode and has no shared channel",
            trainer.config.channel2_mode.as_str()
        ))),
    }
}
