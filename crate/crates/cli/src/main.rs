use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use vlmforge::corpus::{
    compute_stats, parse_interleaved, parse_pairs, reformat_images_first, subsample_topk, to_pairs, write_jsonl,
    CorpusFormat, InterleavedDocument, PairPolicy, Parsed,
};
use vlmforge::diagnostics::{alignment_profile, ChamferVariant};
use vlmforge::eval::{run_eval, EvalTask};
use vlmforge::fixture::{
    arithmetic_demos, class_demos, class_task, fixture_gen, parity_task, topic_corpus, FixtureSpec,
};
use vlmforge::images::SyntheticImages;
use vlmforge::manifest::{manifest_path, RunManifest};
use vlmforge::model::{load_checkpoint, save_checkpoint, ModelConfig};
use vlmforge::packing::{pack_document, read_shard, write_shard, SftDemo, SlotGeometry, Tokenizer};
use vlmforge::trainer::{
    compare_loss_curves, corpus_names, Corpora, Preset, PresetBudget, RunLog, StagePlan, Trainer,
};

/// Desk-scale visual-language pre-training toolkit.
#[derive(Parser, Debug)]
#[command(name = "vlmforge", version)]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true, env = "VLMFORGE_SEED", default_value_t = 0)]
    seed: u64,
    /// Abort on the first malformed input record instead of skipping it.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Inspect and transform corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Pack documents into a token shard.
    #[command(subcommand)]
    Pack(PackCmd),
    /// Run training and compare runs.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Alignment diagnostics.
    #[command(subcommand)]
    Diag(DiagCmd),
    /// Few-shot evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Subcommand, Debug)]
enum CorpusCmd {
    /// Print images per sample and text tokens per image as JSON.
    Stats {
        path: PathBuf,
        #[arg(long, default_value = "interleaved")]
        format: String,
    },
    /// Break interleaved documents into image-text pairs.
    ToPairs {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value = "best-sim")]
        policy: String,
    },
    /// Move every image in a document ahead of its text.
    Reformat { input: PathBuf, output: PathBuf },
    /// Keep the k pairs with the highest clip score.
    Topk {
        input: PathBuf,
        output: PathBuf,
        #[arg(short)]
        k: usize,
    },
    /// Generate synthetic corpora, instruction demos and eval tasks.
    Fixture(FixtureArgs),
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// mmc4, coyo or topic.
    #[arg(long, default_value = "topic")]
    kind: String,
    #[arg(long, default_value_t = 200)]
    n_docs: usize,
    /// JSON fixture spec; overrides --kind and --n-docs.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum PackCmd {
    /// Pack an interleaved corpus.
    Run {
        docs: PathBuf,
        out: PathBuf,
        #[arg(long)]
        max_len: usize,
        #[arg(long, default_value_t = 336)]
        res: usize,
        #[arg(long, default_value_t = 14)]
        patch: usize,
        #[arg(long, default_value_t = 1)]
        downsample: usize,
    },
}

#[derive(Subcommand, Debug)]
enum TrainCmd {
    /// Train a staged plan or a preset.
    Run(TrainArgs),
    /// Align two run logs by step and report the loss gap.
    CompareLoss {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 500)]
        window: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON stage plan; takes precedence over --preset.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Interleaved corpus (JSONL).
    #[arg(long)]
    corpus_a: Option<PathBuf>,
    /// Pairs corpus (JSONL).
    #[arg(long)]
    corpus_b: Option<PathBuf>,
    /// Visual instruction demos (JSONL); generated when absent.
    #[arg(long)]
    sft: Option<PathBuf>,
    /// Text-only instruction demos (JSONL); generated when absent.
    #[arg(long)]
    sft_text: Option<PathBuf>,
    /// Model config JSON used with --preset.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    init_steps: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    sft_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Resume from a state file written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps (a state file is saved).
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum DiagCmd {
    /// Per-layer image/text alignment profile.
    Align {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        shard: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "symmetric")]
        variant: String,
        /// Use at most this many samples from the shard.
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    /// Score a task file k-shot.
    Run {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(short, long, default_value_t = 0)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Records inputs and outputs of one command and writes a manifest next
/// to every output.
struct Provenance {
    manifest: RunManifest,
    outputs: Vec<PathBuf>,
}

impl Provenance {
    fn new(cli: &Cli) -> Self {
        Self {
            manifest: RunManifest::begin(&format!("{:?}", cli.cmd), &format!("{cli:?}"), cli.seed),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        Ok(self.manifest.input(path)?)
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    fn finish(mut self) -> Result<()> {
        for p in &self.outputs {
            self.manifest.output(p)?;
        }
        for p in &self.outputs {
            self.manifest.clone().finish(&manifest_path(p))?;
        }
        Ok(())
    }
}

fn report_skipped<T>(parsed: &Parsed<T>, path: &Path) {
    for e in &parsed.errors {
        eprintln!("warning: {}: skipped {e}", path.display());
    }
    if parsed.dropped > 0 {
        eprintln!("warning: {}: dropped {} empty records", path.display(), parsed.dropped);
    }
}

fn read_docs(path: &Path, strict: bool) -> Result<Vec<InterleavedDocument>> {
    let parsed = parse_interleaved(path, strict).with_context(|| format!("reading {}", path.display()))?;
    report_skipped(&parsed, path);
    Ok(parsed.records)
}

fn read_json_lines<T: DeserializeOwned>(path: &Path, strict: bool) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(e) => {
                let err = vlmforge::Error::Schema { line: i + 1, message: e.to_string() };
                if strict {
                    return Err(anyhow::Error::new(err).context(format!("reading {}", path.display())));
                }
                eprintln!("warning: {}: skipped {err}", path.display());
            }
        }
    }
    Ok(out)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| vlmforge::Error::Config(format!("{}: {e}", path.display())).into())
}

fn corpus(cli: &Cli, cmd: &CorpusCmd) -> Result<()> {
    let mut prov = Provenance::new(cli);
    match cmd {
        CorpusCmd::Stats { path, format } => {
            let docs = match format.parse::<CorpusFormat>()? {
                CorpusFormat::Interleaved => read_docs(path, cli.strict)?,
                CorpusFormat::Pairs => {
                    let parsed = parse_pairs(path, cli.strict)?;
                    report_skipped(&parsed, path);
                    parsed
                        .records
                        .iter()
                        .enumerate()
                        .map(|(i, p)| p.to_document(format!("pair{i}")))
                        .collect()
                }
            };
            let stats = compute_stats(&docs, &Tokenizer::new());
            say(&serde_json::to_string_pretty(&stats)?);
            return Ok(());
        }
        CorpusCmd::ToPairs { input, output, policy } => {
            let policy: PairPolicy = policy.parse()?;
            prov.input(input)?;
            let mut pairs = Vec::new();
            for doc in read_docs(input, cli.strict)? {
                match to_pairs(&doc, policy) {
                    Ok(p) => pairs.extend(p),
                    Err(e) if cli.strict => return Err(e.into()),
                    Err(e) => eprintln!("warning: skipped {}: {e}", doc.doc_id),
                }
            }
            write_jsonl(output, &pairs)?;
            eprintln!("{} pairs", pairs.len());
            prov.output(output);
        }
        CorpusCmd::Reformat { input, output } => {
            prov.input(input)?;
            let docs: Vec<_> = read_docs(input, cli.strict)?.iter().map(reformat_images_first).collect();
            write_jsonl(output, &docs)?;
            prov.output(output);
        }
        CorpusCmd::Topk { input, output, k } => {
            prov.input(input)?;
            let parsed = parse_pairs(input, cli.strict)?;
            report_skipped(&parsed, input);
            let top = subsample_topk(parsed.records, *k);
            for r in &top.rejected {
                eprintln!("warning: {r}");
            }
            write_jsonl(output, &top.kept)?;
            prov.output(output);
        }
        CorpusCmd::Fixture(args) => fixture(cli, args, &mut prov)?,
    }
    prov.finish()
}

fn fixture(cli: &Cli, args: &FixtureArgs, prov: &mut Provenance) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let out = |name: &str| args.out_dir.join(name);
    let n = args.n_docs;
    let (docs, pairs) = if let Some(spec_path) = &args.spec {
        prov.input(spec_path)?;
        let spec: FixtureSpec = read_json(spec_path)?;
        let fx = fixture_gen(&spec)?;
        (fx.interleaved, fx.pairs)
    } else {
        match args.kind.as_str() {
            "mmc4" | "coyo" => {
                let spec = if args.kind == "mmc4" {
                    FixtureSpec::mmc4_like(n, cli.seed)
                } else {
                    FixtureSpec::coyo_like(n, cli.seed)
                };
                let fx = fixture_gen(&spec)?;
                (fx.interleaved, fx.pairs)
            }
            "topic" => {
                let docs = topic_corpus(n, 3, cli.seed);
                let mut pairs = Vec::new();
                for d in &docs {
                    pairs.extend(to_pairs(d, PairPolicy::BestSim)?);
                }
                (docs, pairs)
            }
            other => bail!(vlmforge::Error::Config(format!("unknown fixture kind {other:?}"))),
        }
    };
    write_jsonl(&out("interleaved.jsonl"), &docs)?;
    write_jsonl(&out("pairs.jsonl"), &pairs)?;
    write_jsonl(&out("sft.jsonl"), class_demos(n, cli.seed))?;
    write_jsonl(&out("sft-text.jsonl"), arithmetic_demos(n, cli.seed))?;
    class_task(100, cli.seed).save(&out("task-class.jsonl"))?;
    parity_task(200, cli.seed).save(&out("task-parity.jsonl"))?;
    for name in [
        "interleaved.jsonl",
        "pairs.jsonl",
        "sft.jsonl",
        "sft-text.jsonl",
        "task-class.jsonl",
        "task-class.demos.jsonl",
        "task-parity.jsonl",
    ] {
        prov.output(&out(name));
    }
    Ok(())
}

fn pack(cli: &Cli, cmd: &PackCmd) -> Result<()> {
    let PackCmd::Run { docs, out, max_len, res, patch, downsample } = cmd;
    let mut prov = Provenance::new(cli);
    prov.input(docs)?;
    let geometry = SlotGeometry::new(*res, *patch, *downsample)?;
    let tok = Tokenizer::new();
    let mut samples = Vec::new();
    for doc in read_docs(docs, cli.strict)? {
        match pack_document(&doc, &tok, &geometry, *max_len) {
            Ok(s) => samples.extend(s),
            Err(e) if cli.strict => return Err(e.into()),
            Err(e) => eprintln!("warning: skipped {}: {e}", doc.doc_id),
        }
    }
    let n = write_shard(&samples, out, &tok, &geometry)?;
    eprintln!("{n} samples");
    prov.output(out);
    prov.finish()
}

fn load_corpora(cli: &Cli, args: &TrainArgs, prov: &mut Provenance) -> Result<Corpora> {
    let mut corpora = Corpora::new();
    if let Some(p) = &args.corpus_a {
        prov.input(p)?;
        corpora = corpora.with_docs(corpus_names::INTERLEAVED, read_docs(p, cli.strict)?);
    }
    if let Some(p) = &args.corpus_b {
        prov.input(p)?;
        let parsed = parse_pairs(p, cli.strict)?;
        report_skipped(&parsed, p);
        corpora = corpora.with_pairs(corpus_names::PAIRS, &parsed.records);
    }
    let n_demos = 512;
    let visual: Vec<SftDemo> = match &args.sft {
        Some(p) => {
            prov.input(p)?;
            read_json_lines(p, cli.strict)?
        }
        None => class_demos(n_demos, cli.seed),
    };
    let text: Vec<SftDemo> = match &args.sft_text {
        Some(p) => {
            prov.input(p)?;
            read_json_lines(p, cli.strict)?
        }
        None => arithmetic_demos(n_demos, cli.seed),
    };
    Ok(corpora
        .with_demos(corpus_names::SFT_VISUAL, visual)
        .with_demos(corpus_names::SFT_TEXT, text))
}

fn build_plan(args: &TrainArgs, prov: &mut Provenance) -> Result<StagePlan> {
    if let Some(p) = &args.plan {
        prov.input(p)?;
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        return Ok(StagePlan::from_json(&text)?);
    }
    let Some(preset) = &args.preset else {
        bail!(vlmforge::Error::Config("give --plan or --preset".into()));
    };
    let preset: Preset = preset.parse()?;
    let model = match &args.model {
        Some(p) => {
            prov.input(p)?;
            read_json::<ModelConfig>(p)?
        }
        None => ModelConfig::desk(),
    };
    let d = PresetBudget::default();
    let budget = PresetBudget {
        init_steps: args.init_steps.unwrap_or(d.init_steps),
        pretrain_steps: args.pretrain_steps.unwrap_or(d.pretrain_steps),
        sft_steps: args.sft_steps.unwrap_or(d.sft_steps),
        batch_size: args.batch_size.unwrap_or(d.batch_size),
        ..d
    };
    let plan = preset.plan(model, budget);
    plan.validate()?;
    Ok(plan)
}

fn train(cli: &Cli, cmd: &TrainCmd) -> Result<()> {
    let mut prov = Provenance::new(cli);
    match cmd {
        TrainCmd::Run(args) => {
            let plan = build_plan(args, &mut prov)?;
            let corpora = load_corpora(cli, args, &mut prov)?;
            std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
            let mut trainer = match &args.resume {
                Some(p) => {
                    prov.input(p)?;
                    Trainer::load_state(plan.clone(), cli.seed, p)?
                }
                None => Trainer::new(plan.clone(), cli.seed)?,
            };
            let plan_path = args.out.join("plan.json");
            std::fs::write(&plan_path, serde_json::to_string_pretty(&plan)?)?;
            prov.output(&plan_path);
            let result = trainer.run(&corpora, &SyntheticImages, args.max_steps);
            // The log is kept even when a step fails, so the failure can be located.
            let log_path = args.out.join("runlog.csv");
            trainer.log().write(&log_path)?;
            prov.output(&log_path);
            result?;
            if trainer.finished() {
                let ckpt = args.out.join("model.ckpt");
                save_checkpoint(trainer.model(), &ckpt)?;
                prov.output(&ckpt);
            } else {
                let state = args.out.join("train.state");
                trainer.save_state(&state)?;
                prov.output(&state);
            }
            eprintln!("{} steps", trainer.global_step());
        }
        TrainCmd::CompareLoss { a, b, window, out } => {
            prov.input(a)?;
            prov.input(b)?;
            let cmp = compare_loss_curves(&RunLog::read(a)?, &RunLog::read(b)?, *window)?;
            say(&format!(
                "aligned_steps={} mean_gap={:.6} final_window={} final_window_gap={:.6}",
                cmp.aligned_steps, cmp.mean_gap, cmp.final_window, cmp.final_window_gap
            ));
            match out {
                Some(o) => {
                    std::fs::write(o, cmp.to_csv()).with_context(|| format!("writing {}", o.display()))?;
                    prov.output(o);
                }
                None => return Ok(()),
            }
        }
    }
    prov.finish()
}

fn diag(cli: &Cli, cmd: &DiagCmd) -> Result<()> {
    let DiagCmd::Align { ckpt, shard, out, variant, limit } = cmd;
    let mut prov = Provenance::new(cli);
    prov.input(ckpt)?;
    prov.input(shard)?;
    let variant: ChamferVariant = variant.parse()?;
    let model = load_checkpoint(ckpt, None)?;
    let mut samples = read_shard(shard, &Tokenizer::new(), &model.config().geometry())?;
    if let Some(n) = limit {
        samples.truncate(*n);
    }
    let tag = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let profile = alignment_profile(&model, &samples, &SyntheticImages, variant, tag)?;
    std::fs::write(out, profile.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    prov.output(out);
    prov.finish()
}

fn eval(cli: &Cli, cmd: &EvalCmd) -> Result<()> {
    let EvalCmd::Run { ckpt, task, k, out } = cmd;
    let mut prov = Provenance::new(cli);
    prov.input(ckpt)?;
    prov.input(task)?;
    let model = load_checkpoint(ckpt, None)?;
    let task = EvalTask::load(task)?;
    let report = run_eval(&model, &task, &SyntheticImages, *k, cli.seed)?;
    say(&format!("{} k={} accuracy={:.4}", report.task, report.k, report.accuracy));
    std::fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    prov.output(out);
    prov.finish()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<vlmforge::Error>()) {
        Some(vlmforge::Error::NonFinite { .. }) => 3,
        Some(vlmforge::Error::Config(_)) => 1,
        _ => 2,
    }
}

/// Print a line to stdout; a closed pipe (e.g. `| head`) is not an error.
fn say(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.cmd {
        Cmd::Corpus(c) => corpus(&cli, c),
        Cmd::Pack(c) => pack(&cli, c),
        Cmd::Train(c) => train(&cli, c),
        Cmd::Diag(c) => diag(&cli, c),
        Cmd::Eval(c) => eval(&cli, c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
