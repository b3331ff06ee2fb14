use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use slidelm::config::RunConfig;
use slidelm::corpus::{embed_manifest, gen_corpus, Corpus, Split, KEYWORDS, MANIFEST_FILE};
use slidelm::embed::{assemble_all, read_store, write_store, SpecimenBag, MAX_TILES_PER_SPECIMEN};
use slidelm::eval::{fine_tune, generate_report, InitMode, PromptSet};
use slidelm::model::Model;
use slidelm::pipeline::{
    check_checkpoint, check_corpus, new_trainer, pretrain, probe_comparison, slide_embeddings,
    transfer_harness, zero_shot_eval,
};
use slidelm::selftest;
use slidelm::tiling::{read_manifest, tile_slide, write_manifest, ManifestEntry, SlideImage};
use slidelm::train::{write_metrics, Checkpoint, Metrics};
use slidelm::ParamStore;

#[derive(Parser)]
#[command(
    name = "slidelm",
    version,
    about = "Slide-level vision-language model on tile-embedding bags"
)]
struct Cli {
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true, env = "SLIDELM_SEED")]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "SLIDELM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tile a slide image and append the kept tiles to a manifest.
    Tile(TileArgs),
    /// Embed the tiles of a manifest into an embedding store.
    Embed(EmbedArgs),
    /// Generate the synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Pretrain (or resume pretraining) on a corpus.
    Train(TrainArgs),
    /// Greedy report generation.
    Generate(GenerateArgs),
    /// Zero-shot classification against a prompt file.
    Zeroshot(ZeroshotArgs),
    /// Linear probe on the transfer task, pretrained versus random init.
    Linprobe(EvalArgs),
    /// Fine-tune on the transfer task.
    Finetune(FinetuneArgs),
    /// Label-efficiency harness on the transfer task.
    SubsetHarness(EvalArgs),
    /// Write slide embeddings as JSON lines.
    ExportEmbeddings(ExportArgs),
    /// Run the built-in invariant suite.
    Selftest,
}

#[derive(Args)]
struct TileArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    slide_id: String,
    #[arg(long)]
    specimen_id: Option<String>,
    /// Concept id recorded on every kept tile.
    #[arg(long)]
    concept: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    mpp: f64,
    #[arg(long)]
    out: PathBuf,
    /// Extend an existing manifest instead of replacing it.
    #[arg(long)]
    append: bool,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint written at the end (and at every `--save-every`).
    #[arg(long)]
    out: PathBuf,
    /// Metrics JSON lines; appended to when resuming.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    save_every: Option<u64>,
    /// Stop after this optimizer step without changing the schedule.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
    TransferTrain,
    TransferTest,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Heldout => Split::Heldout,
            SplitArg::TransferTrain => Split::TransferTrain,
            SplitArg::TransferTest => Split::TransferTest,
        }
    }
}

/// Specimens from a corpus split, or from a bare store plus manifest.
#[derive(Args)]
struct Source {
    #[arg(long, conflicts_with_all = ["store", "manifest"])]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "heldout")]
    split: SplitArg,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Defaults to `manifest.jsonl` beside the store.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ZeroshotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Pretrained,
    Scratch,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_enum, default_value = "pretrained")]
    init: InitArg,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    source: Source,
    /// Export unit-norm contrastive projections instead of slide embeddings.
    #[arg(long)]
    projected: bool,
    #[arg(long)]
    out: PathBuf,
}

struct Loaded {
    bags: Vec<(String, SpecimenBag, Option<usize>)>,
    corpus_digest: String,
    /// Labels are concept ids (as opposed to transfer classes).
    concept_labels: bool,
}

impl Loaded {
    fn keyword(&self, label: Option<usize>) -> Option<String> {
        label
            .filter(|_| self.concept_labels)
            .and_then(|l| KEYWORDS.get(l))
            .map(|k| k.to_string())
    }
}

impl Source {
    fn load(&self) -> anyhow::Result<Loaded> {
        if let Some(dir) = &self.corpus {
            let corpus = Corpus::load(dir)?;
            let mut bags = corpus.bags()?;
            let split = Split::from(self.split);
            let picked = corpus
                .split(split)
                .map(|s| {
                    let bag = bags
                        .remove(&s.specimen_id)
                        .with_context(|| format!("no tiles for specimen {}", s.specimen_id))?;
                    Ok((s.specimen_id.clone(), bag, Some(s.label)))
                })
                .collect::<anyhow::Result<_>>()?;
            return Ok(Loaded {
                bags: picked,
                corpus_digest: corpus.digest,
                concept_labels: matches!(split, Split::Train | Split::Heldout),
            });
        }
        let Some(store_path) = &self.store else {
            bail!(slidelm::Error::InvalidArgument(
                "pass --corpus or --store".into()
            ));
        };
        let store = read_store(store_path)?;
        let manifest_path = self.manifest.clone().unwrap_or_else(|| {
            store_path
                .parent()
                .unwrap_or(Path::new("."))
                .join(MANIFEST_FILE)
        });
        let entries = read_manifest(&manifest_path)?;
        let bags = assemble_all(&entries, &store, MAX_TILES_PER_SPECIMEN)?
            .into_iter()
            .map(|b| (b.specimen_id.clone(), b, None))
            .collect();
        Ok(Loaded {
            bags,
            corpus_digest: store.digest,
            concept_labels: false,
        })
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(p) = out {
        std::fs::write(p, format!("{text}\n"))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    say(&format!("{text}\n"))
}

/// Writes to stdout, treating a closed pipe as success.
fn say(text: &str) -> anyhow::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_model(
    ckpt_path: &Path,
    corpus_digest: &str,
) -> anyhow::Result<(Checkpoint, Model, ParamStore<f32>)> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    check_corpus(&ckpt, corpus_digest)?;
    let (model, store) = ckpt.model()?;
    Ok((ckpt, model, store))
}

fn cmd_tile(a: &TileArgs) -> anyhow::Result<()> {
    let img = SlideImage::open(&a.image, a.mpp)?;
    let tiles = tile_slide(&a.slide_id, &img);
    let mut entries = if a.append && a.out.exists() {
        read_manifest(&a.out)?
    } else {
        Vec::new()
    };
    let kept = tiles.len();
    entries.extend(tiles.into_iter().map(|t| ManifestEntry {
        tile: t,
        specimen_id: a.specimen_id.clone(),
        concept: a.concept,
    }));
    write_manifest(&a.out, &entries)?;
    emit(
        &json!({"slide_id": a.slide_id, "kept_tiles": kept, "manifest_entries": entries.len()}),
        None,
    )
}

fn cmd_embed(a: &EmbedArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let entries = read_manifest(&a.manifest)?;
    let store = embed_manifest(&cfg, &entries)?;
    write_store(&a.out, &store)?;
    emit(
        &json!({"tiles": store.len(), "dim": store.dim(), "corpus_digest": store.digest}),
        None,
    )
}

fn cmd_gen_corpus(a: &GenCorpusArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let corpus = gen_corpus(&cfg)?;
    corpus.save(&a.out)?;
    let counts: std::collections::BTreeMap<String, usize> = [
        Split::Train,
        Split::Heldout,
        Split::TransferTrain,
        Split::TransferTest,
    ]
    .into_iter()
    .map(|s| {
        (
            serde_json::to_value(s)
                .expect("split")
                .as_str()
                .unwrap_or_default()
                .to_string(),
            corpus.split(s).count(),
        )
    })
    .collect();
    emit(
        &json!({
            "corpus_digest": corpus.digest,
            "specimens": counts,
            "tiles": corpus.store.len(),
            "report_strings": corpus.reports.iter().map(|r| r.rewrites.len()).sum::<usize>(),
            "vocab_size": corpus.vocab.len(),
        }),
        None,
    )
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let corpus = Corpus::load(&a.corpus)?;
    corpus.check_config(&cfg)?;
    let bags = corpus.bags()?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            check_checkpoint(&ckpt, &cfg)?;
            check_corpus(&ckpt, &corpus.digest)?;
            ckpt.resume()?
        }
        None => new_trainer(&cfg, &corpus.vocab)?,
    };
    let digest = cfg.digest();
    let stop = a.stop_after.unwrap_or(cfg.steps).min(cfg.steps);
    let mut all: Vec<Metrics> = Vec::new();
    while trainer.step < stop {
        let next = match a.save_every {
            Some(k) if k > 0 => ((trainer.step / k + 1) * k).min(stop),
            _ => stop,
        };
        all.extend(pretrain(&mut trainer, &corpus, &bags, next, |m| {
            eprintln!(
                "step {} lr {:.3e} l_con {:.4} l_rep {:.4} l_tot {:.4} grad_norm {:.3}",
                m.step, m.lr, m.l_con, m.l_rep, m.l_tot, m.grad_norm
            )
        })?);
        Checkpoint::from_trainer(&trainer, &corpus.vocab, &digest, &corpus.digest).save(&a.out)?;
    }
    if trainer.step == 0 || all.is_empty() {
        Checkpoint::from_trainer(&trainer, &corpus.vocab, &digest, &corpus.digest).save(&a.out)?;
    }
    if let Some(p) = &a.metrics {
        let mut previous = if a.resume.is_some() && p.exists() {
            std::fs::read_to_string(p)?
        } else {
            String::new()
        };
        let tmp = p.with_extension("tmp");
        write_metrics(&tmp, &all)?;
        previous.push_str(&std::fs::read_to_string(&tmp)?);
        std::fs::remove_file(&tmp)?;
        std::fs::write(p, previous)?;
    }
    let last = all.last();
    emit(
        &json!({
            "config_digest": digest,
            "corpus_digest": corpus.digest,
            "step": trainer.step,
            "l_tot": last.map(|m| m.l_tot),
            "tau": trainer.model.tau(&trainer.store),
        }),
        None,
    )
}

fn cmd_generate(a: &GenerateArgs) -> anyhow::Result<()> {
    let src = a.source.load()?;
    let (ckpt, model, store) = load_model(&a.ckpt, &src.corpus_digest)?;
    let mut records = Vec::new();
    let mut hits = 0usize;
    for (id, bag, label) in &src.bags {
        let g = generate_report(&model, &store, &ckpt.vocab, &bag.embeddings, a.max_len)?;
        let keyword = src.keyword(*label);
        if let Some(k) = &keyword {
            hits += usize::from(slidelm::text::split_words(&g.text).iter().any(|w| w == k));
        }
        records.push(json!({"specimen_id": id, "text": g.text, "truncated": g.truncated, "keyword": keyword}));
    }
    let labelled = src.bags.iter().all(|(_, _, l)| src.keyword(*l).is_some());
    let rate = (labelled && !records.is_empty()).then(|| hits as f64 / records.len() as f64);
    emit(
        &json!({"config_digest": ckpt.config_digest, "keyword_rate": rate, "records": records}),
        a.out.as_deref(),
    )
}

fn cmd_zeroshot(a: &ZeroshotArgs) -> anyhow::Result<()> {
    let src = a.source.load()?;
    let (ckpt, model, store) = load_model(&a.ckpt, &src.corpus_digest)?;
    let prompts = PromptSet::load(&a.prompts)?;
    let specimens: Vec<_> = src
        .bags
        .iter()
        .map(|(id, bag, label)| (id.as_str(), bag, src.keyword(*label)))
        .collect();
    let report = zero_shot_eval(
        &model,
        &store,
        &ckpt.vocab,
        &prompts,
        &specimens,
        &ckpt.config_digest,
    )?;
    emit(&report, a.out.as_deref())
}

struct EvalContext {
    cfg: RunConfig,
    corpus: Corpus,
    bags: HashMap<String, SpecimenBag>,
    model: Model,
    store: ParamStore<f32>,
}

fn eval_context(a: &EvalArgs, seed: Option<u64>) -> anyhow::Result<EvalContext> {
    let cfg = load_config(&a.config, seed)?;
    let corpus = Corpus::load(&a.corpus)?;
    corpus.check_config(&cfg)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    check_checkpoint(&ckpt, &cfg)?;
    check_corpus(&ckpt, &corpus.digest)?;
    let (model, store) = ckpt.model()?;
    let bags = corpus.bags()?;
    Ok(EvalContext {
        cfg,
        corpus,
        bags,
        model,
        store,
    })
}

fn cmd_linprobe(a: &EvalArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let c = eval_context(a, seed)?;
    let r = probe_comparison(&c.cfg, &c.model, &c.store, &c.corpus, &c.bags)?;
    emit(&r, a.out.as_deref())
}

fn cmd_finetune(a: &FinetuneArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let c = eval_context(&a.eval, seed)?;
    let train = c.corpus.transfer_bags(&c.bags, Split::TransferTrain)?;
    let test = c.corpus.transfer_bags(&c.bags, Split::TransferTest)?;
    let (mode, name) = match a.init {
        InitArg::Pretrained => (InitMode::Pretrained, "pretrained"),
        InitArg::Scratch => (InitMode::Scratch, "scratch"),
    };
    let pretrained = matches!(mode, InitMode::Pretrained).then_some(&c.store);
    let auroc = fine_tune(
        c.cfg.encoder_config(),
        pretrained,
        mode,
        &train,
        &test,
        &c.cfg.finetune_config(),
        c.cfg.seed,
    )?;
    emit(
        &json!({"config_digest": c.cfg.digest(), "init": name, "heldout_auroc": auroc}),
        a.eval.out.as_deref(),
    )
}

fn cmd_subset_harness(a: &EvalArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let c = eval_context(a, seed)?;
    let report = transfer_harness(&c.cfg, &c.store, &c.corpus, &c.bags)?;
    if let Some(p) = &a.out {
        let body = json!({"config_digest": c.cfg.digest(), "report": report});
        std::fs::write(p, format!("{}\n", serde_json::to_string_pretty(&body)?))?;
    }
    say(&report.table())
}

fn cmd_export(a: &ExportArgs) -> anyhow::Result<()> {
    let src = a.source.load()?;
    let (ckpt, model, store) = load_model(&a.ckpt, &src.corpus_digest)?;
    let mut lines = String::new();
    for (id, bag, label) in &src.bags {
        let embedding = if a.projected {
            slidelm::eval::embed_slide(&model, &store, &bag.embeddings)?
        } else {
            slide_embeddings(&model, &store, &[bag])?.remove(0)
        };
        let rec = json!({
            "specimen_id": id,
            "label": label,
            "config_digest": ckpt.config_digest,
            "embedding": embedding,
        });
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    std::fs::write(&a.out, lines)?;
    emit(&json!({"specimens": src.bags.len(), "out": a.out}), None)
}

fn cmd_selftest() -> anyhow::Result<()> {
    let outcomes = selftest::run_all();
    let mut failed = 0;
    for o in &outcomes {
        say(&format!(
            "{} {} ({:.2}s): {}\n",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.seconds,
            o.detail
        ))?;
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        bail!(slidelm::Error::InvalidArgument(format!(
            "{failed} self-test check(s) failed"
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let seed = cli.seed;
    match &cli.command {
        Command::Tile(a) => cmd_tile(a),
        Command::Embed(a) => cmd_embed(a, seed),
        Command::GenCorpus(a) => cmd_gen_corpus(a, seed),
        Command::Train(a) => cmd_train(a, seed),
        Command::Generate(a) => cmd_generate(a),
        Command::Zeroshot(a) => cmd_zeroshot(a),
        Command::Linprobe(a) => cmd_linprobe(a, seed),
        Command::Finetune(a) => cmd_finetune(a, seed),
        Command::SubsetHarness(a) => cmd_subset_harness(a, seed),
        Command::ExportEmbeddings(a) => cmd_export(a),
        Command::Selftest => cmd_selftest(),
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<slidelm::Error>().map(slidelm::Error::kind))
        .or_else(|| {
            e.chain()
                .find_map(|c| c.downcast_ref::<std::io::Error>().map(|_| "io"))
        })
        .unwrap_or("other")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rec = json!({"error": e.kind().to_string(), "kind": "usage", "detail": e.to_string().trim()});
            eprintln!("{rec}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let rec = json!({"error": format!("{e:#}"), "kind": error_kind(&e)});
            eprintln!("{rec}");
            ExitCode::FAILURE
        }
    }
}
