use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use nocrek_core::knowledge::{read_definitions, read_definitions_file};
use nocrek_core::retrieval::ScoredTerm;
use nocrek_core::synthgen::{DEFINITIONS_FILE, SEEN_DEFINITIONS_FILE};
use nocrek_core::trainer::{
    evaluate_split, run_knowledge_scenarios, train_stage1_with, train_stage2_with, write_log,
};
use nocrek_core::{
    generate_world, load_checkpoint, save_checkpoint, Captioner, Checkpoint, KnowledgeStore, Scenario,
    Scene, StepLog, World,
};
use serde::Serialize;

use crate::config::{existing, write_json, CliConfig};
use crate::report::{now, sha256_file, Report};
use crate::{Cli, Command, DecodeArgs, Invalid, ModelInputs, Split, StageArg};

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt.json";
pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt.json";

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    if cli.out.is_some() {
        cfg.paths.out = cli.out.clone();
    }
    let ctx = Ctx {
        deterministic: cli.deterministic,
        seed: cli.seed,
    };
    match &cli.command {
        Command::GenData => gen_data(&ctx, cfg),
        Command::BuildKnowledge { data, definitions, all } => build_knowledge(&ctx, cfg, data, definitions, *all),
        Command::Train {
            data,
            knowledge,
            stage,
            checkpoint,
        } => train(&ctx, cfg, data, knowledge, *stage, checkpoint),
        Command::Retrieve {
            inputs,
            scene,
            split,
            k_vocab,
        } => retrieve(&ctx, cfg, inputs, *scene, *split, *k_vocab),
        Command::Caption {
            inputs,
            scene,
            split,
            decode,
        } => caption(&ctx, cfg, inputs, *scene, *split, decode),
        Command::Evaluate { inputs, split, decode } => evaluate(&ctx, cfg, inputs, *split, decode),
        Command::UpdateKnowledge { knowledge, add, remove } => update_knowledge(&ctx, cfg, knowledge, add, remove),
        Command::Scenarios {
            inputs,
            scenario,
            drop_percent,
            decode,
        } => scenarios(&ctx, cfg, inputs, scenario, *drop_percent, decode),
        Command::ExportEmbeddings { knowledge } => export_embeddings(cfg, knowledge),
    }
}

struct Ctx {
    deterministic: bool,
    seed: Option<u64>,
}

impl Ctx {
    fn emit<T: Serialize>(
        &self,
        command: &str,
        cfg: &CliConfig,
        store_revision: Option<u64>,
        checkpoint_sha256: Option<String>,
        result: T,
    ) -> anyhow::Result<()> {
        let report = Report {
            schema_version: crate::report::SCHEMA_VERSION,
            command,
            generated_at: now(self.deterministic),
            config: cfg,
            store_revision,
            checkpoint_sha256,
            result,
        };
        match &cfg.paths.out {
            Some(path) => write_json(path, &report),
            None => {
                let mut stdout = std::io::stdout().lock();
                serde_json::to_writer_pretty(&mut stdout, &report)?;
                writeln!(stdout)?;
                Ok(())
            }
        }
    }

    fn elapsed(&self, t: Instant) -> f64 {
        if self.deterministic {
            0.0
        } else {
            t.elapsed().as_secs_f64()
        }
    }
}

fn apply_decode(cfg: &mut CliConfig, d: &DecodeArgs) -> anyhow::Result<()> {
    let dc = &mut cfg.decode;
    dc.beam_size = d.beam.unwrap_or(dc.beam_size);
    dc.k_vocab = d.k_vocab.unwrap_or(dc.k_vocab);
    dc.min_constraints = d.min_constraints.unwrap_or(dc.min_constraints);
    dc.max_len = d.max_len.unwrap_or(dc.max_len);
    if dc.beam_size == 0 || dc.k_vocab == 0 || dc.max_len == 0 {
        return Err(Invalid("--beam, --k-vocab and --max-len must be positive".into()).into());
    }
    Ok(())
}

fn read_world(dir: &Path) -> anyhow::Result<World> {
    World::read_from(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn load_store(path: &Path) -> anyhow::Result<KnowledgeStore> {
    KnowledgeStore::load(path).with_context(|| format!("loading knowledge {}", path.display()))
}

/// Checkpoint, store and dataset named by the common input flags.
struct Loaded {
    checkpoint: Checkpoint,
    checkpoint_sha: String,
    store: KnowledgeStore,
    world: World,
}

fn load_inputs(cfg: &mut CliConfig, inputs: &ModelInputs) -> anyhow::Result<Loaded> {
    let ckpt_path = existing(&inputs.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let store_path = existing(&inputs.knowledge, &cfg.paths.knowledge, "knowledge")?;
    let data = existing(&inputs.data, &cfg.paths.data, "data")?;
    cfg.paths.checkpoint = Some(ckpt_path.clone());
    cfg.paths.knowledge = Some(store_path.clone());
    cfg.paths.data = Some(data.clone());
    let checkpoint = load_checkpoint(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    Ok(Loaded {
        checkpoint_sha: sha256_file(&ckpt_path)?,
        checkpoint,
        store: load_store(&store_path)?,
        world: read_world(&data)?,
    })
}

fn find_scene(world: &World, id: u64, split: Option<Split>) -> anyhow::Result<(Split, &Scene)> {
    let splits = [
        (Split::Train, &world.train),
        (Split::TestSeen, &world.test_seen),
        (Split::TestNovel, &world.test_novel),
    ];
    splits
        .into_iter()
        .filter(|(s, _)| split.map_or(true, |want| want == *s))
        .find_map(|(s, scenes)| scenes.iter().find(|sc| sc.scene_id == id).map(|sc| (s, sc)))
        .ok_or_else(|| Invalid(format!("no scene with id {id}")).into())
}

#[derive(Serialize)]
struct GenDataResult {
    out: PathBuf,
    n_classes: usize,
    n_distractors: usize,
    train: usize,
    test_seen: usize,
    test_novel: usize,
    vocab_size: usize,
}

fn gen_data(ctx: &Ctx, mut cfg: CliConfig) -> anyhow::Result<()> {
    if let Some(s) = ctx.seed {
        cfg.world.seed = s;
    }
    let out = cfg
        .paths
        .out
        .take()
        .ok_or_else(|| Invalid("--out DIR is required".into()))?;
    let world = generate_world(&cfg.world)?;
    world.write_to(&out)?;
    cfg.paths.data = Some(out.clone());
    let result = GenDataResult {
        out,
        n_classes: world.classes.len(),
        n_distractors: world.distractors.len(),
        train: world.train.len(),
        test_seen: world.test_seen.len(),
        test_novel: world.test_novel.len(),
        vocab_size: world.vocab.len(),
    };
    ctx.emit("gen-data", &cfg, None, None, result)
}

#[derive(Serialize)]
struct StoreResult {
    output: PathBuf,
    store_size: usize,
    dimension: usize,
    terms: Vec<String>,
}

fn build_knowledge(
    ctx: &Ctx,
    mut cfg: CliConfig,
    data: &Option<PathBuf>,
    definitions: &Option<PathBuf>,
    all: bool,
) -> anyhow::Result<()> {
    let source = match definitions {
        Some(p) => p.clone(),
        None => {
            let dir = existing(data, &cfg.paths.data, "data")?;
            cfg.paths.data = Some(dir.clone());
            dir.join(if all { DEFINITIONS_FILE } else { SEEN_DEFINITIONS_FILE })
        }
    };
    if !source.exists() {
        return Err(Invalid(format!("definitions {} do not exist", source.display())).into());
    }
    let out = cfg
        .paths
        .out
        .take()
        .ok_or_else(|| Invalid("--out FILE is required".into()))?;
    let (dimension, records) = read_definitions_file(&source)?;
    let store = KnowledgeStore::from_records(dimension, records)?;
    write_store(&store, &out)?;
    cfg.paths.knowledge = Some(out.clone());
    let result = StoreResult {
        output: out,
        store_size: store.len(),
        dimension,
        terms: store.terms().map(str::to_string).collect(),
    };
    ctx.emit("build-knowledge", &cfg, Some(store.revision()), None, result)
}

fn write_store(store: &KnowledgeStore, path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    store.save(path)?;
    Ok(())
}

#[derive(Serialize)]
struct StageSummary {
    stage: u8,
    epochs: usize,
    steps: usize,
    /// Mean step losses over the last epoch.
    final_loss_h: f64,
    final_loss_g: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_reward: Option<f64>,
    checkpoint: PathBuf,
    checkpoint_sha256: String,
    log: PathBuf,
    elapsed_secs: f64,
}

fn summarize(log: &[StepLog]) -> (usize, f64, f64, Option<f64>) {
    let last = log.last().map_or(0, |s| s.epoch);
    let tail: Vec<&StepLog> = log.iter().filter(|s| s.epoch == last).collect();
    let n = tail.len().max(1) as f64;
    let h = tail.iter().map(|s| s.loss_h).sum::<f64>() / n;
    let g = tail.iter().map(|s| s.loss_g).sum::<f64>() / n;
    let rewards: Vec<f64> = tail.iter().filter_map(|s| s.reward).collect();
    let r = (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / rewards.len() as f64);
    (log.len(), h, g, r)
}

fn train(
    ctx: &Ctx,
    mut cfg: CliConfig,
    data: &Option<PathBuf>,
    knowledge: &Option<PathBuf>,
    stage: StageArg,
    checkpoint: &Option<PathBuf>,
) -> anyhow::Result<()> {
    if let Some(s) = ctx.seed {
        cfg.train.seed = s;
    }
    let data = existing(data, &cfg.paths.data, "data")?;
    let store_path = existing(knowledge, &cfg.paths.knowledge, "knowledge")?;
    let out = cfg
        .paths
        .out
        .take()
        .ok_or_else(|| Invalid("--out DIR is required".into()))?;
    cfg.paths.data = Some(data.clone());
    cfg.paths.knowledge = Some(store_path.clone());
    let world = read_world(&data)?;
    let store = load_store(&store_path)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut summaries = Vec::new();
    let stage1 = match stage {
        StageArg::Two => {
            let p = existing(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            cfg.paths.checkpoint = Some(p.clone());
            load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))?
        }
        StageArg::One | StageArg::All => {
            let t = Instant::now();
            let epochs = cfg.train.stage1.epochs;
            let outcome = train_stage1_with(&world.train, &world.vocabulary(), &store, &cfg.train, &mut |e, _| {
                eprintln!("stage 1 epoch {}/{epochs}", e + 1)
            })?;
            summaries.push(save_stage(ctx, &out, 1, &outcome.checkpoint, &outcome.log, t)?);
            outcome.checkpoint
        }
    };
    if stage != StageArg::One {
        let t = Instant::now();
        let epochs = cfg.train.stage2.epochs;
        let outcome = train_stage2_with(&stage1, &world.train, &store, &cfg.train, &mut |e, _| {
            eprintln!("stage 2 epoch {}/{epochs}", e + 1)
        })?;
        summaries.push(save_stage(ctx, &out, 2, &outcome.checkpoint, &outcome.log, t)?);
    }
    let final_sha = summaries.last().map(|s| s.checkpoint_sha256.clone());
    cfg.paths.out = Some(out.join("train_report.json"));
    ctx.emit("train", &cfg, Some(store.revision()), final_sha, summaries)
}

fn save_stage(
    ctx: &Ctx,
    out: &Path,
    stage: u8,
    ckpt: &Checkpoint,
    log: &[StepLog],
    started: Instant,
) -> anyhow::Result<StageSummary> {
    let path = out.join(if stage == 1 { STAGE1_CHECKPOINT } else { STAGE2_CHECKPOINT });
    let log_path = out.join(format!("stage{stage}_log.jsonl"));
    save_checkpoint(&path, ckpt)?;
    write_log(&log_path, log)?;
    let (steps, h, g, r) = summarize(log);
    Ok(StageSummary {
        stage,
        epochs: ckpt.epoch,
        steps,
        final_loss_h: h,
        final_loss_g: g,
        final_reward: r,
        checkpoint_sha256: sha256_file(&path)?,
        checkpoint: path,
        log: log_path,
        elapsed_secs: ctx.elapsed(started),
    })
}

#[derive(Serialize)]
struct RegionRow {
    region: usize,
    term: String,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

#[derive(Serialize)]
struct RetrieveResult {
    scene_id: u64,
    split: String,
    regions: Vec<RegionRow>,
    top_vocab: Vec<ScoredTerm>,
}

fn split_name(s: Split) -> String {
    match s {
        Split::Train => "train",
        Split::TestSeen => "test-seen",
        Split::TestNovel => "test-novel",
    }
    .to_string()
}

fn retrieve(
    ctx: &Ctx,
    mut cfg: CliConfig,
    inputs: &ModelInputs,
    id: u64,
    split: Option<Split>,
    k_vocab: Option<usize>,
) -> anyhow::Result<()> {
    apply_decode(
        &mut cfg,
        &DecodeArgs {
            k_vocab,
            ..Default::default()
        },
    )?;
    let l = load_inputs(&mut cfg, inputs)?;
    let (split, scene) = find_scene(&l.world, id, split)?;
    let captioner = Captioner::new(&l.checkpoint.params, &l.store, &l.checkpoint.vocab)?;
    let r = captioner.retrieve(&scene.rois, cfg.decode.k_vocab)?;
    let regions = r
        .per_region
        .iter()
        .enumerate()
        .map(|(j, t)| RegionRow {
            region: j,
            term: t.term.clone(),
            score: t.score,
            label: scene.labels.get(j).cloned().flatten(),
        })
        .collect();
    let result = RetrieveResult {
        scene_id: id,
        split: split_name(split),
        regions,
        top_vocab: r.top_vocab,
    };
    ctx.emit("retrieve", &cfg, Some(l.store.revision()), Some(l.checkpoint_sha), result)
}

#[derive(Serialize)]
struct CaptionResult {
    scene_id: u64,
    split: String,
    /// Caption followed by the retrieved vocabulary in parentheses.
    display: String,
    caption: String,
    top_vocab: Vec<ScoredTerm>,
    constraints: Vec<String>,
    satisfied: Vec<String>,
    fallback: bool,
    logprob: f64,
    references: Vec<String>,
}

fn caption(
    ctx: &Ctx,
    mut cfg: CliConfig,
    inputs: &ModelInputs,
    id: u64,
    split: Option<Split>,
    decode: &DecodeArgs,
) -> anyhow::Result<()> {
    apply_decode(&mut cfg, decode)?;
    let l = load_inputs(&mut cfg, inputs)?;
    let (split, scene) = find_scene(&l.world, id, split)?;
    let captioner = Captioner::new(&l.checkpoint.params, &l.store, &l.checkpoint.vocab)?;
    let c = captioner.generate(&scene.rois, &cfg.decode)?;
    let text = c.words.join(" ");
    let vocab: Vec<&str> = c.retrieval.top_vocab.iter().map(|t| t.term.as_str()).collect();
    let satisfied = c
        .constraints
        .iter()
        .enumerate()
        .filter(|(i, _)| c.satisfied & (1 << i) != 0)
        .map(|(_, t)| t.clone())
        .collect();
    let result = CaptionResult {
        scene_id: id,
        split: split_name(split),
        display: format!("{text} ({})", vocab.join(", ")),
        caption: text,
        top_vocab: c.retrieval.top_vocab.clone(),
        constraints: c.constraints.clone(),
        satisfied,
        fallback: c.fallback,
        logprob: c.logprob,
        references: scene.references.iter().map(|r| r.join(" ")).collect(),
    };
    ctx.emit("caption", &cfg, Some(l.store.revision()), Some(l.checkpoint_sha), result)
}

fn evaluate(
    ctx: &Ctx,
    mut cfg: CliConfig,
    inputs: &ModelInputs,
    split: Split,
    decode: &DecodeArgs,
) -> anyhow::Result<()> {
    apply_decode(&mut cfg, decode)?;
    let l = load_inputs(&mut cfg, inputs)?;
    let (scenes, classes) = match split {
        Split::Train => (&l.world.train, l.world.seen_classes()),
        Split::TestSeen => (&l.world.test_seen, l.world.seen_classes()),
        Split::TestNovel => (&l.world.test_novel, l.world.novel_classes()),
    };
    let eval = evaluate_split(
        &l.checkpoint.params,
        &l.checkpoint.vocab,
        &l.store,
        scenes,
        &cfg.decode,
        &classes,
    )?;
    #[derive(Serialize)]
    struct EvaluateResult {
        split: String,
        #[serde(flatten)]
        eval: nocrek_core::Evaluation,
    }
    let result = EvaluateResult {
        split: split_name(split),
        eval,
    };
    ctx.emit("evaluate", &cfg, Some(l.store.revision()), Some(l.checkpoint_sha), result)
}

#[derive(Serialize)]
struct UpdateResult {
    input: PathBuf,
    output: PathBuf,
    previous_revision: u64,
    added: Vec<String>,
    removed: Vec<String>,
    store_size: usize,
}

/// `<stem>.rev<N>.<ext>` next to the input.
fn revision_path(input: &Path, revision: u64) -> PathBuf {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("knowledge");
    let stem = match stem.rsplit_once(".rev") {
        Some((base, n)) if n.chars().all(|c| c.is_ascii_digit()) => base,
        _ => stem,
    };
    let ext = input.extension().and_then(|s| s.to_str()).unwrap_or("jsonl");
    input.with_file_name(format!("{stem}.rev{revision}.{ext}"))
}

fn update_knowledge(
    ctx: &Ctx,
    mut cfg: CliConfig,
    knowledge: &Option<PathBuf>,
    add: &Option<PathBuf>,
    remove: &[String],
) -> anyhow::Result<()> {
    let input = existing(knowledge, &cfg.paths.knowledge, "knowledge")?;
    if add.is_none() && remove.is_empty() {
        return Err(Invalid("nothing to do: pass --add and/or --remove".into()).into());
    }
    let mut store = load_store(&input)?;
    let previous = store.revision();
    let mut added = Vec::new();
    if let Some(path) = add {
        if !path.exists() {
            return Err(Invalid(format!("--add {} does not exist", path.display())).into());
        }
        let records = read_definitions(path, store.dimension())?;
        added = records.iter().map(|r| r.term.clone()).collect();
        store.add_records(records)?;
    }
    if !remove.is_empty() {
        store.remove_entries(remove)?;
    }
    let output = cfg
        .paths
        .out
        .take()
        .unwrap_or_else(|| revision_path(&input, store.revision()));
    let same = match (input.canonicalize(), output.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Err(Invalid("refusing to overwrite the input store; pick another --out".into()).into());
    }
    write_store(&store, &output)?;
    cfg.paths.knowledge = Some(output.clone());
    let result = UpdateResult {
        input,
        output,
        previous_revision: previous,
        added,
        removed: remove.to_vec(),
        store_size: store.len(),
    };
    ctx.emit("update-knowledge", &cfg, Some(store.revision()), None, result)
}

fn scenarios(
    ctx: &Ctx,
    mut cfg: CliConfig,
    inputs: &ModelInputs,
    names: &[String],
    drop_percent: Option<u32>,
    decode: &DecodeArgs,
) -> anyhow::Result<()> {
    apply_decode(&mut cfg, decode)?;
    if let Some(s) = ctx.seed {
        cfg.train.seed = s;
    }
    let mut list = names
        .iter()
        .map(|n| Scenario::parse(n.trim()).map_err(|e| Invalid(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(p) = drop_percent {
        if p > 100 {
            return Err(Invalid("--drop-percent must be at most 100".into()).into());
        }
        list.push(Scenario::DropPercent(p));
    }
    let l = load_inputs(&mut cfg, inputs)?;
    let reports = run_knowledge_scenarios(
        &l.checkpoint.params,
        &l.checkpoint.vocab,
        &l.store,
        &l.world.seen_classes(),
        &l.world.novel_classes(),
        &l.world.test_seen,
        &l.world.test_novel,
        &list,
        &cfg.decode,
        cfg.train.seed,
    )?;
    ctx.emit("scenarios", &cfg, Some(l.store.revision()), Some(l.checkpoint_sha), reports)
}

fn export_embeddings(cfg: CliConfig, knowledge: &Option<PathBuf>) -> anyhow::Result<()> {
    let path = existing(knowledge, &cfg.paths.knowledge, "knowledge")?;
    let store = load_store(&path)?;
    match &cfg.paths.out {
        Some(out) => {
            let f = std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
            let mut w = std::io::BufWriter::new(f);
            store.export_csv(&mut w)?;
            w.flush()?;
        }
        None => store.export_csv(std::io::stdout().lock())?,
    }
    Ok(())
}
