//! Two-stage training, evaluation and knowledge-edit scenarios.
//!
//! Stage 1 minimizes the retrieval loss plus masked cross-entropy. Stage 2
//! keeps the retrieval loss and replaces cross-entropy with a self-critical
//! policy gradient whose reward is CIDEr plus a bonus per retrieved term the
//! sampled caption mentions.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::captioner::{sample_caption, greedy, Captioner, DecodeConfig};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeStore;
use crate::losses::{hungarian_loss, masked_ce_loss, scst_gradient, scst_reward};
use crate::matching::{expand_targets, hungarian, matching_cost_matrix};
use crate::metrics::{cider, mentions, normalize_tokens, CiderScorer, EvalReport, ScoredScene};
use crate::model::{
    clip_global_norm, forward_generation, forward_retrieval, image_memory, mask_words,
    optimizer_step, Activation, AdamState, AdamW, Checkpoint, Decoder, Lexicon, MaskedWords, ModelConfig,
    ModelParams, TagInput,
};
use crate::retrieval::{region_features, retrieve_with_k, RetrievalResult};
use crate::synthgen::Scene;
use crate::tensor::{log_softmax, Matrix};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

/// Encoder sizes; the vocabulary, ROI and knowledge sizes come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_words: usize,
    pub max_tags: usize,
    /// Learned position encodings on ROI slots.
    pub roi_positions: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub zero_init_residual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelShape,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Weight of the retrieved-vocabulary bonus in the stage-2 reward.
    pub alpha: f64,
    /// Sampling temperature for stage-2 captions.
    pub temperature: f64,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Small-scale schedule used for the reference runs.
    pub fn desk() -> Self {
        TrainConfig {
            seed: 17,
            model: ModelShape {
                d_model: 64,
                n_heads: 2,
                n_layers: 1,
                d_ff: 2,
                max_words: 20,
                max_tags: 4,
                roi_positions: false,
                activation: Activation::Gelu,
                zero_init_residual: true,
            },
            stage1: StageConfig {
                lr: 3e-3,
                batch_size: 16,
                epochs: 80,
                weight_decay: 0.01,
                clip_norm: 5.0,
            },
            stage2: StageConfig {
                lr: 1e-4,
                batch_size: 16,
                epochs: 8,
                weight_decay: 0.01,
                clip_norm: 5.0,
            },
            alpha: crate::losses::DEFAULT_ALPHA,
            temperature: 1.0,
            decode: DecodeConfig::default(),
        }
    }

    /// Full-scale schedule (3e-5 / 128 / 30, then 8e-7 / 6 / 25) with the
    /// full-scale sequence sizes.
    pub fn full_scale() -> Self {
        let desk = TrainConfig::desk();
        TrainConfig {
            model: ModelShape {
                max_words: 35,
                max_tags: 20,
                ..desk.model
            },
            stage1: StageConfig {
                lr: 3e-5,
                batch_size: 128,
                epochs: 30,
                ..desk.stage1
            },
            stage2: StageConfig {
                lr: 8e-7,
                batch_size: 6,
                epochs: 25,
                ..desk.stage2
            },
            decode: DecodeConfig {
                max_len: 35,
                ..desk.decode
            },
            ..desk
        }
    }

    pub fn model_config(&self, vocab: &Vocabulary, n_rois: usize, roi_dim: usize, knowledge_dim: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            n_layers: self.model.n_layers,
            d_ff: self.model.d_ff,
            word_vocab_size: vocab.len(),
            max_words: self.model.max_words,
            max_tags: self.model.max_tags,
            n_rois,
            roi_dim,
            knowledge_dim,
            roi_positions: self.model.roi_positions,
            activation: self.model.activation,
            zero_init_residual: self.model.zero_init_residual,
        }
    }
}

/// One optimizer step. `loss_h + loss_g` is the step objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub loss_h: f64,
    pub loss_g: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

pub fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in log {
        let line = serde_json::to_string(s).map_err(|e| Error::json("training log", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct SceneGrads {
    grads: Vec<Matrix>,
    loss_h: f64,
    loss_g: f64,
    reward: f64,
}

fn scene_rng(seed: u64, stage: u8, epoch: usize, scene_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(stage) << 56) ^ ((epoch as u64) << 40) ^ scene_id);
    rng
}

fn add_into(acc: &mut [Matrix], g: &[Matrix]) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.add_assign(b);
    }
}

fn validate_data(scenes: &[Scene], store: &KnowledgeStore, n_rois: usize) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::EmptySceneList);
    }
    for s in scenes {
        s.validate(n_rois)?;
        if let Some(t) = s.tags.iter().find(|t| !store.contains(t)) {
            return Err(Error::UnknownTerm(t.clone()));
        }
    }
    Ok(())
}

/// Retrieval pass with ground-truth tags, target expansion, matching and the
/// retrieval loss. Returns the parameter gradients, the loss and the retrieval
/// result for the generation pass.
fn retrieval_step(
    params: &ModelParams,
    store: &KnowledgeStore,
    lexicon: &Lexicon,
    scene: &Scene,
    k_vocab: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Matrix>, f64, RetrievalResult)> {
    let c = params.config();
    let mut tags = TagInput::terms(&scene.tags);
    tags.truncate(c.max_tags);
    tags.resize(c.max_tags, TagInput::Mask);
    // Region features do not see word slots, so the words are left out here.
    let mut pass = forward_retrieval(params, store, lexicon, None, &tags, &scene.rois)?;
    let regions = region_features(&pass.regions().expect("regions requested").to_rows());
    let retrieval = retrieve_with_k(&regions, store, k_vocab)?;
    let targets = expand_targets(&scene.tags, c.n_rois, store, rng)?;
    let cost = matching_cost_matrix(&targets, &retrieval, store)?;
    let assignment = hungarian(&cost)?;
    let (loss, grad) = hungarian_loss(&targets, &assignment, &regions, store)?;
    let grads = pass.backward(Some(grad), None)?;
    Ok((grads, loss, retrieval))
}

fn stage1_scene(
    params: &ModelParams,
    store: &KnowledgeStore,
    lexicon: &Lexicon,
    vocab: &Vocabulary,
    scene: &Scene,
    k_vocab: usize,
    mut rng: ChaCha8Rng,
) -> Result<SceneGrads> {
    let (mut grads, loss_h, retrieval) = retrieval_step(params, store, lexicon, scene, k_vocab, &mut rng)?;
    let reference = scene
        .references
        .choose(&mut rng)
        .ok_or(Error::EmptyReferenceSet(scene.scene_id as usize))?;
    let mut tokens = vocab.encode(reference);
    tokens.truncate(params.config().max_words);
    let masked = mask_words(&tokens, &mut rng)?;
    let tags = TagInput::terms(&retrieval.top_terms());
    let mut pass = forward_generation(params, store, lexicon, &masked, &tags, &scene.rois)?;
    let logits = pass.logits().expect("masked positions");
    let rows: Vec<(usize, Vec<f64>)> = masked
        .positions
        .iter()
        .zip(logits.to_rows())
        .map(|(&p, r)| (p, r))
        .collect();
    let (loss_g, g) = masked_ce_loss(&rows, &masked.targets())?;
    let g2 = pass.backward(None, Some(Matrix::from_rows(&g)))?;
    add_into(&mut grads, &g2);
    Ok(SceneGrads {
        grads,
        loss_h,
        loss_g,
        reward: 0.0,
    })
}

struct Stage2Context<'a> {
    scorer: &'a CiderScorer,
    alpha: f64,
    temperature: f64,
}

fn stage2_scene(
    params: &ModelParams,
    store: &KnowledgeStore,
    lexicon: &Lexicon,
    vocab: &Vocabulary,
    scene: &Scene,
    decode: &DecodeConfig,
    ctx: &Stage2Context<'_>,
    mut rng: ChaCha8Rng,
) -> Result<SceneGrads> {
    let (mut grads, loss_h, retrieval) =
        retrieval_step(params, store, lexicon, scene, decode.k_vocab, &mut rng)?;
    let terms = retrieval.top_terms();
    let tags = TagInput::terms(&terms);
    let memory = image_memory(params, store, &tags, &scene.rois)?;
    let decoder = Decoder::new(params, &memory, lexicon);
    let max_len = decode.max_len.min(params.config().max_words);
    let stop = vocab.stop_id();
    let baseline = greedy(&decoder, max_len, stop);
    let (sample, logprob) = sample_caption(&decoder, ctx.temperature, max_len, stop, &mut rng)?;
    let words = |t: &[usize]| -> Vec<String> { vocab.decode(t) };
    let reward_of = |t: &[usize]| -> Result<f64> {
        let w = words(t);
        if normalize_tokens(&w).is_empty() {
            return Ok(0.0);
        }
        Ok(scst_reward(&w, &scene.references, &terms, ctx.alpha, ctx.scorer)?.total)
    };
    let r_sample = reward_of(&sample)?;
    let r_base = reward_of(&baseline)?;
    let coef = scst_gradient(logprob, r_sample, r_base);
    let mut loss_g = 0.0;
    if coef != 0.0 {
        let masked = MaskedWords::all(sample.clone());
        let mut pass = forward_generation(params, store, lexicon, &masked, &tags, &scene.rois)?;
        let logits = pass.logits().expect("sampled positions");
        let t = ctx.temperature;
        let mut g = Matrix::zeros(logits.rows(), logits.cols());
        let mut total_lp = 0.0;
        for (p, &tok) in sample.iter().enumerate() {
            let scaled: Vec<f64> = logits.row(p).iter().map(|l| l / t).collect();
            let lps = log_softmax(&scaled);
            total_lp += lps[tok];
            for (j, lp) in lps.iter().enumerate() {
                let onehot = if j == tok { 1.0 } else { 0.0 };
                g.set(p, j, coef * (onehot - lp.exp()) / t);
            }
        }
        loss_g = coef * total_lp;
        let g2 = pass.backward(None, Some(g))?;
        add_into(&mut grads, &g2);
    }
    Ok(SceneGrads {
        grads,
        loss_h,
        loss_g,
        reward: r_sample,
    })
}

fn run_epochs<F>(
    stage: u8,
    params: &mut ModelParams,
    opt: &mut AdamState,
    scenes: &[Scene],
    stage_cfg: &StageConfig,
    seed: u64,
    per_scene: F,
    on_epoch: &mut dyn FnMut(usize, &ModelParams),
) -> Result<Vec<StepLog>>
where
    F: Fn(&ModelParams, &Scene, ChaCha8Rng) -> Result<SceneGrads> + Sync,
{
    let hyper = AdamW {
        lr: stage_cfg.lr,
        weight_decay: stage_cfg.weight_decay,
        ..AdamW::default()
    };
    let batch = stage_cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(stage) << 32));
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..stage_cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(batch) {
            let mut ids: Vec<usize> = chunk.to_vec();
            ids.sort_by_key(|&i| scenes[i].scene_id);
            let p: &ModelParams = params;
            let results: Vec<Result<SceneGrads>> = ids
                .par_iter()
                .map(|&i| {
                    let s = &scenes[i];
                    per_scene(p, s, scene_rng(seed, stage, epoch, s.scene_id))
                })
                .collect();
            let mut total: Vec<Matrix> = params
                .shapes()
                .iter()
                .map(|&(r, c)| Matrix::zeros(r, c))
                .collect();
            let (mut lh, mut lg, mut rw) = (0.0, 0.0, 0.0);
            for r in results {
                let r = r?;
                add_into(&mut total, &r.grads);
                lh += r.loss_h;
                lg += r.loss_g;
                rw += r.reward;
            }
            let n = ids.len() as f64;
            let (lh, lg, rw) = (lh / n, lg / n, rw / n);
            for g in total.iter_mut() {
                *g = g.scale(1.0 / n);
            }
            let grad_ok = total.iter().all(Matrix::is_finite);
            if !lh.is_finite() || !lg.is_finite() || !grad_ok {
                return Err(Error::Diverged {
                    stage,
                    epoch,
                    step,
                    detail: format!("loss_h {lh}, loss_g {lg}, finite gradients {grad_ok}"),
                });
            }
            clip_global_norm(&mut total, stage_cfg.clip_norm);
            optimizer_step(params, &total, &hyper, opt)?;
            if !params.is_finite() {
                return Err(Error::Diverged {
                    stage,
                    epoch,
                    step,
                    detail: "non-finite parameters after update".into(),
                });
            }
            log.push(StepLog {
                stage,
                epoch,
                step,
                loss_h: lh,
                loss_g: lg,
                reward: (stage == 2).then_some(rw),
            });
            step += 1;
        }
        on_epoch(epoch, params);
    }
    Ok(log)
}

/// Stage 1 from a fresh initialization.
pub fn train_stage1(
    scenes: &[Scene],
    vocab: &Vocabulary,
    store: &KnowledgeStore,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_stage1_with(scenes, vocab, store, config, &mut |_, _| {})
}

/// [`train_stage1`] calling `on_epoch` after every epoch.
pub fn train_stage1_with(
    scenes: &[Scene],
    vocab: &Vocabulary,
    store: &KnowledgeStore,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &ModelParams),
) -> Result<TrainOutcome> {
    let first = scenes.first().ok_or(Error::EmptySceneList)?;
    let n_rois = first.rois.len();
    let roi_dim = first.rois.first().map_or(0, |r| r.dim());
    let model_cfg = config.model_config(vocab, n_rois, roi_dim, store.dimension());
    validate_data(scenes, store, n_rois)?;
    let mut params = ModelParams::init(model_cfg, config.seed)?;
    let mut opt = AdamState::new(&params);
    let lexicon = Lexicon::new(store, vocab);
    let k_vocab = config.decode.k_vocab;
    let log = run_epochs(
        1,
        &mut params,
        &mut opt,
        scenes,
        &config.stage1,
        config.seed,
        |p, s, rng| stage1_scene(p, store, &lexicon, vocab, s, k_vocab, rng),
        on_epoch,
    )?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            vocab: vocab.clone(),
            optimizer: Some(opt),
            knowledge_revision: store.revision(),
            stage: 1,
            epoch: config.stage1.epochs,
        },
        log,
    })
}

/// Stage 2 continuing from a stage-1 checkpoint. The optimizer state is
/// reset for the new learning rate.
pub fn train_stage2(
    checkpoint: &Checkpoint,
    scenes: &[Scene],
    store: &KnowledgeStore,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_stage2_with(checkpoint, scenes, store, config, &mut |_, _| {})
}

/// [`train_stage2`] calling `on_epoch` after every epoch.
pub fn train_stage2_with(
    checkpoint: &Checkpoint,
    scenes: &[Scene],
    store: &KnowledgeStore,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &ModelParams),
) -> Result<TrainOutcome> {
    if checkpoint.stage < 1 {
        return Err(Error::ConfigInvalid("stage 2 needs a stage-1 checkpoint".into()));
    }
    let mut params = checkpoint.params.clone();
    let vocab = &checkpoint.vocab;
    validate_data(scenes, store, params.config().n_rois)?;
    let mut opt = AdamState::new(&params);
    let lexicon = Lexicon::new(store, vocab);
    let refs: Vec<Vec<Vec<String>>> = scenes.iter().map(|s| s.references.clone()).collect();
    let scorer = CiderScorer::from_references(&refs)?;
    let ctx = Stage2Context {
        scorer: &scorer,
        alpha: config.alpha,
        temperature: config.temperature,
    };
    let decode = config.decode;
    let log = run_epochs(
        2,
        &mut params,
        &mut opt,
        scenes,
        &config.stage2,
        config.seed,
        |p, s, rng| stage2_scene(p, store, &lexicon, vocab, s, &decode, &ctx, rng),
        on_epoch,
    )?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            vocab: vocab.clone(),
            optimizer: Some(opt),
            knowledge_revision: store.revision(),
            stage: 2,
            epoch: config.stage2.epochs,
        },
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene_id: u64,
    pub caption: Vec<String>,
    pub top_vocab: Vec<String>,
    pub fallback: bool,
    pub vocab_hits: usize,
}

/// Captioning and retrieval quality on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Object ROIs of the scored classes whose top-1 retrieved term is their
    /// class.
    pub retrieval_accuracy: f64,
    /// Object ROIs of the scored classes whose class is in the scene's
    /// retrieved vocabulary.
    pub top_k_recall: f64,
    pub mean_vocab_hits: f64,
    pub fallback_rate: f64,
    pub scenes: Vec<SceneResult>,
}

/// Captions every scene and scores CIDEr, per-class mention F1 over
/// `f1_classes`, and retrieval of those classes against the ROI labels.
pub fn evaluate_split(
    params: &ModelParams,
    vocab: &Vocabulary,
    store: &KnowledgeStore,
    scenes: &[Scene],
    decode: &DecodeConfig,
    f1_classes: &[String],
) -> Result<Evaluation> {
    if scenes.is_empty() {
        return Err(Error::EmptySceneList);
    }
    let captioner = Captioner::new(params, store, vocab)?;
    let generated: Vec<_> = scenes
        .par_iter()
        .map(|s| captioner.generate(&s.rois, decode))
        .collect::<Result<Vec<_>>>()?;

    let candidates: Vec<Vec<String>> = generated.iter().map(|g| g.words.clone()).collect();
    let references: Vec<Vec<Vec<String>>> = scenes.iter().map(|s| s.references.clone()).collect();
    let cider_mean = cider(&candidates, &references)?.mean;
    let scored: Vec<ScoredScene> = scenes
        .iter()
        .zip(&candidates)
        .map(|(s, c)| ScoredScene {
            gt_classes: s.class_set(),
            caption: c.clone(),
        })
        .collect();
    let report = EvalReport::build(cider_mean, &scored, f1_classes)?;

    let (mut objects, mut top1, mut topk) = (0usize, 0usize, 0usize);
    let mut results = Vec::with_capacity(scenes.len());
    let mut hits = 0usize;
    let mut fallbacks = 0usize;
    for (s, g) in scenes.iter().zip(&generated) {
        let top = g.retrieval.top_terms();
        for (j, label) in s.labels.iter().enumerate() {
            if let Some(name) = label.as_ref().filter(|n| f1_classes.contains(n)) {
                objects += 1;
                top1 += usize::from(&g.retrieval.per_region[j].term == name);
                topk += usize::from(top.contains(name));
            }
        }
        let h = top.iter().filter(|t| mentions(&normalize_tokens(&g.words), t)).count();
        hits += h;
        fallbacks += usize::from(g.fallback);
        results.push(SceneResult {
            scene_id: s.scene_id,
            caption: g.words.clone(),
            top_vocab: top,
            fallback: g.fallback,
            vocab_hits: h,
        });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Evaluation {
        report,
        retrieval_accuracy: ratio(top1, objects),
        top_k_recall: ratio(topk, objects),
        mean_vocab_hits: ratio(hits, scenes.len()),
        fallback_rate: ratio(fallbacks, scenes.len()),
        scenes: results,
    })
}

/// A store edit evaluated without touching the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Scenario {
    /// The store as given.
    Baseline,
    /// Remove this percentage of terms, chosen with the scenario seed.
    DropPercent(u32),
    DropSeen,
    DropNovel,
    /// Start from the seen-only store and add the novel definitions.
    AddNovel,
}

impl Scenario {
    pub fn name(&self) -> String {
        match self {
            Scenario::Baseline => "baseline".into(),
            Scenario::DropPercent(p) => format!("drop-{p}%"),
            Scenario::DropSeen => "drop-seen".into(),
            Scenario::DropNovel => "drop-novel".into(),
            Scenario::AddNovel => "add-novel".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Scenario> {
        match s {
            "baseline" => Ok(Scenario::Baseline),
            "drop-seen" => Ok(Scenario::DropSeen),
            "drop-novel" => Ok(Scenario::DropNovel),
            "add-novel" => Ok(Scenario::AddNovel),
            _ => s
                .strip_prefix("drop-")
                .and_then(|p| p.trim_end_matches('%').parse::<u32>().ok())
                .filter(|p| *p <= 100)
                .map(Scenario::DropPercent)
                .ok_or_else(|| Error::ConfigInvalid(format!("unknown scenario {s:?}"))),
        }
    }
}

/// Applies a scenario to the full store. `seen` and `novel` partition the
/// class terms.
pub fn apply_scenario(
    full: &KnowledgeStore,
    seen: &[String],
    novel: &[String],
    scenario: &Scenario,
    seed: u64,
) -> Result<KnowledgeStore> {
    let mut store = full.clone();
    match scenario {
        Scenario::Baseline => {}
        Scenario::DropSeen => store.remove_entries(seen)?,
        Scenario::DropNovel => store.remove_entries(novel)?,
        Scenario::AddNovel => {
            store.remove_entries(novel)?;
            let records = novel
                .iter()
                .map(|t| {
                    let e = full.entry(full.index_of(t).ok_or_else(|| Error::UnknownTerm(t.clone()))?);
                    Ok(crate::knowledge::DefinitionRecord {
                        term: e.term.clone(),
                        definition: e.definition.clone(),
                        embedding: Some(e.embedding.clone()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            store.add_records(records)?;
        }
        Scenario::DropPercent(p) => {
            let terms: Vec<String> = full.terms().map(str::to_string).collect();
            let n = (terms.len() * *p as usize + 50) / 100;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let drop: Vec<String> = terms.choose_multiple(&mut rng, n).cloned().collect();
            store.remove_entries(&drop)?;
        }
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub store_revision: u64,
    pub store_size: usize,
    pub seen_f1: f64,
    pub novel_f1: f64,
    pub seen_cider: f64,
    pub novel_cider: f64,
    pub seen_retrieval_accuracy: f64,
    pub novel_top_k_recall: f64,
    pub seen: EvalReport,
    pub novel: EvalReport,
}

/// Evaluates one parameter set under each store edit. Parameters are only
/// read. An empty scenario list evaluates the baseline alone.
#[allow(clippy::too_many_arguments)]
pub fn run_knowledge_scenarios(
    params: &ModelParams,
    vocab: &Vocabulary,
    full_store: &KnowledgeStore,
    seen_classes: &[String],
    novel_classes: &[String],
    test_seen: &[Scene],
    test_novel: &[Scene],
    scenarios: &[Scenario],
    decode: &DecodeConfig,
    seed: u64,
) -> Result<Vec<ScenarioReport>> {
    let baseline = [Scenario::Baseline];
    let scenarios = if scenarios.is_empty() { &baseline[..] } else { scenarios };
    let mut out = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        let store = apply_scenario(full_store, seen_classes, novel_classes, sc, seed)?;
        let seen = evaluate_split(params, vocab, &store, test_seen, decode, seen_classes)?;
        let novel = evaluate_split(params, vocab, &store, test_novel, decode, novel_classes)?;
        out.push(ScenarioReport {
            scenario: sc.name(),
            store_revision: store.revision(),
            store_size: store.len(),
            seen_f1: seen.report.avg_f1,
            novel_f1: novel.report.avg_f1,
            seen_cider: seen.report.cider_mean,
            novel_cider: novel.report.cider_mean,
            seen_retrieval_accuracy: seen.retrieval_accuracy,
            novel_top_k_recall: novel.top_k_recall,
            seen: seen.report,
            novel: novel.report,
        });
    }
    Ok(out)
}

/// Gathers every distinct class mentioned by any scene.
pub fn scene_classes(scenes: &[Scene]) -> Vec<String> {
    let mut set: HashSet<&String> = HashSet::new();
    for s in scenes {
        set.extend(s.classes.iter());
    }
    let mut v: Vec<String> = set.into_iter().cloned().collect();
    v.sort();
    v
}
