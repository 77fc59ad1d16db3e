//! Deterministic synthetic world: classes with attribute definitions, scenes
//! with ROI features, tags and template captions, and a seen/novel split.
//!
//! Every class definition is three attribute words. The embedder is additive
//! over words, so a definition's unnormalized embedding is the sum of its
//! attribute vectors. Attribute triples
//! are drawn so that the seen classes' attribute incidence has full column
//! rank; a novel class's definition is then a linear combination of seen
//! definitions, which is what lets a model trained on seen classes place
//! novel objects near their definitions.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{embed_definition, write_definitions, DefinitionRecord, KnowledgeStore};
use crate::metrics::mentions;
use crate::model::{RoiVector, BOX_DIM};
use crate::tensor::{dot, norm};
use crate::vocab::{Vocabulary, STOP};

const SEEN_NAMES: &[&str] = &[
    "dog", "cat", "horse", "car", "train", "chair", "cup", "bird", "boat", "sheep", "clock",
    "truck", "elephant", "kite", "bench", "vase", "giraffe", "laptop", "umbrella", "bicycle",
];
const NOVEL_NAMES: &[&str] = &[
    "zebra", "bus", "couch", "pizza", "microwave", "racket", "suitcase", "bottle",
];
/// Knowledge terms that never label an ROI or appear in a caption.
const DISTRACTOR_NAMES: &[&str] = &[
    "anvil", "banjo", "cactus", "drum", "easel", "fern", "gong", "harp", "igloo", "jug", "kettle",
    "lantern", "mop", "nest", "oar", "piano", "quilt", "rake", "saddle", "tent", "urn", "violin",
    "wagon", "yoyo",
];
const ATTRIBUTES: &[&str] = &[
    "striped", "furry", "wheeled", "metal", "wooden", "edible", "round", "tall", "soft", "loud",
    "flat", "feathered", "glass", "leafy", "electric", "spotted", "heavy", "hollow",
];
const MIN_ATTRIBUTES: usize = 5;
const ATTRS_PER_CLASS: usize = 3;

const ADJECTIVES: &[&str] = &[
    "small", "large", "old", "young", "white", "black", "brown", "red", "blue", "green",
    "yellow", "pretty", "tiny", "big", "dark", "bright", "little", "shiny", "dirty", "clean",
    "lonely", "happy", "quiet", "busy", "colorful", "grey", "orange", "pink", "purple", "new",
];
const VERBS: &[&str] = &[
    "sitting", "standing", "resting", "waiting", "parked", "lying", "placed", "shown", "seen",
    "displayed", "staying", "posing", "leaning", "hiding", "left", "kept", "found", "stored",
    "positioned", "located",
];
const PREPOSITIONS: &[&str] = &[
    "on", "in", "near", "beside", "behind", "under", "by", "at", "inside", "outside", "above",
    "across",
];
const PLACES: &[&str] = &[
    "table", "street", "field", "room", "kitchen", "road", "yard", "park", "beach", "floor",
    "grass", "desk", "counter", "shelf", "station", "garden", "porch", "window", "wall", "corner",
    "house", "city", "farm", "forest", "river", "lake", "hill", "market", "shop", "office",
    "bedroom", "hallway", "garage", "driveway", "sidewalk", "fence", "tree", "bridge", "harbor",
    "airport", "school", "library", "restaurant", "stadium", "plaza", "alley", "meadow", "barn",
    "dock", "square",
];
const SHOTS: &[&str] = &[
    "photo", "picture", "image", "view", "scene", "snapshot", "shot", "close-up",
];
const FRAME_WORDS: &[&str] = &[
    "a", "the", "is", "of", "there", "and", "with", "next", "to", "showing", "near",
];

/// Caption templates. `{A}` adjective, `{V}` verb, `{P}` preposition,
/// `{L}` place, `{S}` shot noun, `{1}`..`{3}` the scene's classes.
const TEMPLATES_1: &[&str] = &[
    "a {A} {1} {V} {P} the {L}",
    "the {1} is {V} {P} a {A} {L}",
    "a {S} of a {1} {P} the {L}",
    "there is a {A} {1} {P} the {L}",
];
const TEMPLATES_2: &[&str] = &[
    "a {1} and a {2} {P} the {L}",
    "a {A} {1} {V} next to a {2}",
    "the {1} is {V} near a {A} {2} {P} the {L}",
    "a {S} of a {1} with a {2}",
];
const TEMPLATES_3: &[&str] = &[
    "a {1} with a {2} and a {3} {P} the {L}",
    "there is a {1} and a {2} near a {A} {3}",
    "a {S} showing a {1} next to a {2} and a {3}",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_seen_classes: usize,
    pub n_novel_classes: usize,
    /// Extra knowledge entries with no objects behind them.
    pub n_distractors: usize,
    pub scenes_train: usize,
    /// Scenes in each test split.
    pub scenes_test: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub n_rois: usize,
    /// Per-component standard deviation added to object ROI features.
    pub feature_noise: f64,
    /// Per-component standard deviation of background ROI features.
    pub background_noise: f64,
    /// Angle in radians between a class prototype and its definition
    /// embedding.
    pub prototype_angle: f64,
    pub roi_dim: usize,
    pub knowledge_dim: usize,
    pub references_per_scene: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_seen_classes: 12,
            n_novel_classes: 4,
            n_distractors: 12,
            scenes_train: 480,
            scenes_test: 120,
            min_objects: 1,
            max_objects: 3,
            n_rois: 8,
            feature_noise: 0.03,
            background_noise: 0.05,
            prototype_angle: 0.1,
            roi_dim: 38,
            knowledge_dim: 32,
            references_per_scene: 3,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.n_seen_classes == 0 || self.n_novel_classes == 0 {
            return bad("need at least one seen and one novel class".into());
        }
        if self.roi_dim != self.knowledge_dim + BOX_DIM {
            return bad(format!(
                "roi_dim {} must equal knowledge_dim {} + {BOX_DIM}",
                self.roi_dim, self.knowledge_dim
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("objects per scene must be a non-empty range starting at 1 or more".into());
        }
        if self.max_objects > 3 || self.max_objects > self.n_rois {
            return bad("at most 3 objects per scene, and no more than n_rois".into());
        }
        if self.max_objects > self.n_seen_classes {
            return bad("max_objects exceeds the number of seen classes".into());
        }
        if self.references_per_scene == 0 || self.references_per_scene > 5 {
            return bad("references_per_scene must be in 1..=5".into());
        }
        if self.scenes_train == 0 || self.scenes_test == 0 {
            return bad("scene counts must be positive".into());
        }
        if !(self.feature_noise >= 0.0 && self.background_noise >= 0.0 && self.prototype_angle >= 0.0) {
            return bad("noise scales and angle must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub definition: String,
    pub novel: bool,
    /// Unit vector in knowledge space; object features scatter around it.
    pub prototype: Vec<f64>,
}

/// A knowledge entry without a visual class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub name: String,
    pub definition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub rois: Vec<RoiVector>,
    pub tags: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub classes: Vec<String>,
    /// Class of each ROI, `None` for background. Absent in external data.
    #[serde(default)]
    pub labels: Vec<Option<String>>,
}

impl Scene {
    pub fn validate(&self, n_rois: usize) -> Result<()> {
        let bad = |m: String| Err(Error::SchemaMismatch(format!("scene {}: {m}", self.scene_id)));
        if self.rois.len() != n_rois {
            return bad(format!("{} ROIs, expected {n_rois}", self.rois.len()));
        }
        for r in &self.rois {
            r.validate()?;
        }
        if let Some(t) = self.tags.iter().find(|t| !self.classes.contains(t)) {
            return bad(format!("tag {t:?} not among the scene classes"));
        }
        if self.references.is_empty() || self.references.len() > 5 {
            return bad(format!("{} references", self.references.len()));
        }
        for r in &self.references {
            if !self.classes.iter().any(|c| mentions(r, c)) {
                return bad(format!("reference {:?} mentions no scene class", r.join(" ")));
            }
        }
        if !self.labels.is_empty() && self.labels.len() != self.rois.len() {
            return bad("labels do not match ROIs".into());
        }
        Ok(())
    }

    pub fn class_set(&self) -> HashSet<String> {
        self.classes.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub classes: Vec<ClassSpec>,
    pub distractors: Vec<Distractor>,
    pub vocab: Vec<String>,
    pub train: Vec<Scene>,
    pub test_seen: Vec<Scene>,
    pub test_novel: Vec<Scene>,
}

pub const WORLD_FILE: &str = "world.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const DEFINITIONS_FILE: &str = "definitions.jsonl";
pub const SEEN_DEFINITIONS_FILE: &str = "seen_definitions.jsonl";
pub const NOVEL_DEFINITIONS_FILE: &str = "novel_definitions.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_SEEN_FILE: &str = "test_seen.jsonl";
pub const TEST_NOVEL_FILE: &str = "test_novel.jsonl";

/// World metadata without the scenes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldInfo {
    pub config: WorldConfig,
    pub classes: Vec<ClassSpec>,
    pub distractors: Vec<Distractor>,
}

impl World {
    pub fn seen_classes(&self) -> Vec<String> {
        self.classes.iter().filter(|c| !c.novel).map(|c| c.name.clone()).collect()
    }

    pub fn novel_classes(&self) -> Vec<String> {
        self.classes.iter().filter(|c| c.novel).map(|c| c.name.clone()).collect()
    }

    fn records(&self, novel: Option<bool>) -> Vec<DefinitionRecord> {
        self.classes
            .iter()
            .filter(|c| novel.map_or(true, |n| c.novel == n))
            .map(|c| DefinitionRecord::new(c.name.clone(), c.definition.clone()))
            .collect()
    }

    fn distractor_records(&self) -> Vec<DefinitionRecord> {
        self.distractors
            .iter()
            .map(|d| DefinitionRecord::new(d.name.clone(), d.definition.clone()))
            .collect()
    }

    /// Seen classes plus distractors: the knowledge available in training.
    pub fn seen_definitions(&self) -> Vec<DefinitionRecord> {
        let mut v = self.records(Some(false));
        v.extend(self.distractor_records());
        v
    }

    pub fn novel_definitions(&self) -> Vec<DefinitionRecord> {
        self.records(Some(true))
    }

    pub fn all_definitions(&self) -> Vec<DefinitionRecord> {
        let mut v = self.records(None);
        v.extend(self.distractor_records());
        v
    }

    pub fn distractor_terms(&self) -> Vec<String> {
        self.distractors.iter().map(|d| d.name.clone()).collect()
    }

    /// Store with `n_seen + n_distractors + 1` entries.
    pub fn seen_store(&self) -> Result<KnowledgeStore> {
        KnowledgeStore::from_records(self.config.knowledge_dim, self.seen_definitions())
    }

    /// Store with every definition plus `NoObject`.
    pub fn full_store(&self) -> Result<KnowledgeStore> {
        KnowledgeStore::from_records(self.config.knowledge_dim, self.all_definitions())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.vocab.iter().cloned())
    }

    /// Writes every dataset file into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let info = WorldInfo {
            config: self.config.clone(),
            classes: self.classes.clone(),
            distractors: self.distractors.clone(),
        };
        write_json(&dir.join(WORLD_FILE), &info)?;
        write_json(&dir.join(VOCAB_FILE), &self.vocabulary())?;
        let d = self.config.knowledge_dim;
        write_definitions(&dir.join(DEFINITIONS_FILE), d, &self.all_definitions())?;
        write_definitions(&dir.join(SEEN_DEFINITIONS_FILE), d, &self.seen_definitions())?;
        write_definitions(&dir.join(NOVEL_DEFINITIONS_FILE), d, &self.novel_definitions())?;
        write_scenes(&dir.join(TRAIN_FILE), &self.train)?;
        write_scenes(&dir.join(TEST_SEEN_FILE), &self.test_seen)?;
        write_scenes(&dir.join(TEST_NOVEL_FILE), &self.test_novel)
    }

    /// Reads a directory written by [`World::write_to`].
    pub fn read_from(dir: &Path) -> Result<World> {
        let info: WorldInfo = read_json(&dir.join(WORLD_FILE))?;
        let vocab: Vocabulary = read_json(&dir.join(VOCAB_FILE))?;
        Ok(World {
            config: info.config,
            classes: info.classes,
            distractors: info.distractors,
            vocab: vocab.tokens().to_vec(),
            train: read_scenes(&dir.join(TRAIN_FILE))?,
            test_seen: read_scenes(&dir.join(TEST_SEEN_FILE))?,
            test_novel: read_scenes(&dir.join(TEST_NOVEL_FILE))?,
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::json(path.display().to_string(), e))?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in scenes {
        let line = serde_json::to_string(s).map_err(|e| Error::json("scene", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))?;
        out.push(scene);
    }
    Ok(out)
}

fn class_names(pool: &[&str], n: usize, prefix: &str) -> Vec<String> {
    (0..n)
        .map(|i| match pool.get(i) {
            Some(s) => s.to_string(),
            None => format!("{prefix}{i}"),
        })
        .collect()
}

fn rank(rows: &[Vec<f64>]) -> usize {
    let mut m: Vec<Vec<f64>> = rows.to_vec();
    let cols = m.first().map_or(0, Vec::len);
    let mut r = 0;
    for c in 0..cols {
        let Some(p) = (r..m.len()).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())) else {
            break;
        };
        if m[p][c].abs() < 1e-9 {
            continue;
        }
        m.swap(r, p);
        for i in 0..m.len() {
            if i != r {
                let f = m[i][c] / m[r][c];
                for j in c..cols {
                    m[i][j] -= f * m[r][j];
                }
            }
        }
        r += 1;
    }
    r
}

/// Every ascending attribute triple over the first `n` attributes.
fn combinations(n: usize) -> Vec<Vec<usize>> {
    let mut all = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                all.push(vec![a, b, c]);
            }
        }
    }
    all
}

fn definition_text(t: &[usize]) -> String {
    format!("{} {} {}", ATTRIBUTES[t[0]], ATTRIBUTES[t[1]], ATTRIBUTES[t[2]])
}

/// Attribute triples for every class: distinct, pairwise sharing at most one
/// attribute when possible, with full-rank seen incidence.
fn attribute_triples<R: Rng>(n_seen: usize, n_total: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let n_attr = n_seen.clamp(MIN_ATTRIBUTES, ATTRIBUTES.len());
    let mut all = combinations(n_attr);
    if all.len() < n_total {
        return Err(Error::ConfigInvalid(format!(
            "{n_total} classes need more than {n_attr} attributes"
        )));
    }
    let want_rank = n_attr.min(n_seen);
    for max_overlap in 1..ATTRS_PER_CLASS {
        for _ in 0..2000 {
            all.shuffle(rng);
            let mut picked: Vec<Vec<usize>> = Vec::new();
            for t in &all {
                let ok = picked
                    .iter()
                    .all(|p| p.iter().filter(|x| t.contains(x)).count() <= max_overlap);
                if ok {
                    picked.push(t.clone());
                    if picked.len() == n_total {
                        break;
                    }
                }
            }
            if picked.len() < n_total {
                continue;
            }
            let incidence: Vec<Vec<f64>> = picked[..n_seen]
                .iter()
                .map(|t| (0..n_attr).map(|a| f64::from(u8::from(t.contains(&a)))).collect())
                .collect();
            if rank(&incidence) == want_rank {
                return Ok(picked);
            }
        }
    }
    Err(Error::ConfigInvalid("could not draw attribute triples".into()))
}

/// Unit vector at `angle` from `base` in a random direction.
fn tilt<R: Rng>(base: &[f64], angle: f64, rng: &mut R) -> Vec<f64> {
    if angle == 0.0 {
        return base.to_vec();
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut u: Vec<f64> = base.iter().map(|_| normal.sample(rng)).collect();
    let proj = dot(&u, base);
    u.iter_mut().zip(base).for_each(|(x, b)| *x -= proj * b);
    let n = norm(&u);
    base.iter()
        .zip(&u)
        .map(|(b, x)| angle.cos() * b + angle.sin() * x / n)
        .collect()
}

fn random_box<R: Rng>(rng: &mut R) -> [f64; 4] {
    let w = rng.gen_range(0.1..0.5);
    let h = rng.gen_range(0.1..0.5);
    let x1 = rng.gen_range(0.0..1.0 - w);
    let y1 = rng.gen_range(0.0..1.0 - h);
    [x1, y1, x1 + w, y1 + h]
}

fn pick<'a, R: Rng>(pool: &[&'a str], rng: &mut R) -> &'a str {
    pool.choose(rng).expect("non-empty pool")
}

fn caption<R: Rng>(classes: &[String], rng: &mut R) -> Vec<String> {
    let mut order: Vec<&String> = classes.iter().collect();
    order.shuffle(rng);
    let template = match order.len() {
        1 => pick(TEMPLATES_1, rng),
        2 => pick(TEMPLATES_2, rng),
        _ => pick(TEMPLATES_3, rng),
    };
    let mut out: Vec<String> = template
        .split_whitespace()
        .map(|slot| match slot {
            "{A}" => pick(ADJECTIVES, rng).to_string(),
            "{V}" => pick(VERBS, rng).to_string(),
            "{P}" => pick(PREPOSITIONS, rng).to_string(),
            "{L}" => pick(PLACES, rng).to_string(),
            "{S}" => pick(SHOTS, rng).to_string(),
            "{1}" => order[0].clone(),
            "{2}" => order[1].clone(),
            "{3}" => order[2].clone(),
            w => w.to_string(),
        })
        .collect();
    out.push(STOP.to_string());
    out
}

struct SceneMaker<'a> {
    config: &'a WorldConfig,
    classes: &'a [ClassSpec],
    feature_noise: Normal<f64>,
    background_noise: Normal<f64>,
}

impl SceneMaker<'_> {
    fn make<R: Rng>(&self, scene_id: u64, chosen: &[usize], rng: &mut R) -> Result<Scene> {
        let c = self.config;
        let mut rois = Vec::with_capacity(c.n_rois);
        let mut labels = Vec::with_capacity(c.n_rois);
        for &ci in chosen {
            let cls = &self.classes[ci];
            let f = cls
                .prototype
                .iter()
                .map(|p| p + self.feature_noise.sample(rng))
                .collect();
            let [x1, y1, x2, y2] = random_box(rng);
            rois.push(RoiVector::new(f, x1, y1, x2, y2)?);
            labels.push(Some(cls.name.clone()));
        }
        while rois.len() < c.n_rois {
            let f = (0..c.knowledge_dim)
                .map(|_| self.background_noise.sample(rng))
                .collect();
            let [x1, y1, x2, y2] = random_box(rng);
            rois.push(RoiVector::new(f, x1, y1, x2, y2)?);
            labels.push(None);
        }
        let mut order: Vec<usize> = (0..c.n_rois).collect();
        order.shuffle(rng);
        let rois: Vec<RoiVector> = order.iter().map(|&i| rois[i].clone()).collect();
        let labels: Vec<Option<String>> = order.iter().map(|&i| labels[i].clone()).collect();
        let tags: Vec<String> = labels.iter().flatten().cloned().collect();
        let classes: Vec<String> = tags.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let references = (0..c.references_per_scene)
            .map(|_| caption(&classes, rng))
            .collect();
        let scene = Scene {
            scene_id,
            rois,
            tags,
            references,
            classes,
            labels,
        };
        scene.validate(c.n_rois)?;
        Ok(scene)
    }
}

/// Scene id offsets per split.
pub const TEST_SEEN_ID_BASE: u64 = 1_000_000;
pub const TEST_NOVEL_ID_BASE: u64 = 2_000_000;

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_total = config.n_seen_classes + config.n_novel_classes;
    let triples = attribute_triples(config.n_seen_classes, n_total, &mut rng)?;
    let names: Vec<String> = class_names(SEEN_NAMES, config.n_seen_classes, "seen")
        .into_iter()
        .chain(class_names(NOVEL_NAMES, config.n_novel_classes, "novel"))
        .collect();
    let mut classes = Vec::with_capacity(n_total);
    for (i, (name, t)) in names.iter().zip(&triples).enumerate() {
        let definition = definition_text(t);
        let emb = embed_definition(&definition, config.knowledge_dim)?;
        classes.push(ClassSpec {
            name: name.clone(),
            definition,
            novel: i >= config.n_seen_classes,
            prototype: tilt(&emb, config.prototype_angle, &mut rng),
        });
    }

    let taken: HashSet<Vec<usize>> = triples.iter().cloned().collect();
    let mut free: Vec<Vec<usize>> = combinations(ATTRIBUTES.len())
        .into_iter()
        .filter(|t| !taken.contains(t))
        .collect();
    free.shuffle(&mut rng);
    let distractors: Vec<Distractor> = class_names(DISTRACTOR_NAMES, config.n_distractors, "other")
        .into_iter()
        .zip(free)
        .map(|(name, t)| Distractor {
            name,
            definition: definition_text(&t),
        })
        .collect();
    let maker = SceneMaker {
        config,
        classes: &classes,
        feature_noise: Normal::new(0.0, config.feature_noise.max(1e-300))
            .map_err(|e| Error::ConfigInvalid(e.to_string()))?,
        background_noise: Normal::new(0.0, config.background_noise.max(1e-300))
            .map_err(|e| Error::ConfigInvalid(e.to_string()))?,
    };
    let seen: Vec<usize> = (0..config.n_seen_classes).collect();
    let novel: Vec<usize> = (config.n_seen_classes..n_total).collect();
    let all: Vec<usize> = (0..n_total).collect();

    let split = |base: u64, count: usize, need_novel: bool, rng: &mut ChaCha8Rng| -> Result<Vec<Scene>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let n_obj = rng.gen_range(config.min_objects..=config.max_objects);
            let chosen: Vec<usize> = if need_novel {
                let first = *novel.choose(rng).expect("novel classes");
                let rest: Vec<usize> = all.iter().copied().filter(|&c| c != first).collect();
                std::iter::once(first)
                    .chain(rest.choose_multiple(rng, n_obj - 1).copied())
                    .collect()
            } else {
                seen.choose_multiple(rng, n_obj).copied().collect()
            };
            out.push(maker.make(base + i as u64, &chosen, rng)?);
        }
        Ok(out)
    };
    let train = split(0, config.scenes_train, false, &mut rng)?;
    let test_seen = split(TEST_SEEN_ID_BASE, config.scenes_test, false, &mut rng)?;
    let test_novel = split(TEST_NOVEL_ID_BASE, config.scenes_test, true, &mut rng)?;

    let vocab = [STOP]
        .iter()
        .chain(FRAME_WORDS)
        .chain(ADJECTIVES)
        .chain(VERBS)
        .chain(PREPOSITIONS)
        .chain(PLACES)
        .chain(SHOTS)
        .map(|s| s.to_string())
        .chain(names.iter().cloned())
        .collect::<BTreeSet<_>>();
    let vocab = Vocabulary::from_tokens(vocab).tokens().to_vec();

    Ok(World {
        config: config.clone(),
        classes,
        distractors,
        vocab,
        train,
        test_seen,
        test_novel,
    })
}
