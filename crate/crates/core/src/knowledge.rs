//! External knowledge: terms, their definitions, and frozen definition
//! embeddings.
//!
//! Embeddings come from a deterministic feature-hashing encoder (character
//! trigrams of each word plus the word itself, signed-hashed into `D`
//! buckets, L2-normalized) or are supplied precomputed in a knowledge file.
//! Either way they are fixed once an entry is ingested.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::norm;

/// Reserved term whose embedding is the zero vector.
pub const NO_OBJECT: &str = "no_object";

/// Desk-scale embedding dimension.
pub const DEFAULT_DIMENSION: usize = 64;

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub term: String,
    pub definition: String,
    pub embedding: Vec<f64>,
}

impl KnowledgeEntry {
    pub fn is_reserved(&self) -> bool {
        self.term == NO_OBJECT
    }
}

/// One line of a knowledge file, before it is admitted to a store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefinitionRecord {
    pub term: String,
    pub definition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl DefinitionRecord {
    pub fn new(term: impl Into<String>, definition: impl Into<String>) -> Self {
        DefinitionRecord {
            term: term.into(),
            definition: definition.into(),
            embedding: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    dimension: usize,
    #[serde(default)]
    revision: u64,
}

/// Lowercases a term and collapses internal whitespace to single spaces.
pub fn normalize_term(term: &str) -> Result<String> {
    let t = term
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ");
    if t.is_empty() {
        return Err(Error::InvalidTerm(term.to_string()));
    }
    Ok(t)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn hash_feature(v: &mut [f64], feature: &str) {
    let h = fnv1a64(feature.as_bytes());
    let idx = (h % v.len() as u64) as usize;
    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
    v[idx] += sign;
}

/// Adds one word's hashed features to `v`: its boundary-marked character
/// trigrams and the whole word.
fn accumulate_word(v: &mut [f64], word: &str) {
    let marked: Vec<char> = std::iter::once('<')
        .chain(word.chars())
        .chain(std::iter::once('>'))
        .collect();
    for w in marked.windows(3) {
        let gram: String = w.iter().collect();
        hash_feature(v, &gram);
    }
    hash_feature(v, &format!("w:{word}"));
}

/// Deterministic unit-norm embedding of a definition text.
///
/// The unnormalized vector is a sum of per-word contributions, so texts that
/// share words land near each other.
pub fn embed_definition(definition: &str, dimension: usize) -> Result<Vec<f64>> {
    if dimension == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: 0,
        });
    }
    let ws = words(definition);
    if ws.is_empty() {
        return Err(Error::EmptyDefinition);
    }
    let mut v = vec![0.0; dimension];
    for w in &ws {
        accumulate_word(&mut v, w);
    }
    let mut n = norm(&v);
    if n == 0.0 {
        // every feature cancelled; fall back to a single bucket
        hash_feature(&mut v, &ws.join(" "));
        n = norm(&v);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// The term → embedding table, with `NO_OBJECT` pinned at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeStore {
    entries: Vec<KnowledgeEntry>,
    dimension: usize,
    revision: u64,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl KnowledgeStore {
    /// A store holding only `NO_OBJECT`.
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::ConfigInvalid("dimension must be positive".into()));
        }
        let mut s = KnowledgeStore {
            entries: vec![KnowledgeEntry {
                term: NO_OBJECT.to_string(),
                definition: "no object".to_string(),
                embedding: vec![0.0; dimension],
            }],
            dimension,
            revision: 0,
            index: HashMap::new(),
        };
        s.reindex();
        Ok(s)
    }

    /// Builds a store from definitions in one go (revision 1).
    pub fn from_records(dimension: usize, records: Vec<DefinitionRecord>) -> Result<Self> {
        let mut s = KnowledgeStore::new(dimension)?;
        s.add_records(records)?;
        Ok(s)
    }

    fn reindex(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.term.clone(), i))
            .collect();
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// M, including `NO_OBJECT`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &KnowledgeEntry {
        &self.entries[index]
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.index.contains_key(term)
    }

    pub fn embedding(&self, term: &str) -> Result<&[f64]> {
        self.index_of(term)
            .map(|i| self.entries[i].embedding.as_slice())
            .ok_or_else(|| Error::UnknownTerm(term.to_string()))
    }

    /// Non-reserved terms in store order.
    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|e| !e.is_reserved())
            .map(|e| e.term.as_str())
    }

    /// Adds `(term, definition)` pairs, embedding each definition.
    pub fn add_entries(&mut self, new: &[(String, String)]) -> Result<()> {
        let records = new
            .iter()
            .map(|(t, d)| DefinitionRecord::new(t.clone(), d.clone()))
            .collect();
        self.add_records(records)
    }

    /// Adds records, embedding those without a precomputed vector. Either
    /// every record is admitted or the store is left untouched.
    pub fn add_records(&mut self, records: Vec<DefinitionRecord>) -> Result<()> {
        let mut staged = Vec::with_capacity(records.len());
        let mut seen = std::collections::HashSet::new();
        for rec in records {
            let entry = self.admit(rec)?;
            if self.contains(&entry.term) || !seen.insert(entry.term.clone()) {
                return Err(Error::DuplicateTerm(entry.term));
            }
            staged.push(entry);
        }
        self.entries.extend(staged);
        self.reindex();
        self.revision += 1;
        Ok(())
    }

    fn admit(&self, rec: DefinitionRecord) -> Result<KnowledgeEntry> {
        let term = normalize_term(&rec.term)?;
        if term == NO_OBJECT {
            return Err(Error::DuplicateTerm(term));
        }
        let embedding = match rec.embedding {
            Some(e) => unit_embedding(e, self.dimension, &term)?,
            None => embed_definition(&rec.definition, self.dimension)?,
        };
        Ok(KnowledgeEntry {
            term,
            definition: rec.definition,
            embedding,
        })
    }

    /// Removes the named terms. `NO_OBJECT` cannot be removed.
    pub fn remove_entries(&mut self, terms: &[String]) -> Result<()> {
        let mut doomed = std::collections::HashSet::new();
        for t in terms {
            let t = normalize_term(t)?;
            if t == NO_OBJECT {
                return Err(Error::ReservedTerm(t));
            }
            if !self.contains(&t) {
                return Err(Error::UnknownTerm(t));
            }
            doomed.insert(t);
        }
        self.entries.retain(|e| !doomed.contains(&e.term));
        self.reindex();
        self.revision += 1;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = FileHeader {
            dimension: self.dimension,
            revision: self.revision,
        };
        let mut write_line = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
        write_line(serde_json::to_string(&header).map_err(|e| Error::json("header", e))?)?;
        for e in &self.entries {
            let rec = DefinitionRecord {
                term: e.term.clone(),
                definition: e.definition.clone(),
                embedding: Some(e.embedding.clone()),
            };
            write_line(serde_json::to_string(&rec).map_err(|e| Error::json("entry", e))?)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads a full store. The file must contain `NO_OBJECT`.
    pub fn load(path: &Path) -> Result<Self> {
        let (header, records) = read_knowledge_file(path)?;
        let mut seen = std::collections::HashSet::new();
        let mut reserved = None;
        let mut rest = Vec::new();
        for rec in records {
            let term = normalize_term(&rec.term)?;
            if !seen.insert(term.clone()) {
                return Err(Error::SchemaMismatch(format!("term `{term}` appears twice")));
            }
            if term == NO_OBJECT {
                if let Some(e) = &rec.embedding {
                    if e.len() != header.dimension || e.iter().any(|v| *v != 0.0) {
                        return Err(Error::SchemaMismatch(
                            "no_object embedding must be the zero vector".into(),
                        ));
                    }
                }
                reserved = Some(rec);
            } else {
                rest.push(rec);
            }
        }
        let reserved =
            reserved.ok_or_else(|| Error::SchemaMismatch("missing no_object entry".into()))?;
        let mut store = KnowledgeStore::new(header.dimension)?;
        store.entries[0].definition = reserved.definition;
        for rec in rest {
            let entry = store.admit(rec)?;
            store.entries.push(entry);
        }
        store.reindex();
        store.revision = header.revision;
        Ok(store)
    }

    /// Writes one CSV row per entry: term followed by its embedding.
    pub fn export_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "term")?;
        for i in 0..self.dimension {
            write!(out, ",d{i}")?;
        }
        writeln!(out)?;
        for e in &self.entries {
            write!(out, "{}", csv_field(&e.term))?;
            for v in &e.embedding {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn unit_embedding(e: Vec<f64>, dimension: usize, term: &str) -> Result<Vec<f64>> {
    if e.len() != dimension {
        return Err(Error::SchemaMismatch(format!(
            "embedding of `{term}` has dimension {}, header says {dimension}",
            e.len()
        )));
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::SchemaMismatch(format!(
            "embedding of `{term}` is not finite"
        )));
    }
    let n = norm(&e);
    if n == 0.0 {
        return Err(Error::SchemaMismatch(format!(
            "embedding of `{term}` is the zero vector"
        )));
    }
    if (n - 1.0).abs() < UNIT_TOLERANCE {
        Ok(e)
    } else {
        Ok(e.into_iter().map(|v| v / n).collect())
    }
}

fn read_knowledge_file(path: &Path) -> Result<(FileHeader, Vec<DefinitionRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = loop {
        match lines.next() {
            Some(l) => {
                let l = l.map_err(|e| Error::io(path, e))?;
                if !l.trim().is_empty() {
                    break l;
                }
            }
            None => return Err(Error::SchemaMismatch("missing dimension header".into())),
        }
    };
    let header: FileHeader = serde_json::from_str(&header_line)
        .map_err(|_| Error::SchemaMismatch("first line must be {\"dimension\": D}".into()))?;
    if header.dimension == 0 {
        return Err(Error::SchemaMismatch("dimension must be positive".into()));
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DefinitionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{} line {}", path.display(), n + 2), e))?;
        if let Some(e) = &rec.embedding {
            if e.len() != header.dimension {
                return Err(Error::SchemaMismatch(format!(
                    "line {}: embedding dimension {} != header dimension {}",
                    n + 2,
                    e.len(),
                    header.dimension
                )));
            }
        }
        records.push(rec);
    }
    Ok((header, records))
}

/// Reads a definitions file (same format as a store file) for adding to an
/// existing store. `NO_OBJECT` lines are skipped.
pub fn read_definitions(path: &Path, dimension: usize) -> Result<Vec<DefinitionRecord>> {
    let (found, records) = read_definitions_file(path)?;
    if found != dimension {
        return Err(Error::SchemaMismatch(format!(
            "definitions have dimension {found}, store has {dimension}"
        )));
    }
    Ok(records)
}

/// Like [`read_definitions`], taking the dimension from the file header.
pub fn read_definitions_file(path: &Path) -> Result<(usize, Vec<DefinitionRecord>)> {
    let (header, records) = read_knowledge_file(path)?;
    let mut out = Vec::new();
    for r in records {
        if normalize_term(&r.term)? != NO_OBJECT {
            out.push(r);
        }
    }
    Ok((header.dimension, out))
}

/// Writes definitions (no `NO_OBJECT`) in the knowledge file format.
pub fn write_definitions(path: &Path, dimension: usize, records: &[DefinitionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::json!({ "dimension": dimension });
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json("definition", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Single-writer / multi-reader handle. Readers take an immutable snapshot;
/// a writer mutates a private copy and swaps it in, so a reader only ever
/// observes a whole revision.
#[derive(Debug, Clone)]
pub struct SharedStore {
    inner: Arc<RwLock<Arc<KnowledgeStore>>>,
}

impl SharedStore {
    pub fn new(store: KnowledgeStore) -> Self {
        SharedStore {
            inner: Arc::new(RwLock::new(Arc::new(store))),
        }
    }

    pub fn snapshot(&self) -> Arc<KnowledgeStore> {
        self.inner.read().expect("knowledge lock poisoned").clone()
    }

    pub fn update<F>(&self, f: F) -> Result<u64>
    where
        F: FnOnce(&mut KnowledgeStore) -> Result<()>,
    {
        let mut guard = self.inner.write().expect("knowledge lock poisoned");
        let mut next = (**guard).clone();
        f(&mut next)?;
        let rev = next.revision();
        *guard = Arc::new(next);
        Ok(rev)
    }
}
