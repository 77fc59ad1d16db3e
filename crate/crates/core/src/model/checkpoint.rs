//! JSON checkpoints: configuration, vocabulary, every parameter tensor
//! (row-major, 64-bit), optimizer state and the knowledge revision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::vocab::Vocabulary;

pub const CHECKPOINT_FORMAT: &str = "nocrek-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    tensor: Matrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    vocab: Vocabulary,
    knowledge_revision: u64,
    stage: u8,
    epoch: usize,
    params: Vec<NamedTensor>,
    optimizer: Option<AdamState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub optimizer: Option<AdamState>,
    pub knowledge_revision: u64,
    /// Training stage the checkpoint was written after (0 = untrained).
    pub stage: u8,
    pub epoch: usize,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        config: ckpt.params.config().clone(),
        vocab: ckpt.vocab.clone(),
        knowledge_revision: ckpt.knowledge_revision,
        stage: ckpt.stage,
        epoch: ckpt.epoch,
        params: ckpt
            .params
            .names()
            .iter()
            .zip(ckpt.params.tensors())
            .map(|(n, t)| NamedTensor {
                name: n.clone(),
                tensor: t.clone(),
            })
            .collect(),
        optimizer: ckpt.optimizer.clone(),
    };
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, &file).map_err(|e| Error::json("checkpoint", e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::json("checkpoint", e))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::SchemaMismatch(format!(
            "unknown checkpoint format {:?}",
            file.format
        )));
    }
    if file.vocab.len() != file.config.word_vocab_size {
        return Err(Error::SchemaMismatch(format!(
            "vocabulary of {} tokens for a model of {}",
            file.vocab.len(),
            file.config.word_vocab_size
        )));
    }
    let expected = super::Layout::new(&file.config).names;
    let names: Vec<&String> = file.params.iter().map(|t| &t.name).collect();
    if names.len() != expected.len() || names.iter().zip(&expected).any(|(a, b)| *a != b) {
        return Err(Error::SchemaMismatch("parameter names do not match the layout".into()));
    }
    let params = ModelParams::from_tensors(
        file.config,
        file.params.into_iter().map(|t| t.tensor).collect(),
    )?;
    if let Some(opt) = &file.optimizer {
        let ok = opt.m.len() == params.shapes().len()
            && opt
                .m
                .iter()
                .zip(&opt.v)
                .zip(params.shapes())
                .all(|((m, v), s)| m.shape() == *s && v.shape() == *s);
        if !ok {
            return Err(Error::SchemaMismatch("optimizer state shape mismatch".into()));
        }
    }
    Ok(Checkpoint {
        params,
        vocab: file.vocab,
        optimizer: file.optimizer,
        knowledge_revision: file.knowledge_revision,
        stage: file.stage,
        epoch: file.epoch,
    })
}
