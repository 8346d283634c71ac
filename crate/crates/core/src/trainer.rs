//! Mini-batch training loop, evaluation with the consensus accuracy rule,
//! and bit-exact checkpointing.
//!
//! All stochasticity inside an epoch (shuffle order, dropout masks) is
//! derived from (seed, epoch), so resuming from a checkpoint at an epoch
//! boundary reproduces the exact trajectory of an uninterrupted run.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::data::{Dataset, QAItem};
use crate::error::{Error, Result};
use crate::head::make_soft_targets;
use crate::model::{Mode, Model, ModelConfig};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch (0-based) from which the learning rate is halved, if any.
    pub lr_halve_epoch: Option<usize>,
    pub dropout_p: f64,
    pub seed: u64,
    /// Keep the question encoder (word embeddings and GRU) frozen for this
    /// many initial epochs. Early joint training tends to collapse distinct
    /// questions onto answer-marginal encodings before the visual pathway
    /// has learned anything; a short frozen warm-up lets the visual side
    /// anchor against stable question codes first.
    #[serde(default)]
    pub freeze_question_epochs: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 35,
            batch_size: 64,
            lr: 1e-4,
            lr_halve_epoch: Some(30),
            dropout_p: 0.0,
            seed: 1,
            freeze_question_epochs: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} not in [0,1)",
                self.dropout_p
            )));
        }
        self.adam.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_halve_epoch {
            Some(h) if epoch >= h => self.lr * 0.5,
            _ => self.lr,
        }
    }
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_overall: f64,
    pub eval_per_type: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub overall: f64,
    pub per_type: BTreeMap<String, f64>,
    pub n: usize,
}

/// Per-question accuracy. A single reference answer scores exact match;
/// multiple annotator answers score min(matching_annotators / 3, 1).
pub fn answer_accuracy(predicted: &str, answers: &[String]) -> f64 {
    if answers.len() == 1 {
        return if predicted == answers[0] { 1.0 } else { 0.0 };
    }
    let votes = answers.iter().filter(|a| a.as_str() == predicted).count();
    (votes as f64 / 3.0).min(1.0)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Evaluate on the given question indices (all questions when empty slice
/// semantics are not wanted, pass 0..items.len()).
pub fn evaluate(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<EvalResult> {
    let mut total = 0.0;
    let mut per_type: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for &qi in indices {
        let item: &QAItem = &ds.items[qi];
        let scene = &ds.scenes[item.scene];
        let v = scene.model_features();
        let token_ids = model.embed.lookup(&item.tokens);
        let (logits, _) = model.forward(&v, &scene.boxes, &token_ids, Mode::Eval, false)?;
        let predicted = &ds.answer_vocab[argmax(&logits)];
        let acc = answer_accuracy(predicted, &item.answers);
        total += acc;
        let e = per_type.entry(item.qtype.as_str().to_string()).or_insert((0.0, 0));
        e.0 += acc;
        e.1 += 1;
    }
    let n = indices.len();
    Ok(EvalResult {
        overall: if n == 0 { 0.0 } else { total / n as f64 },
        per_type: per_type
            .into_iter()
            .map(|(k, (s, c))| (k, s / c as f64))
            .collect(),
        n,
    })
}

/// Train `model` on `train_idx`, evaluating on `eval_idx` after every epoch.
/// `start_epoch` supports resuming; pass 0 for a fresh run. `on_epoch` sees
/// each record as it is produced (for logging). When `ckpt_path` is given, a
/// checkpoint is written after every completed epoch, so a later abort
/// leaves the last good state on disk.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut Model,
    adam: &mut Adam,
    ds: &Dataset,
    train_idx: &[usize],
    eval_idx: &[usize],
    cfg: &TrainConfig,
    start_epoch: usize,
    ckpt_path: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let class_index = ds.answer_index();
    let n_classes = model.cfg.classes;
    if n_classes != ds.answer_vocab.len() {
        return Err(Error::Config(format!(
            "model has {n_classes} classes but answer vocabulary has {}",
            ds.answer_vocab.len()
        )));
    }

    let mut records = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        if cfg.freeze_question_epochs > 0 {
            let freeze_question = epoch < cfg.freeze_question_epochs;
            for (_, p) in model.set.iter_mut() {
                if p.name.starts_with("embed.") || p.name.starts_with("gru.") {
                    p.trainable = !freeze_question;
                }
            }
        }
        let lr = cfg.lr_at(epoch);
        let mut rng = Rng::derive(cfg.seed, 0x65700000 + epoch as u64); // per-epoch stream
        let mut order: Vec<usize> = train_idx.to_vec();
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            model.set.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &qi in batch {
                let item = &ds.items[qi];
                let scene = &ds.scenes[item.scene];
                let v = scene.model_features();
                let token_ids = model.embed.lookup(&item.tokens);
                let targets = make_soft_targets(
                    &item.answers,
                    &class_index,
                    n_classes,
                    item.answers.len(),
                );
                let mode = Mode::Train {
                    rng: &mut rng,
                    dropout_p: cfg.dropout_p,
                };
                let (logits, trace) = model.forward(&v, &scene.boxes, &token_ids, mode, true)?;
                let loss = model.backward(&trace.expect("trace requested"), &targets, scale)?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {epoch}, question {}: {loss}; logits {:?}",
                        item.id, logits
                    )));
                }
                loss_sum += loss;
                seen += 1;
            }
            adam.step(&mut model.set, lr)?;
        }

        let eval = evaluate(model, ds, eval_idx)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            eval_overall: eval.overall,
            eval_per_type: eval.per_type,
        };
        on_epoch(&record);
        records.push(record);
        if let Some(path) = ckpt_path {
            save_checkpoint(path, model, adam, epoch + 1, cfg.seed)?;
        }
    }
    Ok(records)
}

/// Convenience wrapper: fresh optimizer, train from epoch 0.
pub fn train_fresh(
    model: &mut Model,
    ds: &Dataset,
    train_idx: &[usize],
    eval_idx: &[usize],
    cfg: &TrainConfig,
    ckpt_path: Option<&Path>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    let mut adam = Adam::new(cfg.adam, &model.set)?;
    train(model, &mut adam, ds, train_idx, eval_idx, cfg, 0, ckpt_path, on_epoch)
}

pub fn append_jsonl(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record).map_err(|e| Error::State(e.to_string()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EpochRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            offset: 0,
            msg: format!("bad log line: {e}"),
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &str = "graphvqa-checkpoint v1";

#[derive(Serialize, Deserialize)]
struct CkptManifest {
    model: ModelConfig,
    question_vocab: Vec<String>,
    epoch: usize,
    seed: u64,
    adam: AdamConfig,
    adam_t: u64,
    params: Vec<CkptParam>,
}

#[derive(Serialize, Deserialize)]
struct CkptParam {
    name: String,
    rows: usize,
    cols: usize,
}

/// Text manifest line plus a little-endian f64 payload holding, in
/// registration order, every parameter tensor followed by the optimizer's
/// first and second moment vectors.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    adam: &Adam,
    epoch: usize,
    seed: u64,
) -> Result<()> {
    let manifest = CkptManifest {
        model: model.cfg.clone(),
        question_vocab: model.embed.tokens().to_vec(),
        epoch,
        seed,
        adam: adam.cfg,
        adam_t: adam.t,
        params: model
            .set
            .iter()
            .map(|(_, p)| {
                let (rows, cols) = p.value.shape();
                CkptParam {
                    name: p.name.clone(),
                    rows,
                    cols,
                }
            })
            .collect(),
    };
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        writeln!(f, "{CKPT_MAGIC}")?;
        let line = serde_json::to_string(&manifest).map_err(|e| Error::State(e.to_string()))?;
        writeln!(f, "{line}")?;
        for (_, p) in model.set.iter() {
            for v in p.value.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        for m in &adam.m {
            for v in m {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        for mv in &adam.v {
            for v in mv {
                f.write_all(&v.to_le_bytes())?;
            }
        }
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub adam: Adam,
    pub epoch: usize,
    pub seed: u64,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut magic = String::new();
    reader.read_line(&mut magic)?;
    if magic.trim_end() != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} in {}",
            magic.trim_end(),
            path.display()
        )));
    }
    let mut manifest_line = String::new();
    reader.read_line(&mut manifest_line)?;
    let manifest: CkptManifest = serde_json::from_str(&manifest_line)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;

    let mut model = Model::new(manifest.model.clone(), &manifest.question_vocab, manifest.seed)?;
    if model.set.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            model.set.len(),
            manifest.params.len()
        )));
    }
    let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        reader
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated payload: {e}")))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let ids: Vec<_> = model.set.iter().map(|(id, _)| id).collect();
    for (i, cp) in manifest.params.iter().enumerate() {
        let id = ids[i];
        let p = model.set.get(id);
        if p.name != cp.name || p.value.shape() != (cp.rows, cp.cols) {
            return Err(Error::Checkpoint(format!(
                "parameter {i} mismatch: model has {} {:?}, checkpoint has {} ({}, {})",
                p.name,
                p.value.shape(),
                cp.name,
                cp.rows,
                cp.cols
            )));
        }
        let data = read_f64s(cp.rows * cp.cols)?;
        model.set.value_mut(id).data_mut().copy_from_slice(&data);
    }
    let mut adam = Adam::new(manifest.adam, &model.set)?;
    adam.t = manifest.adam_t;
    for m in adam.m.iter_mut() {
        let data = read_f64s(m.len())?;
        m.copy_from_slice(&data);
    }
    for v in adam.v.iter_mut() {
        let data = read_f64s(v.len())?;
        v.copy_from_slice(&data);
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            rest.len()
        )));
    }
    Ok(LoadedCheckpoint {
        model,
        adam,
        epoch: manifest.epoch,
        seed: manifest.seed,
    })
}
