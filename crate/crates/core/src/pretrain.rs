//! MLM training loop: micro-batch gradient accumulation, optional global-norm
//! clipping, AdamW updates on the warmup/decay schedule, loss logging and
//! resumable checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader, DataCursor};
use crate::mlm::{mask_rows, MaskedBatch, MaskingConfig};
use crate::model::{self, Mode, Parameters};
use crate::nn::{ParamSet, Tensor};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Sequences per micro-batch.
    pub micro_batch: usize,
    /// Save a checkpoint every this many optimizer steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { micro_batch: 16, checkpoint_every: 1000, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Trainer {
    pub params: Parameters,
    pub state: AdamState,
    pub adam: AdamConfig,
    pub masking: MaskingConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub vocab_hash: String,
    sequences: Vec<Vec<u32>>,
    cursor: DataCursor,
    order: Vec<usize>,
}

impl Trainer {
    pub fn new(
        params: Parameters,
        sequences: Vec<Vec<u32>>,
        adam: AdamConfig,
        masking: MaskingConfig,
        train: TrainConfig,
        seed: u64,
        vocab_hash: String,
    ) -> Result<Self> {
        adam.validate()?;
        masking.validate()?;
        if train.micro_batch == 0 {
            return Err(Error::InvalidConfig("micro_batch must be at least 1".into()));
        }
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let state = AdamState::new(&params);
        let mut t = Self {
            params,
            state,
            adam,
            masking,
            train,
            seed,
            vocab_hash,
            sequences,
            cursor: DataCursor::default(),
            order: Vec::new(),
        };
        t.order = t.epoch_order(0);
        Ok(t)
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        ckpt: Checkpoint,
        sequences: Vec<Vec<u32>>,
        adam: AdamConfig,
        masking: MaskingConfig,
        train: TrainConfig,
    ) -> Result<Self> {
        let seed = ckpt.header.seed.ok_or_else(|| Error::Checkpoint("checkpoint lacks a training seed".into()))?;
        let state = ckpt.optimizer.ok_or_else(|| Error::Checkpoint("checkpoint lacks optimizer state".into()))?;
        let cursor = ckpt.header.cursor.unwrap_or_default();
        let mut t = Self::new(ckpt.params, sequences, adam, masking, train, seed, ckpt.header.vocab_hash)?;
        t.state = state;
        t.cursor = cursor;
        t.order = t.epoch_order(cursor.epoch);
        Ok(t)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.sequences.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, epoch));
        order.shuffle(&mut rng);
        order
    }

    pub fn effective_batch(&self) -> usize {
        self.adam.effective_batch(self.train.micro_batch)
    }

    pub fn cursor(&self) -> DataCursor {
        self.cursor
    }

    /// Next micro-batch in the shuffled epoch order; the last batch of an
    /// epoch may be short.
    pub fn next_micro_batch(&mut self) -> MaskedBatch {
        let end = (self.cursor.offset + self.train.micro_batch).min(self.order.len());
        let rows = &self.order[self.cursor.offset..end];
        let batch = mask_rows(&self.sequences, rows, &self.masking, self.cursor.epoch, self.params.cfg.vocab_size as u32);
        self.cursor.offset = end;
        if self.cursor.offset >= self.order.len() {
            self.cursor = DataCursor { epoch: self.cursor.epoch + 1, offset: 0 };
            self.order = self.epoch_order(self.cursor.epoch);
        }
        batch
    }

    /// One optimizer update over `accumulation` micro-batches.
    ///
    /// Summed cross-entropy is divided by the number of labeled tokens in the
    /// whole accumulation group, which reduces to averaging micro-batch
    /// losses when every micro-batch carries the same number of labels.
    pub fn step(&mut self) -> Result<LossRecord> {
        let step = self.state.step + 1;
        let lr = self.adam.schedule().lr_at_step(step.min(self.adam.total_steps))?;
        let mut grads = self.params.zeros_like();
        let mut loss_sum = 0.0;
        let mut labels = 0usize;
        let v = self.params.cfg.vocab_size;
        for micro in 0..self.adam.accumulation {
            let batch = self.next_micro_batch();
            let mode = Mode::Train { seed: mix(mix(self.seed, step), micro as u64) };
            let (logits, cache) = model::forward(&self.params, &batch, mode)?;
            let (sum, d, n) = model::mlm_loss_sum(&logits, &batch.labels, v)?;
            if n == 0 {
                continue;
            }
            model::backward_into(&self.params, &cache, &d, &mut grads)?;
            loss_sum += sum;
            labels += n;
        }
        let loss = if labels > 0 { loss_sum / labels as f64 } else { 0.0 };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads: Vec<Tensor> = grads.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        if labels > 0 {
            let inv = 1.0 / labels as f64;
            for t in grads.iter_mut() {
                t.data.iter_mut().for_each(|x| *x *= inv);
            }
        }
        if let Some(max) = self.train.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        adam_step(&mut self.params, &grads, &mut self.state, &self.adam, lr)?;
        self.params.round_to_storage();
        self.state.round_to_storage();
        Ok(LossRecord { step, lr, loss })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                config: self.params.cfg.clone(),
                vocab_hash: self.vocab_hash.clone(),
                step: self.state.step,
                has_optimizer: true,
                cursor: Some(self.cursor),
                seed: Some(self.seed),
                tool_version: crate::TOOL_VERSION.to_string(),
            },
            params: self.params.clone(),
            optimizer: Some(self.state.clone()),
        }
    }

    /// Train until `total_steps`, writing `loss.csv` and checkpoints into
    /// `out_dir`. On a numeric failure the previously written checkpoints
    /// are left untouched and the error is returned.
    pub fn run(&mut self, out_dir: &Path, mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let csv_path = out_dir.join("loss.csv");
        let resuming = self.state.step > 0 && csv_path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(resuming)
            .write(true)
            .truncate(!resuming)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?;
        let mut csv = BufWriter::new(file);
        if !resuming {
            writeln!(csv, "step,lr,loss").map_err(|e| Error::io(&csv_path, e))?;
        }
        log::info!(
            "effective batch {} sequences ({} x {} accumulated)",
            self.effective_batch(),
            self.train.micro_batch,
            self.adam.accumulation
        );
        let mut records = Vec::new();
        while self.state.step < self.adam.total_steps {
            let rec = self.step()?;
            writeln!(csv, "{},{},{}", rec.step, rec.lr, rec.loss).map_err(|e| Error::io(&csv_path, e))?;
            on_step(&rec);
            records.push(rec);
            if self.train.checkpoint_every > 0 && rec.step % self.train.checkpoint_every == 0 {
                csv.flush().map_err(|e| Error::io(&csv_path, e))?;
                self.checkpoint().save(&checkpoint_path(out_dir, rec.step))?;
            }
        }
        csv.flush().map_err(|e| Error::io(&csv_path, e))?;
        self.checkpoint().save(&out_dir.join("final.mlmf"))?;
        Ok(records)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:07}.mlmf"))
}

/// Mean MLM loss over all `sequences` with masks fixed by `cfg.seed` (a
/// dedicated evaluation epoch), dropout off.
pub fn eval_loss(params: &Parameters, sequences: &[Vec<u32>], cfg: &MaskingConfig, batch_size: usize) -> Result<f64> {
    const EVAL_EPOCH: u64 = u64::MAX;
    let v = params.cfg.vocab_size;
    let mut total = 0.0;
    let mut n = 0;
    let idx: Vec<usize> = (0..sequences.len()).collect();
    for rows in idx.chunks(batch_size.max(1)) {
        let batch = mask_rows(sequences, rows, cfg, EVAL_EPOCH, v as u32);
        let (logits, _) = model::forward(params, &batch, Mode::Eval)?;
        let (s, _, k) = model::mlm_loss_sum(&logits, &batch.labels, v)?;
        total += s;
        n += k;
    }
    if n == 0 {
        return Err(Error::Contract("evaluation set has no masked positions".into()));
    }
    Ok(total / n as f64)
}

/// Loss curve as written to `loss.csv`.
pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = || -> Option<LossRecord> {
            Some(LossRecord { step: f.first()?.parse().ok()?, lr: f.get(1)?.parse().ok()?, loss: f.get(2)?.parse().ok()? })
        };
        out.push(parse().ok_or_else(|| Error::data(path.display(), i + 1, "expected step,lr,loss"))?);
    }
    Ok(out)
}

pub fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}
