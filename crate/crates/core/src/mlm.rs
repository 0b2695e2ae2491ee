//! Sequence packing and dynamic masked-language-model corruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::{is_special, BOS, EOS, MASK, NUM_SPECIALS, PAD};
use crate::{Error, Result};

/// Label value for positions that carry no MLM target.
pub const IGNORE: i64 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub p_select: f64,
    pub p_mask: f64,
    pub p_random: f64,
    pub p_keep: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { p_select: 0.15, p_mask: 0.8, p_random: 0.1, p_keep: 0.1, max_len: 512, seed: 0 }
    }
}

impl MaskingConfig {
    pub fn toy() -> Self {
        Self { max_len: 128, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_select", self.p_select), ("p_mask", self.p_mask), ("p_random", self.p_random), ("p_keep", self.p_keep)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must be a probability, got {p}")));
            }
        }
        let sum = self.p_mask + self.p_random + self.p_keep;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("p_mask + p_random + p_keep must equal 1, got {sum}")));
        }
        if self.max_len < 8 {
            return Err(Error::InvalidConfig(format!("max_len must be at least 8, got {}", self.max_len)));
        }
        Ok(())
    }
}

/// Wrap each sentence as `BOS ids EOS`, truncating the sentence so the
/// result fits in `max_len`. Sentences are never split across outputs.
pub fn pack_sequences<I>(encoded: I, max_len: usize) -> Result<Vec<Vec<u32>>>
where
    I: IntoIterator,
    I::Item: AsRef<[u32]>,
{
    if max_len < 8 {
        return Err(Error::InvalidConfig(format!("max_len must be at least 8, got {max_len}")));
    }
    Ok(encoded
        .into_iter()
        .map(|ids| {
            let ids = ids.as_ref();
            let body = &ids[..ids.len().min(max_len - 2)];
            let mut seq = Vec::with_capacity(body.len() + 2);
            seq.push(BOS);
            seq.extend_from_slice(body);
            seq.push(EOS);
            seq
        })
        .collect())
}

/// Independent stream per (seed, epoch, row): masks are re-drawn every epoch
/// yet reproducible, and do not depend on batch composition.
pub fn row_rng(seed: u64, epoch: u64, row: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ row);
    rng
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedRow {
    pub inputs: Vec<u32>,
    pub labels: Vec<i64>,
}

/// Corrupt one sequence: every non-special position is selected with
/// `p_select`; selected ids become MASK, a random non-special id, or stay,
/// with probabilities `p_mask`, `p_random`, `p_keep`.
pub fn dynamic_mask<R: Rng>(sequence: &[u32], cfg: &MaskingConfig, rng: &mut R, vocab_size: u32) -> MaskedRow {
    let mut inputs = sequence.to_vec();
    let mut labels = vec![IGNORE; sequence.len()];
    let can_randomize = vocab_size > NUM_SPECIALS;
    for (i, &id) in sequence.iter().enumerate() {
        if is_special(id) {
            continue;
        }
        if rng.gen::<f64>() >= cfg.p_select {
            continue;
        }
        labels[i] = id as i64;
        let u: f64 = rng.gen();
        if u < cfg.p_mask {
            inputs[i] = MASK;
        } else if u < cfg.p_mask + cfg.p_random && can_randomize {
            inputs[i] = rng.gen_range(NUM_SPECIALS..vocab_size);
        }
    }
    MaskedRow { inputs, labels }
}

/// A right-padded batch, row-major `[batch × seq_len]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub inputs: Vec<u32>,
    pub labels: Vec<i64>,
    pub attention_mask: Vec<bool>,
    pub positions: Vec<usize>,
}

impl MaskedBatch {
    pub fn from_rows(rows: &[MaskedRow]) -> Self {
        let batch = rows.len();
        let seq_len = rows.iter().map(|r| r.inputs.len()).max().unwrap_or(0);
        let mut inputs = vec![PAD; batch * seq_len];
        let mut labels = vec![IGNORE; batch * seq_len];
        let mut attention_mask = vec![false; batch * seq_len];
        for (b, r) in rows.iter().enumerate() {
            let o = b * seq_len;
            inputs[o..o + r.inputs.len()].copy_from_slice(&r.inputs);
            labels[o..o + r.labels.len()].copy_from_slice(&r.labels);
            attention_mask[o..o + r.inputs.len()].iter_mut().for_each(|m| *m = true);
        }
        Self { batch, seq_len, inputs, labels, attention_mask, positions: (0..seq_len).collect() }
    }

    /// Uncorrupted batch with no labels, for encoding.
    pub fn unlabeled(seqs: &[&[u32]]) -> Self {
        let rows: Vec<MaskedRow> = seqs
            .iter()
            .map(|s| MaskedRow { inputs: s.to_vec(), labels: vec![IGNORE; s.len()] })
            .collect();
        Self::from_rows(&rows)
    }

    pub fn num_labels(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }
}

/// Split `sequences` (in order) into batches of `batch_size`, masking row
/// `i` with the stream `row_rng(cfg.seed, epoch, i)`.
pub fn make_batches(
    sequences: &[Vec<u32>],
    batch_size: usize,
    cfg: &MaskingConfig,
    epoch: u64,
    vocab_size: u32,
) -> Result<Vec<MaskedBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let idx: Vec<usize> = (0..sequences.len()).collect();
    Ok(idx
        .chunks(batch_size)
        .map(|chunk| mask_rows(sequences, chunk, cfg, epoch, vocab_size))
        .collect())
}

/// Mask the selected rows (by global index) into one batch.
pub fn mask_rows(sequences: &[Vec<u32>], rows: &[usize], cfg: &MaskingConfig, epoch: u64, vocab_size: u32) -> MaskedBatch {
    let masked: Vec<MaskedRow> = rows
        .iter()
        .map(|&i| dynamic_mask(&sequences[i], cfg, &mut row_rng(cfg.seed, epoch, i as u64), vocab_size))
        .collect();
    MaskedBatch::from_rows(&masked)
}
