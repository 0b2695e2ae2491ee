//! Bidirectional transformer encoder with a masked-language-model head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mlm::{MaskedBatch, IGNORE};
use crate::nn::{
    self, add_col_sums, add_matmul_at, matmul, matmul_bt, LayerParams, NormPlacement, ParamSet, StackCache,
    StackSpec, Tensor, LAYER_TENSOR_NAMES,
};
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub tie_mlm_head: bool,
    #[serde(default)]
    pub norm_placement: NormPlacement,
}

impl ModelConfig {
    fn preset(layers: usize, hidden: usize, heads: usize, vocab_size: usize, max_positions: usize) -> Self {
        Self {
            layers,
            hidden,
            heads,
            d_ff: 4 * hidden,
            vocab_size,
            max_positions,
            dropout: 0.1,
            tie_mlm_head: true,
            norm_placement: NormPlacement::PreNorm,
        }
    }

    pub fn base(vocab_size: usize) -> Self {
        Self::preset(12, 768, 12, vocab_size, 512)
    }

    pub fn large(vocab_size: usize) -> Self {
        Self::preset(24, 1024, 16, vocab_size, 512)
    }

    pub fn toy(vocab_size: usize) -> Self {
        Self::preset(2, 64, 4, vocab_size, 128)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.d_ff < self.hidden {
            return Err(Error::InvalidConfig(format!("d_ff ({}) must be at least hidden ({})", self.d_ff, self.hidden)));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::InvalidConfig("vocab_size and max_positions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Closed-form size of the parameter inventory.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let (v, h, p) = (cfg.vocab_size, cfg.hidden, cfg.max_positions);
    let head = if cfg.tie_mlm_head { 0 } else { h * v };
    v * h + p * h + cfg.layers * LayerParams::param_count(h, cfg.d_ff) + 2 * h + v + head
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub cfg: ModelConfig,
    pub token_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln_g: Tensor,
    pub final_ln_b: Tensor,
    pub mlm_bias: Tensor,
    pub mlm_proj: Option<Tensor>,
}

pub type Gradients = Parameters;

impl Parameters {
    /// Weights ~ N(0, 0.02²), biases 0, norm scales 1, rounded to `f32`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, h) = (cfg.vocab_size, cfg.hidden);
        let token_embed = Tensor::normal(&[v, h], INIT_STD, &mut rng);
        let pos_embed = Tensor::normal(&[cfg.max_positions, h], INIT_STD, &mut rng);
        let layers = (0..cfg.layers).map(|_| LayerParams::init(h, cfg.d_ff, INIT_STD, &mut rng)).collect();
        let mlm_proj = (!cfg.tie_mlm_head).then(|| Tensor::normal(&[h, v], INIT_STD, &mut rng));
        let mut p = Self {
            cfg: cfg.clone(),
            token_embed,
            pos_embed,
            layers,
            final_ln_g: Tensor::filled(&[h], 1.0),
            final_ln_b: Tensor::zeros(&[h]),
            mlm_bias: Tensor::zeros(&[v]),
            mlm_proj,
        };
        p.round_to_storage();
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    /// Shapes of the inventory in order, without allocating tensors.
    pub fn inventory(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (v, h, f) = (cfg.vocab_size, cfg.hidden, cfg.d_ff);
        let mut out = vec![("token_embed".to_string(), vec![v, h]), ("pos_embed".to_string(), vec![cfg.max_positions, h])];
        for l in 0..cfg.layers {
            for name in LAYER_TENSOR_NAMES {
                let shape = match name {
                    "wq" | "wk" | "wv" | "wo" => vec![h, h],
                    "w1" => vec![h, f],
                    "w2" => vec![f, h],
                    "b1" => vec![f],
                    _ => vec![h],
                };
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("final_ln_g".into(), vec![h]));
        out.push(("final_ln_b".into(), vec![h]));
        out.push(("mlm_bias".into(), vec![v]));
        if !cfg.tie_mlm_head {
            out.push(("mlm_proj".into(), vec![h, v]));
        }
        out
    }

    fn spec(&self, batch: usize, seq_len: usize, train: bool) -> StackSpec {
        StackSpec {
            batch,
            seq_len,
            heads: self.cfg.heads,
            placement: self.cfg.norm_placement,
            dropout: if train { self.cfg.dropout } else { 0.0 },
        }
    }
}

impl ParamSet for Parameters {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("token_embed".to_string(), &self.token_embed), ("pos_embed".to_string(), &self.pos_embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSOR_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_ln_g".into(), &self.final_ln_g));
        out.push(("final_ln_b".into(), &self.final_ln_b));
        out.push(("mlm_bias".into(), &self.mlm_bias));
        if let Some(p) = &self.mlm_proj {
            out.push(("mlm_proj".into(), p));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("token_embed".to_string(), &mut self.token_embed), ("pos_embed".to_string(), &mut self.pos_embed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in LAYER_TENSOR_NAMES.iter().zip(layer.tensors_mut()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_ln_g".into(), &mut self.final_ln_g));
        out.push(("final_ln_b".into(), &mut self.final_ln_b));
        out.push(("mlm_bias".into(), &mut self.mlm_bias));
        if let Some(p) = &mut self.mlm_proj {
            out.push(("mlm_proj".into(), p));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active; masks drawn from a stream seeded with `seed`.
    Train { seed: u64 },
    Eval,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub inputs: Vec<u32>,
    pub positions: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    pub embed_drop: Option<Vec<f64>>,
    pub stack: StackCache,
    /// Final-layer states after the last norm, `[rows × hidden]`.
    pub hidden: Vec<f64>,
}

/// Embeddings and encoder stack up to the final norm.
pub fn forward_hidden(params: &Parameters, batch: &MaskedBatch, mode: Mode) -> Result<ActivationCache> {
    let cfg = &params.cfg;
    let (b, t, h) = (batch.batch, batch.seq_len, cfg.hidden);
    if batch.inputs.len() != b * t || batch.attention_mask.len() != b * t || batch.positions.len() != t {
        return Err(Error::Shape(format!("batch arrays do not match {b}×{t}")));
    }
    if let Some(&bad) = batch.inputs.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Contract(format!("token id {bad} out of range for vocabulary of {}", cfg.vocab_size)));
    }
    if let Some(&bad) = batch.positions.iter().find(|&&p| p >= cfg.max_positions) {
        return Err(Error::Contract(format!("position {bad} exceeds max_positions {}", cfg.max_positions)));
    }
    let mut rng = match mode {
        Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Mode::Eval => None,
    };
    let mut x = vec![0.0; b * t * h];
    for r in 0..b {
        for c in 0..t {
            let id = batch.inputs[r * t + c] as usize;
            let pos = batch.positions[c];
            let row = &mut x[(r * t + c) * h..(r * t + c + 1) * h];
            let te = &params.token_embed.data[id * h..(id + 1) * h];
            let pe = &params.pos_embed.data[pos * h..(pos + 1) * h];
            for j in 0..h {
                row[j] = te[j] + pe[j];
            }
        }
    }
    let spec = params.spec(b, t, matches!(mode, Mode::Train { .. }));
    let embed_drop = nn::dropout_mask(x.len(), spec.dropout, rng.as_mut());
    nn::apply_mask(&mut x, &embed_drop);
    let (hidden, stack) =
        nn::stack_forward(&params.layers, &params.final_ln_g, &params.final_ln_b, x, spec, &batch.attention_mask, rng.as_mut());
    Ok(ActivationCache { inputs: batch.inputs.clone(), positions: batch.positions.clone(), batch: b, seq_len: t, embed_drop, stack, hidden })
}

/// MLM logits `[rows × vocab]` for a batch.
pub fn forward(params: &Parameters, batch: &MaskedBatch, mode: Mode) -> Result<(Vec<f64>, ActivationCache)> {
    let cache = forward_hidden(params, batch, mode)?;
    let logits = project_logits(params, &cache.hidden);
    Ok((logits, cache))
}

pub fn project_logits(params: &Parameters, hidden: &[f64]) -> Vec<f64> {
    let (v, h) = (params.cfg.vocab_size, params.cfg.hidden);
    let rows = hidden.len() / h;
    let mut logits = match &params.mlm_proj {
        None => matmul_bt(hidden, &params.token_embed.data, rows, h, v),
        Some(p) => matmul(hidden, &p.data, rows, h, v),
    };
    nn::add_bias(&mut logits, &params.mlm_bias.data);
    logits
}

/// Mean cross-entropy over labeled positions and its gradient w.r.t. logits.
pub fn mlm_loss(logits: &[f64], labels: &[i64], vocab_size: usize) -> Result<(f64, Vec<f64>)> {
    let (sum, mut d, n) = mlm_loss_sum(logits, labels, vocab_size)?;
    if n == 0 {
        return Err(Error::Contract("no labeled positions in batch".into()));
    }
    let inv = 1.0 / n as f64;
    d.iter_mut().for_each(|x| *x *= inv);
    Ok((sum * inv, d))
}

/// Summed cross-entropy, gradient of the sum, and the number of labels.
pub fn mlm_loss_sum(logits: &[f64], labels: &[i64], vocab_size: usize) -> Result<(f64, Vec<f64>, usize)> {
    if logits.len() != labels.len() * vocab_size {
        return Err(Error::Shape(format!("{} logits for {} labels × vocab {}", logits.len(), labels.len(), vocab_size)));
    }
    let mut d = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut n = 0;
    for (r, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let label = label as usize;
        if label >= vocab_size {
            return Err(Error::Contract(format!("label {label} out of range")));
        }
        let row = &logits[r * vocab_size..(r + 1) * vocab_size];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum_exp.ln();
        total += lse - row[label];
        let drow = &mut d[r * vocab_size..(r + 1) * vocab_size];
        for (dv, x) in drow.iter_mut().zip(row) {
            *dv = (x - lse).exp();
        }
        drow[label] -= 1.0;
        n += 1;
    }
    Ok((total, d, n))
}

/// Gradients of the encoder given `d_hidden`, the gradient w.r.t. final states.
pub fn backward_hidden(params: &Parameters, cache: &ActivationCache, d_hidden: &[f64], grads: &mut Gradients) -> Result<()> {
    let h = params.cfg.hidden;
    let (b, t) = (cache.batch, cache.seq_len);
    if d_hidden.len() != b * t * h {
        return Err(Error::Shape(format!("d_hidden has {} values, expected {}", d_hidden.len(), b * t * h)));
    }
    if grads.cfg != params.cfg {
        return Err(Error::Shape("gradient container built for a different config".into()));
    }
    let Gradients { layers, final_ln_g, final_ln_b, token_embed, pos_embed, .. } = grads;
    let mut d_x = nn::stack_backward(&params.layers, &params.final_ln_g, &cache.stack, d_hidden, layers, final_ln_g, final_ln_b)?;
    nn::apply_mask(&mut d_x, &cache.embed_drop);
    for r in 0..b {
        for c in 0..t {
            let id = cache.inputs[r * t + c] as usize;
            let pos = cache.positions[c];
            let dr = &d_x[(r * t + c) * h..(r * t + c + 1) * h];
            nn::add_assign(&mut token_embed.data[id * h..(id + 1) * h], dr);
            nn::add_assign(&mut pos_embed.data[pos * h..(pos + 1) * h], dr);
        }
    }
    Ok(())
}

/// Accumulate gradients of the MLM objective given `d_logits`.
pub fn backward_into(params: &Parameters, cache: &ActivationCache, d_logits: &[f64], grads: &mut Gradients) -> Result<()> {
    let (v, h) = (params.cfg.vocab_size, params.cfg.hidden);
    let rows = cache.batch * cache.seq_len;
    if d_logits.len() != rows * v {
        return Err(Error::Shape(format!("d_logits has {} values, expected {}", d_logits.len(), rows * v)));
    }
    add_col_sums(&mut grads.mlm_bias.data, d_logits);
    let d_hidden = match &params.mlm_proj {
        None => {
            add_matmul_at(&mut grads.token_embed.data, d_logits, &cache.hidden, rows, v, h);
            matmul(d_logits, &params.token_embed.data, rows, v, h)
        }
        Some(p) => {
            let gp = grads.mlm_proj.as_mut().ok_or_else(|| Error::Shape("gradient lacks mlm_proj".into()))?;
            add_matmul_at(&mut gp.data, &cache.hidden, d_logits, rows, h, v);
            matmul_bt(d_logits, &p.data, rows, v, h)
        }
    };
    backward_hidden(params, cache, &d_hidden, grads)
}

pub fn backward(params: &Parameters, cache: &ActivationCache, d_logits: &[f64]) -> Result<Gradients> {
    let mut g = params.zeros_like();
    backward_into(params, cache, d_logits, &mut g)?;
    Ok(g)
}

/// Final-layer states `[T × H]` for one id sequence, dropout off.
pub fn encode_tokens(params: &Parameters, ids: &[u32]) -> Result<Vec<f64>> {
    let batch = MaskedBatch::unlabeled(&[ids]);
    Ok(forward_hidden(params, &batch, Mode::Eval)?.hidden)
}

/// Output of every layer `[T × H]`: index 0 is the embedding sum, index `L`
/// is the last block's output before the final norm.
pub fn encode_layers(params: &Parameters, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
    let batch = MaskedBatch::unlabeled(&[ids]);
    let cache = forward_hidden(params, &batch, Mode::Eval)?;
    Ok(cache.stack.layer_outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::MASK;
    use crate::mlm::MaskedRow;

    fn toy(v: usize) -> ModelConfig {
        ModelConfig { d_ff: 32, ..ModelConfig { hidden: 16, heads: 4, ..ModelConfig::toy(v) } }
    }

    #[test]
    fn init_is_deterministic_and_well_formed() {
        let cfg = ModelConfig::toy(60);
        let a = Parameters::init(&cfg, 7).unwrap();
        let b = Parameters::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.layers[0].ln1_g.data.iter().all(|&x| x == 1.0));
        assert!(a.final_ln_g.data.iter().all(|&x| x == 1.0));
        assert!(a.layers[1].bq.data.iter().all(|&x| x == 0.0));
        let inv = Parameters::inventory(&cfg);
        let live = a.tensors();
        assert_eq!(inv.len(), live.len());
        for ((n1, s1), (n2, t)) in inv.iter().zip(&live) {
            assert_eq!(n1, n2);
            assert_eq!(s1, &t.shape);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::toy(10);
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy(10);
        cfg.d_ff = 8;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn degenerate_zero_layers() {
        let mut cfg = ModelConfig::toy(100);
        cfg.layers = 0;
        let h = cfg.hidden;
        assert_eq!(count_parameters(&cfg), 100 * h + cfg.max_positions * h + 2 * h + 100);
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let v = 37;
        let logits = vec![0.25; 3 * v];
        let (loss, _) = mlm_loss(&logits, &[5, IGNORE, 9], v).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
        assert!(mlm_loss(&logits, &[IGNORE; 3], v).is_err());
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let v = 10;
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0, 30.0] {
            let mut logits = vec![0.0; v];
            logits[3] = margin;
            let (loss, _) = mlm_loss(&logits, &[3], v).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn mask_only_input_softmax_rows_sum_to_one() {
        let cfg = toy(30);
        let p = Parameters::init(&cfg, 1).unwrap();
        let batch = MaskedBatch::from_rows(&[MaskedRow { inputs: vec![MASK], labels: vec![IGNORE] }]);
        let (mut logits, _) = forward(&p, &batch, Mode::Eval).unwrap();
        nn::softmax_in_place(&mut logits);
        assert!((logits.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let cfg = toy(30);
        let p = Parameters::init(&cfg, 1).unwrap();
        let batch = MaskedBatch::unlabeled(&[&[2, 40, 3]]);
        assert!(matches!(forward(&p, &batch, Mode::Eval), Err(Error::Contract(_))));
        let long: Vec<u32> = vec![5; cfg.max_positions + 1];
        let batch = MaskedBatch::unlabeled(&[&long]);
        assert!(matches!(forward(&p, &batch, Mode::Eval), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let cfg = toy(30);
        let p = Parameters::init(&cfg, 2).unwrap();
        let batch = MaskedBatch::unlabeled(&[&[2, 7, 8, 3]]);
        let (logits, cache) = forward(&p, &batch, Mode::Train { seed: 1 }).unwrap();
        let g = backward(&p, &cache, &vec![0.0; logits.len()]).unwrap();
        for (name, t) in g.tensors() {
            assert!(t.data.iter().all(|&x| x == 0.0), "{name}");
        }
    }

    #[test]
    fn unused_embedding_rows_get_no_gradient_when_untied() {
        let mut cfg = toy(30);
        cfg.tie_mlm_head = false;
        let p = Parameters::init(&cfg, 3).unwrap();
        let rows = vec![MaskedRow { inputs: vec![2, 7, 8, 3], labels: vec![IGNORE, 11, IGNORE, IGNORE] }];
        let batch = MaskedBatch::from_rows(&rows);
        let (logits, cache) = forward(&p, &batch, Mode::Eval).unwrap();
        let (_, d) = mlm_loss(&logits, &batch.labels, 30).unwrap();
        let g = backward(&p, &cache, &d).unwrap();
        let h = cfg.hidden;
        assert!(g.token_embed.data[20 * h..21 * h].iter().all(|&x| x == 0.0));
        assert!(g.token_embed.data[7 * h..8 * h].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn encode_shapes_and_context() {
        let cfg = toy(40);
        let p = Parameters::init(&cfg, 4).unwrap();
        for t in 1..21u32 {
            let ids: Vec<u32> = (0..t).map(|i| 5 + i % 30).collect();
            assert_eq!(encode_tokens(&p, &ids).unwrap().len(), t as usize * cfg.hidden);
        }
        let a = encode_tokens(&p, &[2, 10, 11, 12, 3]).unwrap();
        let a2 = encode_tokens(&p, &[2, 10, 11, 12, 3]).unwrap();
        assert_eq!(a, a2);
        let b = encode_tokens(&p, &[2, 10, 11, 19, 3]).unwrap();
        let h = cfg.hidden;
        let dist: f64 = a[h..2 * h].iter().zip(&b[h..2 * h]).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(dist > 0.0);
        let layers = encode_layers(&p, &[2, 10, 3]).unwrap();
        assert_eq!(layers.len(), cfg.layers + 1);
    }
}
