mod common;

use common::memo;
use flue_core::checkpoint::Checkpoint;
use flue_core::mlm::MaskingConfig;
use flue_core::model::{ModelConfig, Parameters};
use flue_core::nn::ParamSet;
use flue_core::optim::AdamConfig;
use flue_core::pretrain::{eval_loss, read_loss_csv, TrainConfig, Trainer};

fn small_model(v: usize, dropout: f64) -> ModelConfig {
    ModelConfig { hidden: 32, heads: 4, d_ff: 64, dropout, ..ModelConfig::toy(v) }
}

fn trainer(seqs: &[Vec<u32>], v: usize, dropout: f64, accumulation: usize, micro: usize, seed: u64) -> Trainer {
    let params = Parameters::init(&small_model(v, dropout), seed).unwrap();
    let adam = AdamConfig { peak_lr: 1e-3, warmup_steps: 2, total_steps: 12, accumulation, ..AdamConfig::default() };
    let masking = MaskingConfig { seed: seed + 1, ..MaskingConfig::toy() };
    let train = TrainConfig { micro_batch: micro, checkpoint_every: 0, clip_norm: Some(1.0) };
    Trainer::new(params, seqs.to_vec(), adam, masking, train, seed, "h".into()).unwrap()
}

#[test]
fn accumulation_matches_one_large_batch() {
    let (tok, seqs) = memo::hundred_sentences(200);
    let v = tok.vocab.len();
    for seed in 0..5 {
        let mut acc = trainer(&seqs[..64], v, 0.0, 4, 4, seed);
        let mut big = trainer(&seqs[..64], v, 0.0, 1, 16, seed);
        for _ in 0..2 {
            let a = acc.step().unwrap();
            let b = big.step().unwrap();
            assert!((a.loss - b.loss).abs() <= 1e-9);
        }
        let worst = acc
            .params
            .tensors()
            .iter()
            .zip(big.params.tensors())
            .flat_map(|((_, a), (_, b))| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-6, "seed {seed}: {worst}");
    }
}

#[test]
fn effective_batch_is_micro_times_accumulation() {
    let (tok, seqs) = memo::hundred_sentences(50);
    assert_eq!(trainer(&seqs, tok.vocab.len(), 0.1, 16, 16, 0).effective_batch(), 256);
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let (tok, seqs) = memo::hundred_sentences(100);
    let v = tok.vocab.len();
    let run = || {
        let mut t = trainer(&seqs, v, 0.1, 2, 8, 7);
        let losses: Vec<u64> = (0..5).map(|_| t.step().unwrap().loss.to_bits()).collect();
        (t.params, t.state, losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_equals_uninterrupted() {
    let (tok, seqs) = memo::hundred_sentences(100);
    let v = tok.vocab.len();
    let dir = tempfile::tempdir().unwrap();

    let mut straight = trainer(&seqs, v, 0.1, 2, 16, 3);
    straight.run(&dir.path().join("a"), |_| {}).unwrap();

    let mut first = trainer(&seqs, v, 0.1, 2, 16, 3);
    // 7 steps × 32 sequences crosses an epoch boundary of 100
    for _ in 0..7 {
        first.step().unwrap();
    }
    let path = dir.path().join("mid.mlmf");
    first.checkpoint().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::resume(ckpt, seqs.clone(), first.adam.clone(), first.masking.clone(), first.train.clone()).unwrap();
    assert_eq!(resumed.cursor(), first.cursor());
    while resumed.state.step < resumed.adam.total_steps {
        resumed.step().unwrap();
    }
    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.state, straight.state);

    let log = read_loss_csv(&dir.path().join("a/loss.csv")).unwrap();
    assert_eq!(log.len(), 12);
    assert_eq!(log[0].step, 1);
    assert!(dir.path().join("a/final.mlmf").exists());
}

#[test]
fn initial_loss_is_log_vocab() {
    let (tok, seqs) = memo::hundred_sentences(300);
    let v = tok.vocab.len();
    for seed in 0..3 {
        let params = Parameters::init(&ModelConfig::toy(v), seed).unwrap();
        let loss = eval_loss(&params, &seqs, &MaskingConfig { seed, ..MaskingConfig::toy() }, 32).unwrap();
        let ln_v = (v as f64).ln();
        assert!((loss - ln_v).abs() <= 0.05 * ln_v, "{loss} vs {ln_v}");
    }
}

#[test]
fn short_run_reduces_loss() {
    let (tok, seqs) = memo::hundred_sentences(300);
    let v = tok.vocab.len();
    let params = Parameters::init(&small_model(v, 0.0), 1).unwrap();
    let masking = MaskingConfig { seed: 2, ..MaskingConfig::toy() };
    let before = eval_loss(&params, &seqs, &masking, 50).unwrap();
    let adam = AdamConfig { peak_lr: 5e-3, warmup_steps: 5, total_steps: 40, accumulation: 1, ..AdamConfig::default() };
    let train = TrainConfig { micro_batch: 50, checkpoint_every: 0, clip_norm: Some(1.0) };
    let mut t = Trainer::new(params, seqs.clone(), adam, masking.clone(), train, 1, tok.vocab.hash()).unwrap();
    for _ in 0..40 {
        t.step().unwrap();
    }
    let after = eval_loss(&t.params, &seqs, &masking, 50).unwrap();
    assert!(after < 0.8 * before, "{before} -> {after}");
}
