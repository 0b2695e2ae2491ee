use flue_core::corpus::{filter_corpus, moses_tokenize, normalize_str, prepare_text, CleaningConfig, ShardInput, UnicodeForm};
use flue_core::synth;
use proptest::prelude::*;

fn memory(id: &str, text: &str) -> ShardInput {
    ShardInput::Memory { id: id.into(), bytes: text.as_bytes().to_vec() }
}

#[test]
fn synthetic_corpus_stats_add_up() {
    let raw = synth::raw_corpus(11, 200_000);
    let (kept, stats) = filter_corpus(&[memory("a", &raw)], &CleaningConfig::default(), 1).unwrap();
    assert_eq!(stats.lines_in, raw.lines().count() as u64);
    assert_eq!(stats.lines_kept + stats.dropped(), stats.lines_in);
    assert_eq!(stats.lines_kept, kept.len() as u64);
    assert_eq!(stats.tokens_kept, kept.iter().map(|s| s.tokens.len() as u64).sum::<u64>());
    for reason in ["duplicate", "too_short", "url", "email", "phone_fax", "non_alpha"] {
        assert!(stats.drop_reasons.get(reason).copied().unwrap_or(0) > 0, "no `{reason}` drops: {:?}", stats.drop_reasons);
    }
    assert!(kept.iter().all(|s| s.tokens.len() >= 4));
    assert!(kept.iter().all(|s| s.render() == s.render().to_lowercase()));
}

#[test]
fn worker_count_does_not_change_output() {
    let raw = synth::raw_corpus(12, 300_000);
    let shards = [memory("a", &raw[..raw.len() / 2]), memory("b", &raw[raw.len() / 2..])];
    let one = filter_corpus(&shards, &CleaningConfig::default(), 1).unwrap();
    let four = filter_corpus(&shards, &CleaningConfig::default(), 4).unwrap();
    assert_eq!(one, four);
}

#[test]
fn cleaning_is_idempotent_on_kept_output() {
    let raw = synth::raw_corpus(13, 100_000);
    let cfg = CleaningConfig { dedup_window: 0, ..CleaningConfig::default() };
    let (kept, _) = filter_corpus(&[memory("a", &raw)], &cfg, 1).unwrap();
    let again: String = kept.iter().map(|s| s.render() + "\n").collect();
    let (kept2, stats2) = filter_corpus(&[memory("b", &again)], &cfg, 1).unwrap();
    assert_eq!(stats2.lines_kept, kept.len() as u64);
    assert!(kept.iter().zip(&kept2).all(|(a, b)| a.tokens == b.tokens));
}

#[test]
fn unreadable_shard_is_reported_not_fatal() {
    let shards = [ShardInput::Path("/nonexistent/shard.txt".into()), memory("ok", "le chat mange une souris grise .\n")];
    let (kept, stats) = filter_corpus(&shards, &CleaningConfig::default(), 1).unwrap();
    assert_eq!(kept.len(), 1);
    assert_eq!(stats.shard_errors.len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,40}") {
        for form in [UnicodeForm::Nfc, UnicodeForm::Nfkc] {
            let once = normalize_str(&s, form);
            prop_assert_eq!(normalize_str(&once, form), once);
        }
    }

    #[test]
    fn tokens_have_no_whitespace(s in "[a-zA-Zéèàç0-9 ,.;:!?'()\"«»-]{0,60}") {
        for t in moses_tokenize(&s) {
            prop_assert!(!t.is_empty());
            prop_assert!(!t.chars().any(char::is_whitespace));
        }
    }

    #[test]
    fn prepared_text_is_stable(s in "[a-zA-Zéèàç ,.!?']{0,60}") {
        let cfg = CleaningConfig::default();
        let once = prepare_text(&s, &cfg);
        prop_assert_eq!(prepare_text(&once.join(" "), &cfg), once);
    }
}
