//! Word-level vocabulary, fixed-length encodings and BERT-style token masking.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Label value for positions that do not contribute to the MLM loss.
pub const IGNORE: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary file line {line}: {message}")]
    BadVocabFile { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::BadVocabFile {
                    line: i + 1,
                    message: format!("duplicate token `{t}`"),
                });
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    /// One token per line, specials first.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self, TokenizerError> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(TokenizerError::BadVocabFile {
                    line: i + 1,
                    message: format!("expected special token {special}"),
                });
            }
        }
        if let Some(i) = tokens.iter().position(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(TokenizerError::BadVocabFile {
                line: i + 1,
                message: "tokens must be non-empty and contain no whitespace".into(),
            });
        }
        Self::from_tokens(tokens)
    }
}

/// Frequency-ranked vocabulary (ties lexicographic) over normalized texts, with
/// the five specials prepended. Tokens below `min_freq` are dropped and the
/// total size is capped at `max_size` (never below the specials).
pub fn build_vocab(texts: &[String], min_freq: usize, max_size: usize) -> Result<Vocabulary, TokenizerError> {
    if texts.iter().all(|t| t.split_whitespace().next().is_none()) {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in texts {
        for w in t.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(w, n)| n >= min_freq.max(1) && !SPECIAL_TOKENS.contains(&w))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size.saturating_sub(NUM_SPECIAL));
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(w, _)| w.to_string()))
        .collect();
    Vocabulary::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-PAD positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    fn from_token_ids(token_ids: &[u32], max_len: usize) -> Self {
        assert!(max_len >= 2, "max_len must leave room for CLS and SEP");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend_from_slice(token_ids);
        ids.push(SEP);
        let real = ids.len();
        ids.resize(max_len, PAD);
        let mut attention_mask = vec![1u8; real];
        attention_mask.resize(max_len, 0);
        Encoding { ids, attention_mask }
    }
}

/// `[CLS] tokens [SEP]` padded to `max_len`; excess tokens are cut from the end.
pub fn encode(vocab: &Vocabulary, text: &str, max_len: usize) -> Encoding {
    let ids: Vec<u32> = text
        .split_whitespace()
        .take(max_len.saturating_sub(2))
        .map(|w| vocab.id(w))
        .collect();
    Encoding::from_token_ids(&ids, max_len)
}

/// Like [`encode`] but keeps the most recent tokens when the text is too long.
/// Used for dialogue context, where the latest instruction matters most.
pub fn encode_tail(vocab: &Vocabulary, text: &str, max_len: usize) -> Encoding {
    let all: Vec<u32> = text.split_whitespace().map(|w| vocab.id(w)).collect();
    let keep = max_len.saturating_sub(2).min(all.len());
    Encoding::from_token_ids(&all[all.len() - keep..], max_len)
}

/// Space-joined tokens, skipping CLS/SEP/PAD.
pub fn decode(vocab: &Vocabulary, ids: &[u32]) -> String {
    ids.iter()
        .filter(|&&id| !matches!(id, PAD | CLS | SEP))
        .map(|&id| vocab.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    /// Share of selected positions replaced by MASK.
    pub mask_token_frac: f64,
    /// Share of selected positions replaced by a random non-special token.
    pub random_token_frac: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_prob: 0.15,
            mask_token_frac: 0.8,
            random_token_frac: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn with_prob(mask_prob: f64) -> Self {
        MaskingConfig {
            mask_prob,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingOutput {
    pub masked_ids: Vec<u32>,
    pub labels: Vec<i64>,
}

impl MaskingOutput {
    pub fn selected_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// Selects each content position with probability `cfg.mask_prob`; selected
/// positions become MASK, a random non-special id, or stay unchanged according
/// to the configured split. Labels hold the original id at selected positions.
pub fn mask_tokens<R: Rng + ?Sized>(
    encoding: &Encoding,
    cfg: &MaskingConfig,
    rng: &mut R,
    vocab: &Vocabulary,
) -> MaskingOutput {
    let mut masked_ids = encoding.ids.clone();
    let mut labels = vec![IGNORE; encoding.ids.len()];
    let n_regular = vocab.len().saturating_sub(NUM_SPECIAL) as u32;
    for (i, &id) in encoding.ids.iter().enumerate() {
        if encoding.attention_mask[i] == 0 || matches!(id, CLS | SEP | PAD) {
            continue;
        }
        if rng.random::<f64>() >= cfg.mask_prob {
            continue;
        }
        labels[i] = id as i64;
        let branch = rng.random::<f64>();
        if branch < cfg.mask_token_frac {
            masked_ids[i] = MASK;
        } else if branch < cfg.mask_token_frac + cfg.random_token_frac && n_regular > 0 {
            masked_ids[i] = NUM_SPECIAL as u32 + rng.random_range(0..n_regular);
        }
    }
    MaskingOutput { masked_ids, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn vocab_frequency_order() {
        let v = build_vocab(&texts(&["a a b"]), 1, 100).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        let only = build_vocab(&texts(&["a b"]), 2, 100).unwrap();
        assert_eq!(only.len(), NUM_SPECIAL);
        let tie = build_vocab(&texts(&["b a"]), 1, 100).unwrap();
        assert_eq!(tie.tokens()[5..], ["a".to_string(), "b".to_string()]);
        assert_eq!(build_vocab(&[], 1, 100), Err(TokenizerError::EmptyCorpus));
        let capped = build_vocab(&texts(&["a a a b b c"]), 1, 7).unwrap();
        assert_eq!(capped.tokens()[5..], ["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn encode_layout() {
        let v = build_vocab(&texts(&["a a b"]), 1, 100).unwrap();
        let e = encode(&v, "a b", 5);
        assert_eq!(e.ids, [2, 5, 6, 3, 0]);
        assert_eq!(e.attention_mask, [1, 1, 1, 1, 0]);
        let empty = encode(&v, "", 4);
        assert_eq!(empty.ids, [CLS, SEP, PAD, PAD]);
        assert_eq!(encode(&v, "a zzz", 5).ids[2], UNK);
        let cut = encode(&v, "a b a b", 4);
        assert_eq!(cut.ids, [CLS, 5, 6, SEP]);
        let tail = encode_tail(&v, "a b a b", 4);
        assert_eq!(tail.ids, [CLS, 5, 6, SEP]);
        let tail = encode_tail(&v, "b b b a", 4);
        assert_eq!(tail.ids, [CLS, 6, 5, SEP]);
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = build_vocab(&texts(&["place a red block .", "ok"]), 1, 100).unwrap();
        let s = v.to_file_string();
        assert!(s.starts_with("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n"));
        assert_eq!(Vocabulary::from_file_string(&s).unwrap(), v);
        assert!(Vocabulary::from_file_string("a\nb\n").is_err());
    }

    #[test]
    fn zero_prob_masks_nothing() {
        let v = build_vocab(&texts(&["a b c d"]), 1, 100).unwrap();
        let e = encode(&v, "a b c d", 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = mask_tokens(&e, &MaskingConfig::with_prob(0.0), &mut rng, &v);
        assert_eq!(out.masked_ids, e.ids);
        assert!(out.labels.iter().all(|&l| l == IGNORE));
    }

    /// Always yields zero, forcing selection and the MASK branch.
    struct ZeroRng;

    impl rand::RngCore for ZeroRng {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0)
        }
    }

    #[test]
    fn forced_mask_branch() {
        let v = build_vocab(&texts(&["a b c d"]), 1, 100).unwrap();
        let e = encode(&v, "a b c d", 8);
        let out = mask_tokens(&e, &MaskingConfig::with_prob(1.0), &mut ZeroRng, &v);
        for i in 0..8 {
            if (1..=4).contains(&i) {
                assert_eq!(out.masked_ids[i], MASK);
                assert_eq!(out.labels[i], e.ids[i] as i64);
            } else {
                assert_eq!(out.masked_ids[i], e.ids[i]);
                assert_eq!(out.labels[i], IGNORE);
            }
        }
    }

    #[test]
    fn masking_statistics() {
        let words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let v = build_vocab(&[words.join(" ")], 1, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = MaskingConfig::with_prob(0.15);
        let (mut content, mut selected, mut masked, mut random, mut kept) = (0usize, 0, 0, 0, 0);
        while content < 100_000 {
            let text: Vec<&str> = (0..30).map(|_| words[rng.random_range(0..50)].as_str()).collect();
            let e = encode(&v, &text.join(" "), 32);
            let out = mask_tokens(&e, &cfg, &mut rng, &v);
            content += 30;
            for i in 0..e.len() {
                if out.labels[i] == IGNORE {
                    assert_eq!(out.masked_ids[i], e.ids[i]);
                    continue;
                }
                selected += 1;
                if out.masked_ids[i] == MASK {
                    masked += 1;
                } else if out.masked_ids[i] == e.ids[i] {
                    kept += 1;
                } else {
                    random += 1;
                }
            }
        }
        let sel = selected as f64 / content as f64;
        assert!((0.14..=0.16).contains(&sel), "{sel}");
        let f = |n: usize| n as f64 / selected as f64;
        // a random draw can coincide with the original token (1 in 50)
        assert!((f(masked) - 0.8).abs() < 0.02);
        assert!((f(random) - 0.1).abs() < 0.02);
        assert!((f(kept) - 0.1).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn decode_recovers_in_vocab_tokens(words in proptest::collection::vec("[a-e]{1,3}", 0..12)) {
            let text = words.join(" ");
            let v = build_vocab(&[text.clone(), "seed".into()], 1, 1000).unwrap();
            let e = encode(&v, &text, 16);
            let kept: Vec<&str> = words.iter().take(14).map(String::as_str).collect();
            prop_assert_eq!(decode(&v, &e.ids), kept.join(" "));
        }

        #[test]
        fn masking_invariants(seed in any::<u64>(), p in 0.0f64..=1.0, n in 0usize..14) {
            let words: Vec<String> = (0..n).map(|i| format!("t{}", i % 5)).collect();
            let v = build_vocab(&["t0 t1 t2 t3 t4".to_string()], 1, 100).unwrap();
            let e = encode(&v, &words.join(" "), 16);
            let cfg = MaskingConfig::with_prob(p);
            let a = mask_tokens(&e, &cfg, &mut ChaCha8Rng::seed_from_u64(seed), &v);
            let b = mask_tokens(&e, &cfg, &mut ChaCha8Rng::seed_from_u64(seed), &v);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.masked_ids.len(), e.len());
            for i in 0..e.len() {
                let special = matches!(e.ids[i], CLS | SEP | PAD);
                if special {
                    prop_assert_eq!(a.masked_ids[i], e.ids[i]);
                    prop_assert_eq!(a.labels[i], IGNORE);
                }
                if a.labels[i] == IGNORE {
                    prop_assert_eq!(a.masked_ids[i], e.ids[i]);
                } else {
                    prop_assert_eq!(a.labels[i], e.ids[i] as i64);
                }
            }
        }
    }
}
