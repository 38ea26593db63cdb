//! Synthetic key/value retrieval corpus, word codec, and prompt templates.
//!
//! The task: a context is a sequence of `key value` word pairs, exactly one
//! of which carries the question key; the gold answer is that pair's value
//! word. Questions are a single key word. Instance difficulty grows with
//! context length: long contexts spread probability mass over more distinct
//! distractor pairs, so a policy that has not yet learned to key on the
//! question has a lower chance of stumbling onto the answer.
//!
//! The codec is word-level with two reserved ids:
//!
//! * id 0 — the answer marker, whose text form is the phrase
//!   `the answer is`. It is encoded and decoded atomically so that decoded
//!   outputs can carry the exact answer-sentence format the extraction
//!   rules expect.
//! * id 1 — end of sequence, text form `<eos>`.
//!
//! Regular words get dense ids from 2 upward in sorted order, so any two
//! codecs built over the same word set are identical (and hash-identical).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

pub type TokenId = u32;

/// Text form of the answer-marker token (encoded/decoded atomically).
pub const ANSWER_MARKER_TEXT: &str = "the answer is";
/// Text form of the end-of-sequence token.
pub const EOS_TEXT: &str = "<eos>";
pub const ANSWER_MARKER_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
/// Number of reserved ids; regular word ids start here.
pub const RESERVED_TOKENS: u32 = 2;

const MARKER_WORDS: [&str; 3] = ["the", "answer", "is"];

/// Question-answering prompt template. `{context}` and `{question}` are
/// the two slots.
pub fn render_prompt(context: &str, question: &str) -> Result<String> {
    if context.trim().is_empty() {
        return Err(Error::Config("render_prompt: empty context".into()));
    }
    if question.trim().is_empty() {
        return Err(Error::Config("render_prompt: empty question".into()));
    }
    Ok(format!(
        "Please read the following text and answer the question below.\n\
         <text> {context} </text> {question}\n\
         Format your response as follows: \"Therefore, the answer is (insert answer here)\"."
    ))
}

/// The response sentence the prompt instructs the model to produce, with
/// the answer text in the `(insert answer here)` slot. Toy-policy outputs
/// are decoded into this scaffold before scoring; format compliance is
/// assumed of the underlying model, so it is supplied by construction here.
pub fn render_response(answer_text: &str) -> String {
    format!("Therefore, the answer is {answer_text}.")
}

/// Word-level codec with a bijective word/id mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyCodec {
    words: Vec<String>,
    word_to_id: HashMap<String, TokenId>,
}

impl ToyCodec {
    /// Build a codec over the given regular words (deduplicated and sorted;
    /// ids are dense from [`RESERVED_TOKENS`]).
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = words.into_iter().map(Into::into).collect();
        let mut list = Vec::with_capacity(set.len());
        let mut word_to_id = HashMap::new();
        word_to_id.insert(EOS_TEXT.to_string(), EOS_ID);
        for (i, w) in set.into_iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "codec word {w:?} is empty or contains whitespace"
                )));
            }
            if w == EOS_TEXT {
                return Err(Error::Config(format!(
                    "codec word {EOS_TEXT:?} collides with the reserved end-of-sequence form"
                )));
            }
            let id = i as TokenId + RESERVED_TOKENS;
            word_to_id.insert(w.clone(), id);
            list.push(w);
        }
        Ok(Self { words: list, word_to_id })
    }

    /// Vocabulary for a synthetic configuration: all key and value words.
    pub fn for_synth(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut words = Vec::new();
        for i in 0..config.num_keys {
            words.push(config.key_word(i));
        }
        for i in 0..config.num_values {
            words.push(config.value_word(i));
        }
        Self::new(words)
    }

    /// Vocabulary harvested from raw texts (contexts, questions, answers).
    /// Occurrences of the answer-marker phrase map to the reserved id and
    /// contribute no regular words.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Result<Self> {
        let mut words: BTreeSet<String> = BTreeSet::new();
        for text in texts {
            let toks: Vec<&str> = text.split_whitespace().collect();
            let mut i = 0;
            while i < toks.len() {
                if toks[i..].starts_with(&MARKER_WORDS) {
                    i += MARKER_WORDS.len();
                    continue;
                }
                if toks[i] != EOS_TEXT {
                    words.insert(toks[i].to_string());
                }
                i += 1;
            }
        }
        Self::new(words)
    }

    /// Total vocabulary size (reserved ids included).
    pub fn vocab_size(&self) -> usize {
        self.words.len() + RESERVED_TOKENS as usize
    }

    /// Text form of a token id.
    pub fn word_form(&self, id: TokenId) -> Result<&str> {
        match id {
            ANSWER_MARKER_ID => Ok(ANSWER_MARKER_TEXT),
            EOS_ID => Ok(EOS_TEXT),
            _ => self
                .words
                .get((id - RESERVED_TOKENS) as usize)
                .map(String::as_str)
                .ok_or(Error::UnknownToken(id)),
        }
    }

    /// Encode whitespace-separated text. The answer-marker phrase is
    /// matched atomically; any other unknown word is an error naming the
    /// offending word.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let toks: Vec<&str> = text.split_whitespace().collect();
        let mut ids = Vec::with_capacity(toks.len());
        let mut i = 0;
        while i < toks.len() {
            if toks[i..].starts_with(&MARKER_WORDS) {
                ids.push(ANSWER_MARKER_ID);
                i += MARKER_WORDS.len();
                continue;
            }
            let id = self
                .word_to_id
                .get(toks[i])
                .copied()
                .ok_or_else(|| Error::UnknownWord(toks[i].to_string()))?;
            ids.push(id);
            i += 1;
        }
        Ok(ids)
    }

    /// Decode ids into whitespace-normalized text.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            parts.push(self.word_form(id)?);
        }
        Ok(parts.join(" "))
    }

    /// Number of codec tokens in a text.
    pub fn token_count(&self, text: &str) -> Result<usize> {
        Ok(self.encode(text)?.len())
    }

    /// Hex digest of the vocabulary; identifies the codec in checkpoints.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for w in &self.words {
            hasher.update(w.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// Configuration for the synthetic key/value retrieval generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_instances: usize,
    /// Distinct key words (questions draw from these).
    pub num_keys: usize,
    /// Distinct value words (answers draw from these).
    pub num_values: usize,
    /// Inclusive bounds on `input_length` = question tokens + context tokens.
    pub length_range: (usize, usize),
    /// Probability that a distractor pair reuses the gold answer's value
    /// word, so raw token frequency is a decoy signal.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_instances: 64,
            num_keys: 12,
            num_values: 12,
            length_range: (16, 128),
            distractor_rate: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_instances == 0 {
            return Err(Error::Config("num_instances must be positive".into()));
        }
        if self.num_keys < 2 {
            return Err(Error::Config(
                "num_keys must be at least 2 so distractor pairs can use other keys".into(),
            ));
        }
        if self.num_values == 0 {
            return Err(Error::Config("num_values must be positive".into()));
        }
        let (lo, hi) = self.length_range;
        if lo > hi {
            return Err(Error::Config(format!(
                "length_range ({lo}, {hi}) has min above max"
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::Config(format!(
                "distractor_rate {} outside [0, 1]",
                self.distractor_rate
            )));
        }
        self.pair_bounds()?;
        Ok(())
    }

    /// Valid pair counts: an instance with `p` pairs has input length
    /// `1 + 2p` (one question token plus `p` key/value pairs).
    fn pair_bounds(&self) -> Result<(usize, usize)> {
        let (lo, hi) = self.length_range;
        let p_lo = std::cmp::max(1, lo.saturating_sub(1).div_ceil(2));
        let p_hi = hi.saturating_sub(1) / 2;
        if p_hi < p_lo {
            return Err(Error::Config(format!(
                "length_range ({lo}, {hi}) cannot hold a question plus at least one key/value pair"
            )));
        }
        Ok((p_lo, p_hi))
    }

    fn word_width(&self) -> usize {
        let largest = self.num_keys.max(self.num_values).saturating_sub(1);
        std::cmp::max(2, largest.to_string().len())
    }

    pub fn key_word(&self, i: usize) -> String {
        format!("k{:0w$}", i, w = self.word_width())
    }

    pub fn value_word(&self, i: usize) -> String {
        format!("v{:0w$}", i, w = self.word_width())
    }
}

/// One QA instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub context: String,
    pub question: String,
    #[serde(rename = "answer")]
    pub gold_answer: String,
    /// Codec token count of question plus context; derived, not serialized.
    #[serde(skip)]
    pub input_length: usize,
}

/// Generate a deterministic synthetic dataset. Instance `i` draws from its
/// own RNG stream, so the output is byte-identical for a fixed config on
/// any platform.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<Instance>> {
    config.validate()?;
    let (p_lo, p_hi) = config.pair_bounds()?;
    let mut instances = Vec::with_capacity(config.num_instances);
    for i in 0..config.num_instances {
        let mut rng = stream(config.seed, &[purpose::DATAGEN, i as u64]);
        let pairs = rng.gen_range(p_lo..=p_hi);
        let gold_key = rng.gen_range(0..config.num_keys);
        let gold_value = rng.gen_range(0..config.num_values);
        let gold_pos = rng.gen_range(0..pairs);
        let mut words = Vec::with_capacity(2 * pairs);
        for j in 0..pairs {
            if j == gold_pos {
                words.push(config.key_word(gold_key));
                words.push(config.value_word(gold_value));
            } else {
                let mut key = rng.gen_range(0..config.num_keys - 1);
                if key >= gold_key {
                    key += 1;
                }
                let value = if rng.gen_bool(config.distractor_rate) {
                    gold_value
                } else {
                    rng.gen_range(0..config.num_values)
                };
                words.push(config.key_word(key));
                words.push(config.value_word(value));
            }
        }
        instances.push(Instance {
            id: format!("synth-{i:06}"),
            context: words.join(" "),
            question: config.key_word(gold_key),
            gold_answer: config.value_word(gold_value),
            input_length: 1 + 2 * pairs,
        });
    }
    Ok(instances)
}

/// Write a dataset as UTF-8 JSON lines with fields
/// `{"id", "context", "question", "answer"}`.
pub fn save_dataset(path: &Path, instances: &[Instance]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst)
            .map_err(|e| Error::Config(format!("serializing instance {}: {e}", inst.id)))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a dataset, build its codec from the observed words, and compute
/// each instance's input length. Malformed lines and duplicate ids are
/// errors naming the 1-based line number.
pub fn load_dataset(path: &Path) -> Result<(ToyCodec, Vec<Instance>)> {
    let raw = fs::read_to_string(path)?;
    let mut instances: Vec<Instance> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in raw.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            return Err(Error::Data {
                line: lineno,
                msg: "blank line in dataset".into(),
            });
        }
        let inst: Instance = serde_json::from_str(line).map_err(|e| Error::Data {
            line: lineno,
            msg: e.to_string(),
        })?;
        if !seen.insert(inst.id.clone()) {
            return Err(Error::Data {
                line: lineno,
                msg: format!("duplicate instance id {:?}", inst.id),
            });
        }
        instances.push(inst);
    }
    let codec = ToyCodec::from_texts(
        instances
            .iter()
            .flat_map(|i| [i.context.as_str(), i.question.as_str(), i.gold_answer.as_str()]),
    )?;
    for inst in &mut instances {
        inst.input_length =
            codec.token_count(&inst.question)? + codec.token_count(&inst.context)?;
    }
    Ok((codec, instances))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn small_config() -> SynthConfig {
        SynthConfig {
            num_instances: 4,
            num_keys: 6,
            num_values: 6,
            length_range: (9, 33),
            distractor_rate: 0.2,
            seed: 7,
        }
    }

    #[test]
    fn test_generate_has_exactly_one_question_pair() {
        let instances = generate_synthetic(&small_config()).unwrap();
        assert_eq!(instances.len(), 4);
        for inst in &instances {
            let words: Vec<&str> = inst.context.split_whitespace().collect();
            let hits = words
                .chunks(2)
                .filter(|pair| pair[0] == inst.question)
                .count();
            assert_eq!(hits, 1, "instance {} question pair count", inst.id);
        }
    }

    #[test]
    fn test_gold_value_follows_question_key() {
        let mut config = small_config();
        config.num_instances = 64;
        for inst in generate_synthetic(&config).unwrap() {
            let words: Vec<&str> = inst.context.split_whitespace().collect();
            let pos = words.iter().position(|w| *w == inst.question).unwrap();
            assert_eq!(words[pos + 1], inst.gold_answer);
        }
    }

    #[test]
    fn test_generate_is_deterministic() {
        let a = generate_synthetic(&small_config()).unwrap();
        let b = generate_synthetic(&small_config()).unwrap();
        assert_eq!(a, b);
        let lines_a: Vec<String> = a.iter().map(|i| serde_json::to_string(i).unwrap()).collect();
        let lines_b: Vec<String> = b.iter().map(|i| serde_json::to_string(i).unwrap()).collect();
        assert_eq!(lines_a, lines_b);
    }

    #[test]
    fn test_lengths_respect_range_and_span_buckets() {
        let config = SynthConfig {
            num_instances: 1000,
            num_keys: 12,
            num_values: 12,
            length_range: (16, 512),
            distractor_rate: 0.1,
            seed: 3,
        };
        let instances = generate_synthetic(&config).unwrap();
        let mut short = 0usize;
        let mut long = 0usize;
        for inst in &instances {
            assert!(inst.input_length >= 16 && inst.input_length <= 512);
            if inst.input_length <= 128 {
                short += 1;
            } else {
                long += 1;
            }
        }
        assert!(short > 0, "no instances in the short bucket");
        assert!(long > 0, "no instances in the long bucket");
    }

    #[test]
    fn test_input_length_matches_codec_token_count() {
        let config = small_config();
        let codec = ToyCodec::for_synth(&config).unwrap();
        for inst in generate_synthetic(&config).unwrap() {
            let counted = codec.token_count(&inst.question).unwrap()
                + codec.token_count(&inst.context).unwrap();
            assert_eq!(inst.input_length, counted);
        }
    }

    #[test]
    fn test_length_range_too_small_is_config_error() {
        let mut config = small_config();
        config.length_range = (8, 8);
        let err = generate_synthetic(&config).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        config.length_range = (1, 2);
        assert!(generate_synthetic(&config).is_err());
    }

    #[test]
    fn test_save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let instances = generate_synthetic(&small_config()).unwrap();
        save_dataset(&path, &instances).unwrap();
        let (codec, loaded) = load_dataset(&path).unwrap();
        assert_eq!(instances, loaded);
        assert_eq!(codec, ToyCodec::for_synth(&small_config()).unwrap());
        assert_eq!(codec.hash(), ToyCodec::for_synth(&small_config()).unwrap().hash());
    }

    #[test]
    fn test_load_reports_line_of_malformed_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"id\":\"a\",\"context\":\"k0 v0\",\"question\":\"k0\",\"answer\":\"v0\"}\n",
                "{\"id\":\"b\",\"context\":\"k1 v1\",\"question\":\"k1\"}\n",
            ),
        )
        .unwrap();
        match load_dataset(&path).unwrap_err() {
            Error::Data { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("answer"), "message was {msg:?}");
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn test_load_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let rec = "{\"id\":\"a\",\"context\":\"k0 v0\",\"question\":\"k0\",\"answer\":\"v0\"}\n";
        fs::write(&path, format!("{rec}{rec}")).unwrap();
        match load_dataset(&path).unwrap_err() {
            Error::Data { line, .. } => assert_eq!(line, 2),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn test_render_prompt_shape() {
        let prompt = render_prompt("k03 v11 k05 v02", "k03").unwrap();
        assert!(prompt.contains("<text> k03 v11 k05 v02 </text> k03"));
        assert!(prompt.ends_with("(insert answer here)\"."));
        assert!(prompt.starts_with("Please read the following text"));
        assert_eq!(prompt.lines().count(), 3);
    }

    #[test]
    fn test_render_prompt_rejects_empty_slots() {
        assert!(render_prompt("", "q").is_err());
        assert!(render_prompt("ctx", " ").is_err());
    }

    #[test]
    fn test_render_response_carries_extraction_format() {
        assert_eq!(render_response("v11"), "Therefore, the answer is v11.");
        assert_eq!(render_response(""), "Therefore, the answer is .");
    }

    #[test]
    fn test_encode_decode_round_trip() {
        let codec = ToyCodec::new(["k03", "v11", "k05"]).unwrap();
        let ids = codec.encode("k03 v11").unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(codec.decode(&ids).unwrap(), "k03 v11");
    }

    #[test]
    fn test_marker_phrase_encodes_atomically() {
        let codec = ToyCodec::new(["v11"]).unwrap();
        let ids = codec.encode("the answer is v11").unwrap();
        assert_eq!(ids[0], ANSWER_MARKER_ID);
        assert_eq!(ids.len(), 2);
        assert_eq!(codec.decode(&ids).unwrap(), "the answer is v11");
        assert_eq!(codec.encode(EOS_TEXT).unwrap(), vec![EOS_ID]);
    }

    #[test]
    fn test_unknown_word_is_named_in_error() {
        let codec = ToyCodec::new(["k00"]).unwrap();
        match codec.encode("k00 zzz").unwrap_err() {
            Error::UnknownWord(w) => assert_eq!(w, "zzz"),
            other => panic!("expected unknown word, got {other:?}"),
        }
    }

    #[test]
    fn test_unknown_token_id_is_error() {
        let codec = ToyCodec::new(["k00"]).unwrap();
        assert!(matches!(codec.decode(&[99]), Err(Error::UnknownToken(99))));
    }

    #[test]
    fn test_codec_hash_tracks_vocabulary() {
        let a = ToyCodec::new(["k00", "v00"]).unwrap();
        let b = ToyCodec::new(["v00", "k00"]).unwrap();
        let c = ToyCodec::new(["k00", "v01"]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn test_round_trip_random_token_strings() {
        let config = small_config();
        let codec = ToyCodec::for_synth(&config).unwrap();
        let vocab: Vec<String> = (0..config.num_keys)
            .map(|i| config.key_word(i))
            .chain((0..config.num_values).map(|i| config.value_word(i)))
            .collect();
        let mut rng = stream(11, &[99]);
        for _ in 0..100 {
            let n = rng.gen_range(1..12);
            let mut words: Vec<&str> = Vec::new();
            for _ in 0..n {
                words.push(vocab.choose(&mut rng).unwrap());
            }
            let text = words.join(" ");
            let ids = codec.encode(&text).unwrap();
            assert_eq!(codec.decode(&ids).unwrap(), text);
        }
    }

    proptest! {
        #[test]
        fn prop_generated_instances_are_solvable(seed in 0u64..500) {
            let config = SynthConfig { seed, num_instances: 2, ..small_config() };
            for inst in generate_synthetic(&config).unwrap() {
                let words: Vec<&str> = inst.context.split_whitespace().collect();
                prop_assert_eq!(words.len() % 2, 0);
                let pos = words.iter().position(|w| *w == inst.question).unwrap();
                prop_assert_eq!(words[pos + 1], inst.gold_answer.as_str());
            }
        }

        #[test]
        fn prop_codec_round_trip(ids in proptest::collection::vec(0u32..14, 0..20)) {
            let config = small_config();
            let codec = ToyCodec::for_synth(&config).unwrap();
            let text = codec.decode(&ids).unwrap();
            let back = codec.encode(&text).unwrap();
            prop_assert_eq!(back, ids);
        }
    }
}
