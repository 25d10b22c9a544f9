//! Dialogue corpus ingestion.
//!
//! Corpora are JSONL files, one dialogue per line:
//! `{"dialogue_id": str, "domains": [str], "turns": [{"speaker": "user"|"system", "text": str}]}`.
//!
//! Contexts are serialized with the tag scheme
//! `<domain> d1, d2 <domain> <history> <u> ... <u> <s> ... <s> <history> current`
//! where the history block holds the turns before the current utterance
//! (the same tag closes each span) and an empty history holds the literal
//! `STARTOFDIALOGUE`.
//!
//! The context window counts utterances, current one included. Note the
//! tension upstream: one part of the source setup describes the context
//! as all previous utterances while the experimental setup fixes a
//! window of 3; here the window is configurable and defaults to 3.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

pub const TAG_DOMAIN: &str = "<domain>";
pub const TAG_HISTORY: &str = "<history>";
pub const TAG_USER: &str = "<u>";
pub const TAG_SYSTEM: &str = "<s>";
pub const START_OF_DIALOGUE: &str = "STARTOFDIALOGUE";

pub const DEFAULT_CONTEXT_WINDOW: usize = 3;
pub const DEFAULT_MAX_VOCAB: usize = 8000;
pub const DEFAULT_MIN_FREQ: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Speaker::User => write!(f, "user"),
            Speaker::System => write!(f, "system"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

/// One conversation; speakers are recorded as given, strict alternation
/// is not assumed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    #[serde(default)]
    pub domains: Vec<String>,
    pub turns: Vec<Turn>,
}

/// One (context, gold response) pair produced by windowing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingExample {
    pub context_text: String,
    pub gold_text: String,
    pub dialogue_id: String,
    pub turn_index: usize,
}

/// Malformed-line report from [`load_jsonl`].
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub total_lines: usize,
    /// (1-based line number, what was wrong with it)
    pub skipped: Vec<(usize, String)>,
}

/// Read a JSONL corpus. Malformed lines are collected into the report;
/// a file that yields zero valid dialogues is a fatal error.
pub fn load_jsonl(path: &Path) -> Result<(Vec<Dialogue>, LoadReport)> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Corpus(format!("cannot open {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut dialogues = Vec::new();
    let mut report = LoadReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.total_lines += 1;
        match serde_json::from_str::<Dialogue>(&line) {
            Ok(d) if d.turns.is_empty() => {
                report.skipped.push((i + 1, "empty turns".into()));
            }
            Ok(d) => dialogues.push(d),
            Err(e) => report.skipped.push((i + 1, e.to_string())),
        }
    }
    if dialogues.is_empty() {
        return Err(Error::EmptyCorpus {
            path: path.display().to_string(),
            detail: format!(
                "{} lines, {} skipped",
                report.total_lines,
                report.skipped.len()
            ),
        });
    }
    Ok((dialogues, report))
}

pub fn write_jsonl(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in dialogues {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

// ── Tokenizer ───────────────────────────────────────────────────────

const TAG_LITERALS: [&str; 5] = [TAG_DOMAIN, TAG_HISTORY, TAG_USER, TAG_SYSTEM, START_OF_DIALOGUE];

/// Lowercase word-level tokenizer: serialization tags stay atomic,
/// punctuation becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut rest = text;
    'outer: while !rest.is_empty() {
        // earliest tag occurrence wins
        let mut best: Option<(usize, &str)> = None;
        for tag in TAG_LITERALS {
            if let Some(pos) = rest.find(tag) {
                if best.map_or(true, |(b, _)| pos < b) {
                    best = Some((pos, tag));
                }
            }
        }
        match best {
            Some((pos, tag)) => {
                tokenize_words(&rest[..pos], &mut tokens);
                tokens.push(tag.to_string());
                rest = &rest[pos + tag.len()..];
            }
            None => {
                tokenize_words(rest, &mut tokens);
                break 'outer;
            }
        }
    }
    tokens
}

fn tokenize_words(segment: &str, out: &mut Vec<String>) {
    let mut word = String::new();
    for c in segment.to_lowercase().chars() {
        if c.is_alphanumeric() {
            word.push(c);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

// ── Vocabulary ──────────────────────────────────────────────────────

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

const RESERVED: [&str; 9] = [
    "<pad>",
    "<unk>",
    "<bos>",
    "<eos>",
    TAG_DOMAIN,
    TAG_HISTORY,
    TAG_USER,
    TAG_SYSTEM,
    START_OF_DIALOGUE,
];

/// Token table with fixed reserved ids at `0..RESERVED.len()`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Rebuild the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn reserved_len() -> usize {
        RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Render generated ids back to text, dropping pad/bos/eos.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<String> = ids
            .iter()
            .filter(|&&id| id != PAD_ID && id != BOS_ID && id != EOS_ID && id < self.tokens.len())
            .map(|&id| self.tokens[id].clone())
            .collect();
        detokenize(&words)
    }

    /// FNV-1a over the token list; checkpoints refuse to load under a
    /// different vocabulary.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::fnv1a_init();
        for t in &self.tokens {
            h = crate::fnv1a(h, t.as_bytes());
            h = crate::fnv1a(h, &[0]);
        }
        h
    }
}

/// Count token frequencies over `texts` and keep the most frequent up to
/// `max_size` total entries (reserved included). Frequency ties break
/// lexicographically; tokens under `min_freq` map to unk.
pub fn build_vocab<'a, I>(texts: I, max_size: usize, min_freq: usize) -> Vocab
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for tok in tokenize(text) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    for r in RESERVED {
        counts.remove(r);
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq.max(1))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let budget = max_size.saturating_sub(tokens.len());
    tokens.extend(ranked.into_iter().take(budget).map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}

// ── Context serialization & windowing ───────────────────────────────

fn wrap_turn(turn: &Turn) -> String {
    let tag = match turn.speaker {
        Speaker::User => TAG_USER,
        Speaker::System => TAG_SYSTEM,
    };
    format!("{tag} {} {tag}", turn.text)
}

/// Serialize the model input for the system turn at `turn_index`.
///
/// The window counts utterances, the current one included: the history
/// block holds the `window - 1` turns before the current utterance, and
/// the current utterance follows the block bare. With nothing before the
/// current utterance the history block holds `STARTOFDIALOGUE`.
pub fn serialize_context(dialogue: &Dialogue, turn_index: usize, window: usize) -> Result<String> {
    if window == 0 {
        return Err(Error::Corpus("context window must be at least 1".into()));
    }
    if turn_index == 0 || turn_index >= dialogue.turns.len() {
        return Err(Error::Corpus(format!(
            "dialogue {}: turn {turn_index} has no preceding turn",
            dialogue.dialogue_id
        )));
    }
    if dialogue.turns[turn_index].speaker != Speaker::System {
        return Err(Error::Corpus(format!(
            "dialogue {}: turn {turn_index} is not a system turn",
            dialogue.dialogue_id
        )));
    }
    let current = turn_index - 1;
    let history_start = current.saturating_sub(window - 1);
    let mut parts: Vec<String> = vec![TAG_DOMAIN.to_string()];
    if !dialogue.domains.is_empty() {
        parts.push(dialogue.domains.join(", "));
    }
    parts.push(TAG_DOMAIN.to_string());
    parts.push(TAG_HISTORY.to_string());
    if history_start == current {
        parts.push(START_OF_DIALOGUE.to_string());
    } else {
        for turn in &dialogue.turns[history_start..current] {
            parts.push(wrap_turn(turn));
        }
    }
    parts.push(TAG_HISTORY.to_string());
    parts.push(dialogue.turns[current].text.clone());
    Ok(parts.join(" "))
}

/// Window every system turn (with at least one preceding turn) of every
/// dialogue into a training example, in input order.
pub fn window_examples(dialogues: &[Dialogue], window: usize) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for d in dialogues {
        for (t, turn) in d.turns.iter().enumerate() {
            if t == 0 || turn.speaker != Speaker::System {
                continue;
            }
            out.push(TrainingExample {
                context_text: serialize_context(d, t, window)?,
                gold_text: turn.text.clone(),
                dialogue_id: d.dialogue_id.clone(),
                turn_index: t,
            });
        }
    }
    Ok(out)
}

/// Strip serialization tags for providers that embed raw text.
pub fn strip_tags(text: &str) -> String {
    let mut s = text.to_string();
    for tag in TAG_LITERALS {
        s = s.replace(tag, " ");
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

// ── Split ───────────────────────────────────────────────────────────

/// Deterministic 8:1:1 split at the dialogue level.
pub fn split(
    dialogues: &[Dialogue],
    seed: u64,
) -> Result<(Vec<Dialogue>, Vec<Dialogue>, Vec<Dialogue>)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let n = dialogues.len();
    if n < 10 {
        return Err(Error::Corpus(format!(
            "need at least 10 dialogues to split 8:1:1, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_val = ((n as f64) / 10.0).round() as usize;
    let n_test = n_val;
    let n_train = n - n_val - n_test;
    let pick = |idx: &[usize]| idx.iter().map(|&i| dialogues[i].clone()).collect();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

// ── Converters (best effort) ────────────────────────────────────────

/// MultiWoz 2.2 raw dialogue list → corpus schema. Fields outside the
/// schema (dialogue acts, slots, belief states) are dropped.
pub fn convert_multiwoz(raw: &serde_json::Value) -> Result<Vec<Dialogue>> {
    let list = raw
        .as_array()
        .ok_or_else(|| Error::Corpus("multiwoz: expected a top-level array".into()))?;
    let mut out = Vec::new();
    for (i, d) in list.iter().enumerate() {
        let id = d
            .get("dialogue_id")
            .and_then(|v| v.as_str())
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("multiwoz-{i}"));
        let domains = d
            .get("services")
            .and_then(|v| v.as_array())
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str().map(|s| s.to_string()))
                    .collect()
            })
            .unwrap_or_default();
        let mut turns = Vec::new();
        for t in d
            .get("turns")
            .and_then(|v| v.as_array())
            .into_iter()
            .flatten()
        {
            let speaker = match t.get("speaker").and_then(|v| v.as_str()) {
                Some(s) if s.eq_ignore_ascii_case("user") => Speaker::User,
                Some(s) if s.eq_ignore_ascii_case("system") => Speaker::System,
                _ => continue,
            };
            let text = t
                .get("utterance")
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string();
            turns.push(Turn { speaker, text });
        }
        if !turns.is_empty() {
            out.push(Dialogue {
                dialogue_id: id,
                domains,
                turns,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Corpus("multiwoz: no convertible dialogues".into()));
    }
    Ok(out)
}

/// PersonaChat raw release (`{"train": [...], "valid": [...]}` with
/// per-dialogue `utterances[*].history`) → corpus schema. The longest
/// history plus the final gold candidate reconstructs the dialogue;
/// personas and candidate lists are dropped.
pub fn convert_personachat(raw: &serde_json::Value) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for split_name in ["train", "valid", "test"] {
        let Some(items) = raw.get(split_name).and_then(|v| v.as_array()) else {
            continue;
        };
        for (i, item) in items.iter().enumerate() {
            let Some(utts) = item.get("utterances").and_then(|v| v.as_array()) else {
                continue;
            };
            let Some(last) = utts.last() else { continue };
            let mut texts: Vec<String> = last
                .get("history")
                .and_then(|v| v.as_array())
                .map(|a| {
                    a.iter()
                        .filter_map(|v| v.as_str().map(|s| s.to_string()))
                        .collect()
                })
                .unwrap_or_default();
            if let Some(gold) = last
                .get("candidates")
                .and_then(|v| v.as_array())
                .and_then(|a| a.last())
                .and_then(|v| v.as_str())
            {
                texts.push(gold.to_string());
            }
            if texts.len() < 2 {
                continue;
            }
            // histories alternate starting from the user side
            let turns = texts
                .into_iter()
                .enumerate()
                .map(|(k, text)| Turn {
                    speaker: if k % 2 == 0 {
                        Speaker::User
                    } else {
                        Speaker::System
                    },
                    text,
                })
                .collect();
            out.push(Dialogue {
                dialogue_id: format!("personachat-{split_name}-{i}"),
                domains: vec![],
                turns,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Corpus(
            "personachat: no convertible dialogues".into(),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn dialogue(n_turns: usize) -> Dialogue {
        Dialogue {
            dialogue_id: "d0".into(),
            domains: vec!["train".into(), "hotel".into()],
            turns: (0..n_turns)
                .map(|i| Turn {
                    speaker: if i % 2 == 0 {
                        Speaker::User
                    } else {
                        Speaker::System
                    },
                    text: format!("utterance {i}"),
                })
                .collect(),
        }
    }

    #[test]
    fn load_jsonl_counts_and_skips() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"dialogue_id":"a","domains":[],"turns":[{{"speaker":"user","text":"hi"}},{{"speaker":"system","text":"hello"}}]}}"#).unwrap();
        writeln!(f, r#"{{"dialogue_id":"b","domains":[]}}"#).unwrap();
        writeln!(f, r#"{{"dialogue_id":"c","domains":[],"turns":[{{"speaker":"user","text":"yo"}},{{"speaker":"system","text":"hey"}}]}}"#).unwrap();
        writeln!(f, r#"{{"dialogue_id":"d","domains":[],"turns":[{{"speaker":"user","text":"x"}},{{"speaker":"system","text":"y"}}]}}"#).unwrap();
        let (ds, report) = load_jsonl(f.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].0, 2); // line number of the bad line
    }

    #[test]
    fn load_jsonl_empty_file_is_fatal() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_jsonl(f.path()).is_err());
    }

    #[test]
    fn serialize_window_three_keeps_last_three_utterances() {
        // 5 turns, target = turn 4, window 3: context holds turns 1-3
        // only; turns 1 and 2 in the history block, turn 3 appended.
        let mut d = dialogue(5);
        d.turns[1].speaker = Speaker::System;
        d.turns[2].speaker = Speaker::User;
        d.turns[3].speaker = Speaker::User;
        d.turns[4].speaker = Speaker::System;
        let s = serialize_context(&d, 4, 3).unwrap();
        assert!(!s.contains("utterance 0"), "{s}");
        assert!(s.contains("<s> utterance 1 <s>"), "{s}");
        assert!(s.contains("<u> utterance 2 <u>"), "{s}");
        assert!(s.ends_with("<history> utterance 3"), "{s}");
    }

    #[test]
    fn serialize_first_system_turn_uses_start_of_dialogue() {
        let d = dialogue(2);
        let s = serialize_context(&d, 1, 3).unwrap();
        assert_eq!(
            s,
            "<domain> train, hotel <domain> <history> STARTOFDIALOGUE <history> utterance 0"
        );
    }

    #[test]
    fn serialize_empty_domthan_list() {
        let mut d = dialogue(2);
        d.domains.clear();
        let s = serialize_context(&d, 1, 3).unwrap();
        assert!(s.starts_with("<domain> <domain>"), "{s}");
    }

    #[test]
    fn serialize_rejects_turn_zero_and_user_turns() {
        let d = dialogue(4);
        assert!(serialize_context(&d, 0, 3).is_err());
        assert!(serialize_context(&d, 2, 3).is_err()); // user turn
    }

    #[test]
    fn tokenize_keeps_tags_atomic_and_lowercases() {
        let toks = tokenize("<history> STARTOFDIALOGUE <history> Hello, World!");
        assert_eq!(
            toks,
            vec![
                "<history>",
                "STARTOFDIALOGUE",
                "<history>",
                "hello",
                ",",
                "world",
                "!"
            ]
        );
    }

    #[test]
    fn build_vocab_small_corpus() {
        let texts = ["a b c", "a b", "a"];
        let v = build_vocab(texts.iter().copied(), 100, 1);
        assert_eq!(v.len(), Vocab::reserved_len() + 3);
        // most frequent first
        assert_eq!(v.token(Vocab::reserved_len()), "a");
    }

    #[test]
    fn build_vocab_min_freq_drops_to_unk() {
        let texts = ["common common rare"];
        let v = build_vocab(texts.iter().copied(), 100, 2);
        assert!(v.contains("common"));
        assert_eq!(v.id("rare"), UNK_ID);
    }

    #[test]
    fn build_vocab_breaks_frequency_ties_lexicographically() {
        let texts = ["zeta alpha", "zeta alpha"];
        let v = build_vocab(texts.iter().copied(), Vocab::reserved_len() + 1, 1);
        assert!(v.contains("alpha"));
        assert_eq!(v.id("zeta"), UNK_ID);
    }

    #[test]
    fn split_100_gives_80_10_10() {
        let ds: Vec<Dialogue> = (0..100)
            .map(|i| {
                let mut d = dialogue(2);
                d.dialogue_id = format!("d{i}");
                d
            })
            .collect();
        let (tr, va, te) = split(&ds, 13).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        // partitions are disjoint and cover the input
        let mut ids: Vec<&str> = tr
            .iter()
            .chain(&va)
            .chain(&te)
            .map(|d| d.dialogue_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn split_10_gives_8_1_1_and_fewer_errors() {
        let ds: Vec<Dialogue> = (0..10)
            .map(|i| {
                let mut d = dialogue(2);
                d.dialogue_id = format!("d{i}");
                d
            })
            .collect();
        let (tr, va, te) = split(&ds, 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        assert!(split(&ds[..9], 1).is_err());
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let ds: Vec<Dialogue> = (0..30)
            .map(|i| {
                let mut d = dialogue(2);
                d.dialogue_id = format!("d{i}");
                d
            })
            .collect();
        let (a1, b1, c1) = split(&ds, 42).unwrap();
        let (a2, b2, c2) = split(&ds, 42).unwrap();
        let ids = |v: &[Dialogue]| v.iter().map(|d| d.dialogue_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a1), ids(&a2));
        assert_eq!(ids(&b1), ids(&b2));
        assert_eq!(ids(&c1), ids(&c2));
    }

    #[test]
    fn strip_tags_removes_all_tags() {
        let s = "<domain> train <domain> <history> <u> hi there <u> <history> go on";
        assert_eq!(strip_tags(s), "train hi there go on");
    }

    #[test]
    fn vocab_fingerprint_changes_with_content() {
        let v1 = build_vocab(["a b"].iter().copied(), 100, 1);
        let v2 = build_vocab(["a c"].iter().copied(), 100, 1);
        assert_ne!(v1.fingerprint(), v2.fingerprint());
        assert_eq!(v1.fingerprint(), v1.clone().fingerprint());
    }

    fn normalized(s: &str) -> String {
        s.to_lowercase().chars().filter(|c| !c.is_whitespace()).collect()
    }

    proptest! {
        #[test]
        fn detokenize_tokenize_round_trips_up_to_whitespace(
            s in "[a-zA-Z0-9 .,!?']{0,60}"
        ) {
            let round = detokenize(&tokenize(&s));
            prop_assert_eq!(normalized(&s), normalized(&round));
        }

        #[test]
        fn context_holds_at_most_window_plus_one_utterances(
            n_turns in 2usize..12,
            window in 1usize..6,
        ) {
            let d = dialogue(n_turns);
            for ex in window_examples(&[d], window).unwrap() {
                // count utterance markers: history turns are tag-wrapped
                // (two tags per turn), the current utterance is bare.
                let wrapped = ex.context_text.matches(TAG_USER).count() / 2
                    + ex.context_text.matches(TAG_SYSTEM).count() / 2;
                prop_assert!(wrapped + 1 <= window + 1);
            }
        }

        #[test]
        fn split_partitions_are_disjoint_and_complete(
            n in 10usize..60,
            seed in 0u64..1000,
        ) {
            let ds: Vec<Dialogue> = (0..n)
                .map(|i| {
                    let mut d = dialogue(2);
                    d.dialogue_id = format!("d{i}");
                    d
                })
                .collect();
            let (tr, va, te) = split(&ds, seed).unwrap();
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            let mut ids: Vec<String> = tr.iter().chain(&va).chain(&te)
                .map(|d| d.dialogue_id.clone()).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), n);
        }
    }
}
