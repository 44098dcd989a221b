//! Instruction rendering, vocabulary construction, and fixed-length
//! tokenization for the recommendation task.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Fixed sequence length for every tokenized instruction.
pub const MAX_LEN: usize = 512;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BEGIN_ID: u32 = 2;
pub const END_ID: u32 = 3;
const RESERVED: usize = 4;

/// On truncation, keep the first HEAD_KEEP and last TAIL_KEEP word tokens
/// so both the instruction and the target title survive.
const HEAD_KEEP: usize = 384;
const TAIL_KEEP: usize = MAX_LEN - HEAD_KEEP - 2;

#[derive(Debug)]
pub enum TextError {
    Io(std::io::Error),
    EmptyCorpus,
    Malformed { line: usize, what: String },
}

impl fmt::Display for TextError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::EmptyCorpus => write!(f, "cannot build a vocabulary from an empty corpus"),
            Self::Malformed { line, what } => write!(f, "line {line}: {what}"),
        }
    }
}

impl std::error::Error for TextError {}

impl From<std::io::Error> for TextError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// One observed (item, liked) pair in a user's history.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HistoryEntry {
    pub item: String,
    pub liked: bool,
}

/// One interaction: time-ordered history, a target item, a binary label.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InteractionRecord {
    pub user: String,
    pub history: Vec<HistoryEntry>,
    pub target: String,
    pub label: u8,
}

/// Fixed-length id sequence with its attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub n_real: usize,
}

/// Word-level vocabulary with reserved pad/unknown/begin/end ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// UTF-8 lines "token<TAB>id", ordered by id.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), TextError> {
        let mut f = std::fs::File::create(path)?;
        for (i, w) in self.words.iter().enumerate() {
            writeln!(f, "{w}\t{}", i + RESERVED)?;
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Vocabulary, TextError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut words = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (word, id) = line.split_once('\t').ok_or_else(|| TextError::Malformed {
                line: n + 1,
                what: "expected token<TAB>id".into(),
            })?;
            let id: usize = id.parse().map_err(|_| TextError::Malformed {
                line: n + 1,
                what: format!("bad id '{id}'"),
            })?;
            if id != words.len() + RESERVED {
                return Err(TextError::Malformed {
                    line: n + 1,
                    what: format!("id {id} out of order"),
                });
            }
            words.push(word.to_string());
        }
        Ok(Vocabulary::from_words(words))
    }

    fn from_words(words: Vec<String>) -> Vocabulary {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), (i + RESERVED) as u32))
            .collect();
        Vocabulary { words, index }
    }
}

/// Lowercased split on anything that is not alphanumeric.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Keep the `max_size - 4` most frequent tokens; ties break lexicographically.
pub fn build_vocab(corpus: &[String], max_size: usize) -> Result<Vocabulary, TextError> {
    if corpus.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for text in corpus {
        for tok in word_tokens(text) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let keep = max_size.saturating_sub(RESERVED);
    ranked.truncate(keep);
    Ok(Vocabulary::from_words(ranked.into_iter().map(|(w, _)| w).collect()))
}

/// Counters surfaced by instruction rendering.
#[derive(Debug, Default, Clone)]
pub struct RenderStats {
    pub missing_titles: usize,
}

/// Look up item titles when rendering instructions.
pub trait TitleLookup {
    fn title(&self, item: &str) -> Option<&str>;
}

impl TitleLookup for HashMap<String, String> {
    fn title(&self, item: &str) -> Option<&str> {
        self.get(item).map(String::as_str)
    }
}

/// Deterministic instruction template. The label never appears in the text;
/// it supervises the classifier head.
pub fn build_instruction(
    rec: &InteractionRecord,
    titles: &dyn TitleLookup,
    stats: &mut RenderStats,
) -> String {
    let mut title_of = |item: &str| -> String {
        match titles.title(item) {
            Some(t) => t.to_string(),
            None => {
                stats.missing_titles += 1;
                "<untitled>".to_string()
            }
        }
    };
    let liked: Vec<String> = rec
        .history
        .iter()
        .filter(|h| h.liked)
        .map(|h| title_of(&h.item))
        .collect();
    let disliked: Vec<String> = rec
        .history
        .iter()
        .filter(|h| !h.liked)
        .map(|h| title_of(&h.item))
        .collect();
    let join = |list: &[String]| {
        if list.is_empty() {
            "none".to_string()
        } else {
            list.join("; ")
        }
    };
    format!(
        "Instruction: Given the user's liked and disliked videos, predict whether the user will like the target video.\n\
         Liked: {}\n\
         Disliked: {}\n\
         Target: {}",
        join(&liked),
        join(&disliked),
        title_of(&rec.target),
    )
}

/// begin + word ids + end, truncated head+tail to exactly [`MAX_LEN`],
/// padded with the pad id; the mask marks real tokens.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let words = word_tokens(text);
    let mut word_ids: Vec<u32> = words.iter().map(|w| vocab.id_of(w)).collect();
    if word_ids.len() > MAX_LEN - 2 {
        let tail = word_ids.split_off(word_ids.len() - TAIL_KEEP);
        word_ids.truncate(HEAD_KEEP);
        word_ids.extend(tail);
    }
    let mut ids = Vec::with_capacity(MAX_LEN);
    ids.push(BEGIN_ID);
    ids.extend(&word_ids);
    ids.push(END_ID);
    let n_real = ids.len();
    ids.resize(MAX_LEN, PAD_ID);
    let mut mask = vec![1u8; n_real];
    mask.resize(MAX_LEN, 0);
    TokenSequence { ids, mask, n_real }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn record(history: &[(&str, bool)], target: &str) -> InteractionRecord {
        InteractionRecord {
            user: "u1".into(),
            history: history
                .iter()
                .map(|(i, l)| HistoryEntry { item: i.to_string(), liked: *l })
                .collect(),
            target: target.into(),
            label: 1,
        }
    }

    #[test]
    fn instruction_lists_titles_in_order() {
        let titles = catalog(&[("a", "alpha song"), ("b", "beta tune"), ("c", "gamma jam"), ("t", "delta hit")]);
        let rec = record(&[("a", true), ("b", false), ("c", true)], "t");
        let mut stats = RenderStats::default();
        let text = build_instruction(&rec, &titles, &mut stats);
        assert!(text.contains("Liked: alpha song; gamma jam\n"));
        assert!(text.contains("Disliked: beta tune\n"));
        assert!(text.ends_with("Target: delta hit"));
        assert_eq!(stats.missing_titles, 0);
        // label text never appears
        assert!(!text.contains("label"));
    }

    #[test]
    fn instruction_empty_disliked_branch() {
        let titles = catalog(&[("a", "alpha"), ("t", "tee")]);
        let rec = record(&[("a", true)], "t");
        let text = build_instruction(&rec, &titles, &mut RenderStats::default());
        assert!(text.contains("Disliked: none"));
    }

    #[test]
    fn instruction_is_deterministic() {
        let titles = catalog(&[("a", "alpha"), ("t", "tee")]);
        let rec = record(&[("a", false)], "t");
        let t1 = build_instruction(&rec, &titles, &mut RenderStats::default());
        let t2 = build_instruction(&rec, &titles, &mut RenderStats::default());
        assert_eq!(t1, t2);
    }

    #[test]
    fn missing_title_uses_placeholder_and_counts() {
        let titles = catalog(&[("t", "tee")]);
        let rec = record(&[("ghost", true)], "t");
        let mut stats = RenderStats::default();
        let text = build_instruction(&rec, &titles, &mut stats);
        assert!(text.contains("<untitled>"));
        assert_eq!(stats.missing_titles, 1);
    }

    #[test]
    fn vocab_frequency_then_lexicographic() {
        let vocab = build_vocab(&["a a b".to_string()], 100).unwrap();
        assert_eq!(vocab.id_of("a"), 4);
        assert_eq!(vocab.id_of("b"), 5);

        // tie: both appear once -> lexicographic
        let vocab = build_vocab(&["zed ant".to_string()], 100).unwrap();
        assert_eq!(vocab.id_of("ant"), 4);
        assert_eq!(vocab.id_of("zed"), 5);
    }

    #[test]
    fn vocab_budget_arithmetic() {
        let vocab = build_vocab(&["a b c d e f".to_string()], 5).unwrap();
        assert_eq!(vocab.len(), 5);
        assert!(vocab.contains("a"));
        assert!(!vocab.contains("b"));
    }

    #[test]
    fn vocab_roundtrip() {
        let vocab = build_vocab(&["red green blue red green red".to_string()], 50).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        vocab.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back.len(), vocab.len());
        for w in ["red", "green", "blue"] {
            assert_eq!(back.id_of(w), vocab.id_of(w));
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(build_vocab(&[], 10), Err(TextError::EmptyCorpus)));
    }

    #[test]
    fn tokenize_empty_text() {
        let vocab = build_vocab(&["x".to_string()], 10).unwrap();
        let seq = tokenize("", &vocab);
        assert_eq!(seq.ids.len(), MAX_LEN);
        assert_eq!(seq.n_real, 2);
        assert_eq!(&seq.ids[..3], &[BEGIN_ID, END_ID, PAD_ID]);
        assert_eq!(seq.mask.iter().map(|&m| m as usize).sum::<usize>(), 2);
    }

    #[test]
    fn tokenize_long_text_truncates_to_512() {
        let vocab = build_vocab(&["w".to_string()], 10).unwrap();
        let text = vec!["w"; 2000].join(" ");
        let seq = tokenize(&text, &vocab);
        assert_eq!(seq.ids.len(), MAX_LEN);
        assert_eq!(seq.n_real, MAX_LEN);
        assert_eq!(seq.mask.iter().map(|&m| m as usize).sum::<usize>(), MAX_LEN);
    }

    #[test]
    fn tokenize_unknown_word_maps_to_unk() {
        let vocab = build_vocab(&["known".to_string()], 10).unwrap();
        let seq = tokenize("known mystery", &vocab);
        assert_eq!(seq.ids[1], vocab.id_of("known"));
        assert_eq!(seq.ids[2], UNK_ID);
    }

    #[test]
    fn mask_is_prefix_of_ones_and_pads_match() {
        let vocab = build_vocab(&["a b".to_string()], 10).unwrap();
        for text in ["", "a", "a b a b", &vec!["a"; 700].join(" ")] {
            let seq = tokenize(text, &vocab);
            assert_eq!(seq.ids.len(), MAX_LEN);
            assert_eq!(seq.mask.len(), MAX_LEN);
            let ones = seq.mask.iter().take_while(|&&m| m == 1).count();
            assert_eq!(ones, seq.n_real);
            assert!(seq.mask[ones..].iter().all(|&m| m == 0));
            assert!(seq.ids[ones..].iter().all(|&i| i == PAD_ID));
            let pad_count = seq.ids.iter().filter(|&&i| i == PAD_ID).count();
            assert_eq!(pad_count, MAX_LEN - seq.n_real);
        }
    }

    #[test]
    fn truncation_keeps_target_segment() {
        // A long instruction whose tail carries the target title: the last
        // word tokens must survive truncation.
        let corpus = vec!["filler target marker words".to_string()];
        let vocab = build_vocab(&corpus, 50).unwrap();
        let mut text = vec!["filler"; 1500].join(" ");
        text.push_str(" target marker");
        let seq = tokenize(&text, &vocab);
        assert_eq!(seq.n_real, MAX_LEN);
        let target_id = vocab.id_of("target");
        let marker_id = vocab.id_of("marker");
        // end token sits at position MAX_LEN-1; the two last words precede it
        assert_eq!(seq.ids[MAX_LEN - 2], marker_id);
        assert_eq!(seq.ids[MAX_LEN - 3], target_id);
    }

    #[test]
    fn tokenize_of_instruction_is_deterministic() {
        let titles = catalog(&[("a", "alpha beta"), ("t", "tee")]);
        let rec = record(&[("a", true)], "t");
        let text = build_instruction(&rec, &titles, &mut RenderStats::default());
        let vocab = build_vocab(&[text.clone()], 100).unwrap();
        let s1 = tokenize(&text, &vocab);
        let s2 = tokenize(&text, &vocab);
        assert_eq!(s1, s2);
    }
}
