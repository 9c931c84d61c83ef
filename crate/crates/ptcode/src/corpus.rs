//! Core data model: utterances, conversations, tokenization, vocabulary,
//! pre-trained word vectors, and the JSON-Lines dataset format shared by
//! every stage of the pipeline.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Matrix;
use crate::rng::named_stream;

/// Reserved unknown-token literal, always at index 0.
pub const UNK_TOKEN: &str = "<unk>";

/// One utterance of a conversation.
///
/// `tokens` holds vocabulary indices and is re-derived from `text` via
/// [`index_conversations`]; it is never serialized. `label` is the raw label
/// string from the dataset; `class` is the schema-resolved class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub text: String,
    pub tokens: Vec<usize>,
    pub speaker: Option<String>,
    pub label: Option<String>,
    pub class: Option<usize>,
}

impl Utterance {
    pub fn from_text(text: impl Into<String>) -> Self {
        Utterance {
            text: text.into(),
            tokens: Vec::new(),
            speaker: None,
            label: None,
            class: None,
        }
    }
}

/// An ordered utterance sequence with a stable id; the unit of batching and
/// of completion-instance generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Lowercase, split punctuation off as separate tokens, split on whitespace.
/// An apostrophe directly followed by a letter or digit glues to that run,
/// so clitics come out as one token: `it's` -> `it`, `'s`.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_alphanumeric() {
            cur.push(c);
        } else if c == '\'' && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric()) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token/index bijection with the unknown token pinned at index 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from a corpus: every token with frequency >= `min_count`,
    /// ordered by descending frequency with lexicographic tie-break.
    pub fn build(corpus: &[Conversation], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for conv in corpus {
            for utt in &conv.utterances {
                for tok in tokenize(&utt.text) {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t)))
    }

    /// Build directly from an ordered token list (index 0 is always the
    /// unknown token, prepended here).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut list = vec![UNK_TOKEN.to_string()];
        list.extend(tokens);
        let index = list
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens: list,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of a token; unseen tokens map to the unknown index 0.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(|s| s.as_str())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// One token per line; line number equals index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let mut tokens = Vec::new();
        for line in r.lines() {
            tokens.push(line?);
        }
        if tokens.first().map(|s| s.as_str()) != Some(UNK_TOKEN) {
            return Err(Error::Data(format!(
                "{}: vocabulary file must start with {UNK_TOKEN}",
                path.display()
            )));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { tokens, index })
    }
}

/// `|V| x d_w` word-embedding matrix.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub weights: Matrix,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// All rows drawn uniform from `[-0.1, 0.1]`, the same range used for
    /// out-of-file tokens in [`load_pretrained_vectors`].
    pub fn random(vocab_size: usize, d_w: usize, seed: u64) -> Self {
        let mut rng = named_stream(seed, "embedding");
        EmbeddingTable {
            weights: Matrix::uniform(vocab_size, d_w, 0.1, &mut rng),
            trainable: false,
        }
    }
}

/// How much of the vocabulary was covered by the vector file.
#[derive(Clone, Debug, Serialize)]
pub struct VectorLoadReport {
    pub matched: usize,
    pub vocab_size: usize,
    pub fraction: f64,
}

/// Load word vectors from a text file of `token v_1 ... v_{d_w}` lines.
/// Vocabulary tokens found in the file get the file row verbatim; the rest
/// get a per-token random row uniform in `[-0.1, 0.1]` drawn from `seed`.
pub fn load_pretrained_vectors(
    path: &Path,
    vocab: &Vocabulary,
    d_w: usize,
    seed: u64,
) -> Result<(EmbeddingTable, VectorLoadReport)> {
    if d_w == 0 {
        return Err(Error::Config("word dimension must be positive".into()));
    }
    let r = BufReader::new(File::open(path)?);
    let mut file_vectors: HashMap<String, Vec<f64>> = HashMap::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap_or_default().to_string();
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = values.map_err(|e| Error::ParseLine {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad float: {e}"),
        })?;
        if values.len() != d_w {
            return Err(Error::ParseLine {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected {d_w} floats, found {}", values.len()),
            });
        }
        if vocab.contains(&token) {
            file_vectors.insert(token, values);
        }
    }

    let mut rng = named_stream(seed, "embedding");
    let mut weights = Matrix::zeros(vocab.len(), d_w);
    let mut matched = 0;
    for i in 0..vocab.len() {
        let token = vocab.token(i).unwrap();
        match file_vectors.get(token) {
            Some(v) => {
                weights.row_mut(i).copy_from_slice(v);
                matched += 1;
            }
            None => {
                for slot in weights.row_mut(i) {
                    *slot = rng.random_range(-0.1..=0.1);
                }
            }
        }
    }
    let report = VectorLoadReport {
        matched,
        vocab_size: vocab.len(),
        fraction: matched as f64 / vocab.len() as f64,
    };
    Ok((
        EmbeddingTable {
            weights,
            trainable: false,
        },
        report,
    ))
}

/// Fill `tokens` for every utterance from its text and the vocabulary.
pub fn index_conversations(convs: &mut [Conversation], vocab: &Vocabulary) {
    for conv in convs {
        for utt in &mut conv.utterances {
            utt.tokens = tokenize(&utt.text)
                .iter()
                .map(|t| vocab.lookup(t))
                .collect();
        }
    }
}

/// Check that every utterance produced at least one token.
pub fn ensure_indexed(convs: &[Conversation]) -> Result<()> {
    for conv in convs {
        for (i, utt) in conv.utterances.iter().enumerate() {
            if utt.tokens.is_empty() {
                return Err(Error::Data(format!(
                    "conversation `{}` utterance {i} has no tokens (text: {:?})",
                    conv.id, utt.text
                )));
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    text: String,
    speaker: Option<String>,
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    votes: Option<BTreeMap<String, u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intensities: Option<BTreeMap<String, f64>>,
}

#[derive(Serialize, Deserialize)]
struct ConversationRecord {
    id: String,
    utterances: Vec<UtteranceRecord>,
}

/// Write conversations as JSON-Lines, one conversation per line.
pub fn write_conversations(path: &Path, convs: &[Conversation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for conv in convs {
        let rec = ConversationRecord {
            id: conv.id.clone(),
            utterances: conv
                .utterances
                .iter()
                .map(|u| UtteranceRecord {
                    text: u.text.clone(),
                    speaker: u.speaker.clone(),
                    label: u.label.clone(),
                    votes: None,
                    intensities: None,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Raw multi-label annotation carried by some datasets; resolved to a single
/// label at ingestion (see `uler::resolve_multilabel`).
pub struct RawAnnotation {
    pub votes: BTreeMap<String, u32>,
    pub intensities: BTreeMap<String, f64>,
}

/// Read a JSON-Lines conversation dataset. Token ids are left empty; call
/// [`index_conversations`] once a vocabulary exists. Per-utterance vote
/// annotations, when present, are returned alongside for label resolution.
pub fn read_conversations_full(
    path: &Path,
) -> Result<(Vec<Conversation>, Vec<Vec<Option<RawAnnotation>>>)> {
    let r = BufReader::new(File::open(path)?);
    let mut convs = Vec::new();
    let mut annotations = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ConversationRecord =
            serde_json::from_str(&line).map_err(|e| Error::ParseLine {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        let mut utterances = Vec::with_capacity(rec.utterances.len());
        let mut anns = Vec::with_capacity(rec.utterances.len());
        for u in rec.utterances {
            anns.push(match (u.votes, u.intensities) {
                (None, None) => None,
                (votes, intensities) => Some(RawAnnotation {
                    votes: votes.unwrap_or_default(),
                    intensities: intensities.unwrap_or_default(),
                }),
            });
            utterances.push(Utterance {
                text: u.text,
                tokens: Vec::new(),
                speaker: u.speaker,
                label: u.label,
                class: None,
            });
        }
        convs.push(Conversation {
            id: rec.id,
            utterances,
        });
        annotations.push(anns);
    }
    Ok((convs, annotations))
}

pub fn read_conversations(path: &Path) -> Result<Vec<Conversation>> {
    Ok(read_conversations_full(path)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(tokenize("Hello, world!"), vec!["hello", ",", "world", "!"]);
    }

    #[test]
    fn tokenize_empty_is_empty() {
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("   \t\n"), Vec::<String>::new());
    }

    #[test]
    fn tokenize_keeps_clitics_whole() {
        assert_eq!(
            tokenize("It's so hard not to cry"),
            vec!["it", "'s", "so", "hard", "not", "to", "cry"]
        );
    }

    fn corpus_of(texts: &[&str]) -> Vec<Conversation> {
        vec![Conversation {
            id: "c0".into(),
            utterances: texts.iter().map(|t| Utterance::from_text(*t)).collect(),
        }]
    }

    #[test]
    fn vocabulary_applies_min_count() {
        let corpus = corpus_of(&["a a a b"]);
        let v = Vocabulary::build(&corpus, 2).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.token(0), Some(UNK_TOKEN));
        assert_eq!(v.lookup("a"), 1);
        assert_eq!(v.lookup("b"), 0);
    }

    #[test]
    fn vocabulary_breaks_frequency_ties_lexicographically() {
        let corpus = corpus_of(&["b a", "a b"]);
        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v.lookup("a"), 1);
        assert_eq!(v.lookup("b"), 2);
    }

    #[test]
    fn vocabulary_is_deterministic() {
        let corpus = corpus_of(&["the quick brown fox", "the lazy dog", "the end"]);
        let a = Vocabulary::build(&corpus, 1).unwrap();
        let b = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocabulary_rejects_empty_corpus() {
        assert!(Vocabulary::build(&[], 1).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let corpus = corpus_of(&["x y z y"]);
        let v = Vocabulary::build(&corpus, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn vectors_copy_matched_rows_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        std::fs::write(&path, "alpha 0.25 -0.5\nbeta 1.0 2.0\nextra 9.0 9.0\n").unwrap();
        let v = Vocabulary::from_tokens(["alpha".into(), "gamma".into()]);
        let (table, report) = load_pretrained_vectors(&path, &v, 2, 3).unwrap();
        assert_eq!(table.weights.row(v.lookup("alpha")), &[0.25, -0.5]);
        assert_eq!(report.matched, 1);
        assert_eq!(report.vocab_size, 3);
        // unmatched rows land in the random range and are seed-reproducible
        let (table2, _) = load_pretrained_vectors(&path, &v, 2, 3).unwrap();
        let g = v.lookup("gamma");
        assert_eq!(table.weights.row(g), table2.weights.row(g));
        assert!(table.weights.row(g).iter().all(|x| x.abs() <= 0.1));
        let (table3, _) = load_pretrained_vectors(&path, &v, 2, 4).unwrap();
        assert_ne!(table.weights.row(g), table3.weights.row(g));
    }

    #[test]
    fn vectors_empty_file_matches_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        std::fs::write(&path, "").unwrap();
        let v = Vocabulary::from_tokens(["a".into()]);
        let (table, report) = load_pretrained_vectors(&path, &v, 4, 0).unwrap();
        assert_eq!(report.fraction, 0.0);
        assert!(table.weights.as_slice().iter().all(|x| x.abs() <= 0.1));
    }

    #[test]
    fn vectors_report_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        std::fs::write(&path, "alpha 0.1 0.2\nbeta 0.3\n").unwrap();
        let v = Vocabulary::from_tokens(["alpha".into(), "beta".into()]);
        let err = load_pretrained_vectors(&path, &v, 2, 0).unwrap_err();
        match err {
            Error::ParseLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dataset_round_trip() {
        let mut convs = vec![Conversation {
            id: "ep1#0".into(),
            utterances: vec![
                Utterance {
                    text: "It's so hard not to cry".into(),
                    tokens: Vec::new(),
                    speaker: Some("sp1".into()),
                    label: Some("sad".into()),
                    class: None,
                },
                Utterance::from_text("What happened"),
            ],
        }];
        let vocab = Vocabulary::build(&convs, 1).unwrap();
        index_conversations(&mut convs, &vocab);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_conversations(&path, &convs).unwrap();
        let mut back = read_conversations(&path).unwrap();
        index_conversations(&mut back, &vocab);
        assert_eq!(back, convs);
    }
}
