//! Subtitle corpus preprocessing: parse raw subtitle documents into
//! utterance sequences, then trim, split, filter, partition into
//! train/val/test, and pre-sample noise utterances.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Conversation, Utterance};
use crate::error::{Error, Result};
use crate::rng::named_stream;

/// Ordered subtitle cues extracted from one source document.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTranscript {
    pub source: String,
    pub utterances: Vec<String>,
}

/// Knobs of the preprocessing pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Train/val/test percentages, must sum to 100.
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Minimum and maximum conversation length drawn when splitting.
    pub min_len: usize,
    pub max_len: usize,
    /// An utterance with fewer tokens than this counts as short.
    pub word_threshold: usize,
    /// Utterances dropped from each end of an episode.
    pub trim: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [90.0, 5.0, 5.0],
            seed: 0,
            min_len: 5,
            max_len: 100,
            word_threshold: 8,
            trim: 10,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| *r <= 0.0) {
            return Err(Error::Config("split ratios must be positive".into()));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 100.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "split ratios must sum to 100, got {sum}"
            )));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid conversation length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Reference to a noise utterance in another conversation of the same split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRef {
    pub conv: String,
    pub index: usize,
}

/// Pre-sampled noise utterances, `k` per conversation, shared by all target
/// positions of that conversation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoisePool {
    entries: BTreeMap<String, Vec<NoiseRef>>,
}

impl NoisePool {
    pub fn get(&self, conv_id: &str) -> Option<&[NoiseRef]> {
        self.entries.get(conv_id).map(|v| v.as_slice())
    }

    pub fn insert(&mut self, conv_id: String, refs: Vec<NoiseRef>) {
        self.entries.insert(conv_id, refs);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<NoiseRef>)> {
        self.entries.iter()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Record<'a> {
            id: &'a str,
            noise: &'a [NoiseRef],
        }
        let mut out = String::new();
        for (id, noise) in &self.entries {
            out.push_str(&serde_json::to_string(&Record { id, noise })?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Record {
            id: String,
            noise: Vec<NoiseRef>,
        }
        let mut entries = BTreeMap::new();
        for (lineno, line) in fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| Error::ParseLine {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            entries.insert(rec.id, rec.noise);
        }
        Ok(NoisePool { entries })
    }
}

fn strip_markup(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut in_tag = false;
    for c in line.chars() {
        match c {
            '<' => in_tag = true,
            '>' if in_tag => in_tag = false,
            c if !in_tag => out.push(c),
            _ => {}
        }
    }
    out
}

/// Extract subtitle cues: one cue per line, markup stripped, empty cues
/// dropped, consecutive duplicates collapsed.
pub fn parse_subtitle_document(source: &str, raw: &[u8]) -> Result<EpisodeTranscript> {
    let text = std::str::from_utf8(raw).map_err(|e| Error::Utf8 {
        offset: e.valid_up_to(),
    })?;
    let mut utterances: Vec<String> = Vec::new();
    for line in text.lines() {
        let cue = strip_markup(line).trim().to_string();
        if cue.is_empty() {
            continue;
        }
        if utterances.last().map(|s| s.as_str()) == Some(cue.as_str()) {
            continue;
        }
        utterances.push(cue);
    }
    Ok(EpisodeTranscript {
        source: source.to_string(),
        utterances,
    })
}

/// Drop the first and last `n` utterances; a transcript of length <= 2n
/// becomes empty.
pub fn trim_episode(t: &EpisodeTranscript, n: usize) -> EpisodeTranscript {
    let utterances = if t.utterances.len() <= 2 * n {
        Vec::new()
    } else {
        t.utterances[n..t.utterances.len() - n].to_vec()
    };
    EpisodeTranscript {
        source: t.source.clone(),
        utterances,
    }
}

/// Cut a trimmed transcript into conversations whose lengths are drawn
/// i.i.d. uniform from `[min_len, max_len]`. A tail shorter than the drawn
/// length is emitted whole when it still has `min_len` utterances, else
/// discarded.
pub fn split_into_conversations(
    t: &EpisodeTranscript,
    spec: &SplitSpec,
    rng: &mut impl Rng,
) -> Vec<Conversation> {
    split_with_draws(t, spec, || rng.random_range(spec.min_len..=spec.max_len))
}

/// Same splitting rule with an injectable length source, so the boundary
/// behaviour can be tested against scripted draws.
pub fn split_with_draws(
    t: &EpisodeTranscript,
    spec: &SplitSpec,
    mut draw: impl FnMut() -> usize,
) -> Vec<Conversation> {
    let mut out = Vec::new();
    let mut pos = 0;
    let total = t.utterances.len();
    while pos < total {
        let remaining = total - pos;
        let len = draw();
        let take = if len <= remaining {
            len
        } else if remaining >= spec.min_len {
            remaining
        } else {
            break;
        };
        let utterances = t.utterances[pos..pos + take]
            .iter()
            .map(|s| Utterance::from_text(s.clone()))
            .collect();
        out.push(Conversation {
            id: format!("{}#{}", t.source, out.len()),
            utterances,
        });
        pos += take;
    }
    out
}

/// Keep a conversation unless strictly more than half of its utterances have
/// fewer than `threshold_words` tokens.
pub fn filter_short_conversations(
    convs: Vec<Conversation>,
    threshold_words: usize,
) -> Vec<Conversation> {
    convs
        .into_iter()
        .filter(|c| {
            let short = c
                .utterances
                .iter()
                .filter(|u| tokenize(&u.text).len() < threshold_words)
                .count();
            2 * short <= c.len()
        })
        .collect()
}

/// Random partition by conversation: floor(train%), floor(val%), remainder.
pub fn split_dataset(
    mut convs: Vec<Conversation>,
    spec: &SplitSpec,
    rng: &mut impl Rng,
) -> (Vec<Conversation>, Vec<Conversation>, Vec<Conversation>) {
    convs.shuffle(rng);
    let n = convs.len();
    let n_train = (spec.ratios[0] / 100.0 * n as f64).floor() as usize;
    let n_val = (spec.ratios[1] / 100.0 * n as f64).floor() as usize;
    let mut it = convs.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let val: Vec<_> = it.by_ref().take(n_val).collect();
    let test: Vec<_> = it.collect();
    (train, val, test)
}

/// For every conversation, sample `k` noise utterances uniformly over all
/// utterances of the *other* conversations in the split, without replacement.
pub fn sample_noise_pool(
    split: &[Conversation],
    k: usize,
    rng: &mut impl Rng,
) -> Result<NoisePool> {
    if split.len() < 2 {
        return Err(Error::Data(
            "noise sampling needs at least 2 conversations in the split".into(),
        ));
    }
    // flattened (conversation, utterance) index with per-conversation ranges
    let mut flat: Vec<(usize, usize)> = Vec::new();
    let mut ranges: Vec<(usize, usize)> = Vec::with_capacity(split.len());
    for (ci, conv) in split.iter().enumerate() {
        let start = flat.len();
        for ui in 0..conv.len() {
            flat.push((ci, ui));
        }
        ranges.push((start, flat.len()));
    }

    let mut entries = BTreeMap::new();
    for (ci, conv) in split.iter().enumerate() {
        let (own_start, own_end) = ranges[ci];
        let eligible = flat.len() - (own_end - own_start);
        if eligible < k {
            return Err(Error::Data(format!(
                "conversation `{}`: only {eligible} noise candidates available, need {k}",
                conv.id
            )));
        }
        let picks = rand::seq::index::sample(rng, eligible, k);
        let mut refs = Vec::with_capacity(k);
        for p in picks.iter() {
            // skip over this conversation's own range
            let idx = if p < own_start {
                p
            } else {
                p + (own_end - own_start)
            };
            let (oc, ou) = flat[idx];
            refs.push(NoiseRef {
                conv: split[oc].id.clone(),
                index: ou,
            });
        }
        entries.insert(conv.id.clone(), refs);
    }
    Ok(NoisePool { entries })
}

/// Split-level statistics: conversation count, mean utterances per
/// conversation, mean tokens per utterance.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusStats {
    pub conversations: usize,
    pub avg_utterances: f64,
    pub avg_tokens: f64,
}

pub fn corpus_statistics(split: &[Conversation]) -> CorpusStats {
    let conversations = split.len();
    let total_utts: usize = split.iter().map(|c| c.len()).sum();
    let total_tokens: usize = split
        .iter()
        .flat_map(|c| &c.utterances)
        .map(|u| tokenize(&u.text).len())
        .sum();
    CorpusStats {
        conversations,
        avg_utterances: if conversations == 0 {
            0.0
        } else {
            total_utts as f64 / conversations as f64
        },
        avg_tokens: if total_utts == 0 {
            0.0
        } else {
            total_tokens as f64 / total_utts as f64
        },
    }
}

/// Everything the preprocessing stage produces.
pub struct PrepOutcome {
    pub train: Vec<Conversation>,
    pub val: Vec<Conversation>,
    pub test: Vec<Conversation>,
    pub pools: [NoisePool; 3],
    pub stats: BTreeMap<String, CorpusStats>,
}

/// Run the whole preprocessing pipeline over a directory of subtitle files.
/// Files are visited in sorted name order so the seeded run is reproducible.
pub fn prep_corpus(input_dir: &Path, spec: &SplitSpec, noise_k: usize) -> Result<PrepOutcome> {
    spec.validate()?;
    let mut files: Vec<_> = fs::read_dir(input_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|e| e.path().is_file())
        .map(|e| e.path())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no subtitle files found in {}",
            input_dir.display()
        )));
    }

    let mut prep_rng = named_stream(spec.seed, "prep");
    let mut convs = Vec::new();
    for path in &files {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("episode")
            .to_string();
        let raw = fs::read(path)?;
        let transcript = parse_subtitle_document(&name, &raw)?;
        let trimmed = trim_episode(&transcript, spec.trim);
        convs.extend(split_into_conversations(&trimmed, spec, &mut prep_rng));
    }
    let convs = filter_short_conversations(convs, spec.word_threshold);
    if convs.is_empty() {
        return Err(Error::Data("no conversations survive preprocessing".into()));
    }
    let (train, val, test) = split_dataset(convs, spec, &mut prep_rng);

    let mut noise_rng = named_stream(spec.seed, "noise");
    let pools = [
        sample_noise_pool(&train, noise_k, &mut noise_rng)?,
        sample_noise_pool(&val, noise_k, &mut noise_rng)?,
        sample_noise_pool(&test, noise_k, &mut noise_rng)?,
    ];

    let mut stats = BTreeMap::new();
    stats.insert("train".to_string(), corpus_statistics(&train));
    stats.insert("val".to_string(), corpus_statistics(&val));
    stats.insert("test".to_string(), corpus_statistics(&test));

    Ok(PrepOutcome {
        train,
        val,
        test,
        pools,
        stats,
    })
}

/// Write the prep outputs: three conversation files, three noise-pool files,
/// and a statistics report.
pub fn write_prep_outputs(out_dir: &Path, outcome: &PrepOutcome) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    crate::corpus::write_conversations(&out_dir.join("train.jsonl"), &outcome.train)?;
    crate::corpus::write_conversations(&out_dir.join("val.jsonl"), &outcome.val)?;
    crate::corpus::write_conversations(&out_dir.join("test.jsonl"), &outcome.test)?;
    outcome.pools[0].save(&out_dir.join("noise_train.jsonl"))?;
    outcome.pools[1].save(&out_dir.join("noise_val.jsonl"))?;
    outcome.pools[2].save(&out_dir.join("noise_test.jsonl"))?;
    let stats = serde_json::to_string_pretty(&outcome.stats)?;
    fs::write(out_dir.join("stats.json"), stats)?;
    Ok(())
}
