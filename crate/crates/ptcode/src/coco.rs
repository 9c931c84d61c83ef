//! Conversation completion: mask one utterance, score candidate answers
//! against a contextual embedding of the masked slot, and evaluate recall
//! over the candidate ranking.
//!
//! The contextual embedding of position `l` only consumes the forward state
//! at `l-1` and the backward state at `l+1`, both of which are causally
//! blind to utterance `l`, so the encoder runs once on the full unmasked
//! conversation and every position serves as a target in turn.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Utterance};
use crate::encoder::{
    encode_utterance, forward_conversation, CocoHead, CodeModel, ConvStates, DropoutState,
};
use crate::error::{Error, Result};
use crate::subtitles::NoisePool;
use crate::tape::{NodeId, Tape};

/// A noise utterance together with the conversation it came from.
#[derive(Clone, Copy, Debug)]
pub struct ResolvedNoise<'a> {
    pub conv_id: &'a str,
    pub utterance: &'a Utterance,
}

/// One completion instance: a conversation with one masked position and a
/// candidate list in which canonical position 0 is the target.
pub struct CocoInstance<'a> {
    pub conv: &'a Conversation,
    /// 1-based masked position.
    pub masked: usize,
    /// Canonical candidates: target first, then the noise utterances.
    pub candidates: Vec<&'a Utterance>,
    /// Presentation order: `order[slot]` is the canonical candidate index.
    pub order: Vec<usize>,
    /// Slot of the target in the presentation order.
    pub target_slot: usize,
}

/// Build one instance per position; all instances share the noise set.
/// Noise coming from the conversation itself is rejected.
pub fn make_instances<'a>(
    conv: &'a Conversation,
    noise: &[ResolvedNoise<'a>],
    mut shuffle_rng: Option<&mut dyn rand::RngCore>,
) -> Result<Vec<CocoInstance<'a>>> {
    for n in noise {
        if n.conv_id == conv.id {
            return Err(Error::Data(format!(
                "noise utterance drawn from the target conversation `{}`",
                conv.id
            )));
        }
    }
    let mut out = Vec::with_capacity(conv.len());
    for l in 1..=conv.len() {
        let mut candidates = vec![&conv.utterances[l - 1]];
        candidates.extend(noise.iter().map(|n| n.utterance));
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        if let Some(rng) = shuffle_rng.as_deref_mut() {
            order.shuffle(rng);
        }
        let target_slot = order.iter().position(|&c| c == 0).unwrap();
        out.push(CocoInstance {
            conv,
            masked: l,
            candidates,
            order,
            target_slot,
        });
    }
    Ok(out)
}

/// Contextual embedding of masked position `l` (1-based):
/// `tanh(W_c [H_fwd_{l-1}; H_bwd_{l+1}] + b_c)`, with zero boundary states.
pub fn contextual_embedding(
    tape: &mut Tape,
    head: &CocoHead,
    states: &ConvStates,
    l: usize,
) -> Result<NodeId> {
    if l < 1 || l > states.len() {
        return Err(Error::Shape(format!(
            "masked position {l} out of range 1..={}",
            states.len()
        )));
    }
    let history = states.fwd_at(l - 1);
    let future = states.bwd_at(l + 1);
    let ctx = tape.concat(&[history, future]);
    let lin = tape.affine(head.w, ctx, Some(head.b));
    Ok(tape.tanh(lin))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Matching score between a contextual embedding and a candidate embedding:
/// sigmoid of their dot product.
pub fn match_score(u_hat: &[f64], candidate: &[f64]) -> Result<f64> {
    if u_hat.len() != candidate.len() {
        return Err(Error::Shape(format!(
            "match_score dimensions {} != {}",
            u_hat.len(),
            candidate.len()
        )));
    }
    let dot: f64 = u_hat.iter().zip(candidate).map(|(a, b)| a * b).sum();
    Ok(sigmoid(dot))
}

/// Negative-sampling loss for one masked position, natural log:
/// `-ln sigma(u_hat . target) - sum_n ln sigma(-u_hat . noise_n)`,
/// computed as softplus terms so nothing underflows.
pub fn coco_loss(u_hat: &[f64], target: &[f64], noise: &[&[f64]]) -> Result<f64> {
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let dot = |a: &[f64], b: &[f64]| -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "coco_loss dimensions {} != {}",
                a.len(),
                b.len()
            )));
        }
        Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
    };
    let mut loss = softplus(-dot(u_hat, target)?);
    for n in noise {
        loss += softplus(dot(u_hat, n)?);
    }
    Ok(loss)
}

/// Tape version of [`coco_loss`] for training.
pub fn coco_loss_node(
    tape: &mut Tape,
    u_hat: NodeId,
    target: NodeId,
    noise: &[NodeId],
) -> NodeId {
    let pos = tape.dot(u_hat, target);
    let neg_pos = tape.neg(pos);
    let mut terms = vec![tape.softplus(neg_pos)];
    for &n in noise {
        let s = tape.dot(u_hat, n);
        terms.push(tape.softplus(s));
    }
    tape.add_many(&terms)
}

/// 1 iff the target's score ranks in the top `k` (descending). Ties are
/// pessimistic: every candidate tied with the target outranks it.
pub fn recall_at_k(scores: &[f64], target_position: usize, k: usize) -> Result<u32> {
    let n = scores.len();
    if k < 1 || k > n {
        return Err(Error::Config(format!("k = {k} out of range 1..={n}")));
    }
    if target_position >= n {
        return Err(Error::Config(format!(
            "target position {target_position} out of range for {n} candidates"
        )));
    }
    let target = scores[target_position];
    let rank = 1 + scores
        .iter()
        .enumerate()
        .filter(|(i, s)| *i != target_position && **s >= target)
        .count();
    Ok(u32::from(rank <= k))
}

/// Evaluation report over a split, serialized with the exact metric keys.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CocoReport {
    #[serde(rename = "r5@1")]
    pub r5_at_1: f64,
    #[serde(rename = "r5@2")]
    pub r5_at_2: f64,
    #[serde(rename = "r11@1")]
    pub r11_at_1: f64,
    #[serde(rename = "r11@2")]
    pub r11_at_2: f64,
    pub instances: usize,
}

#[derive(Default, Clone, Copy)]
struct Counts {
    r5_1: u32,
    r5_2: u32,
    r11_1: u32,
    r11_2: u32,
    instances: usize,
}

/// Scoring backend for evaluation: the model, or an oracle that always
/// ranks the target first (pipeline plumbing check).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scorer {
    Model,
    Oracle,
}

/// Evaluate recall metrics over a split using its pre-sampled noise pool.
/// The wide candidate set uses all `k` pool entries; the narrow one uses the
/// first 4 in pool order. Conversations are scored independently (and in
/// parallel when a rayon pool is active).
pub fn evaluate_split(
    model: &CodeModel,
    split: &[Conversation],
    pool: &NoisePool,
    scorer: Scorer,
) -> Result<CocoReport> {
    use rayon::prelude::*;

    let head = model
        .coco
        .ok_or_else(|| Error::Data("model has no completion head".into()))?;
    let by_id: HashMap<&str, &Conversation> =
        split.iter().map(|c| (c.id.as_str(), c)).collect();

    let counts = split
        .par_iter()
        .map(|conv| evaluate_conversation(model, &head, conv, pool, &by_id, scorer))
        .try_reduce(Counts::default, |a, b| {
            Ok(Counts {
                r5_1: a.r5_1 + b.r5_1,
                r5_2: a.r5_2 + b.r5_2,
                r11_1: a.r11_1 + b.r11_1,
                r11_2: a.r11_2 + b.r11_2,
                instances: a.instances + b.instances,
            })
        })?;

    let denom = counts.instances.max(1) as f64;
    Ok(CocoReport {
        r5_at_1: counts.r5_1 as f64 / denom,
        r5_at_2: counts.r5_2 as f64 / denom,
        r11_at_1: counts.r11_1 as f64 / denom,
        r11_at_2: counts.r11_2 as f64 / denom,
        instances: counts.instances,
    })
}

/// Resolve a conversation's pool entries against the split.
pub fn resolve_pool<'a>(
    conv: &Conversation,
    pool: &NoisePool,
    by_id: &HashMap<&str, &'a Conversation>,
) -> Result<Vec<ResolvedNoise<'a>>> {
    let refs = pool.get(&conv.id).ok_or_else(|| {
        Error::Data(format!("noise pool has no entry for conversation `{}`", conv.id))
    })?;
    refs.iter()
        .map(|r| {
            let other = by_id.get(r.conv.as_str()).ok_or_else(|| {
                Error::Data(format!("noise pool references unknown conversation `{}`", r.conv))
            })?;
            let utterance = other.utterances.get(r.index).ok_or_else(|| {
                Error::Data(format!(
                    "noise pool references utterance {} of `{}` (length {})",
                    r.index,
                    r.conv,
                    other.len()
                ))
            })?;
            Ok(ResolvedNoise {
                conv_id: other.id.as_str(),
                utterance,
            })
        })
        .collect()
}

fn evaluate_conversation(
    model: &CodeModel,
    head: &CocoHead,
    conv: &Conversation,
    pool: &NoisePool,
    by_id: &HashMap<&str, &Conversation>,
    scorer: Scorer,
) -> Result<Counts> {
    let noise = resolve_pool(conv, pool, by_id)?;
    let mut shuffle_rng = crate::rng::keyed_stream(model.seed, "eval-shuffle", &conv.id);
    let instances = make_instances(conv, &noise, Some(&mut shuffle_rng))?;

    let mut tape = Tape::new(&model.store);
    let mut dropout = DropoutState::Off;
    let token_seqs: Vec<&[usize]> = conv
        .utterances
        .iter()
        .map(|u| u.tokens.as_slice())
        .collect();
    let fwd = forward_conversation(&mut tape, model, &token_seqs, &mut dropout)?;
    let noise_nodes: Vec<NodeId> = noise
        .iter()
        .map(|n| encode_utterance(&mut tape, model, &n.utterance.tokens))
        .collect::<Result<_>>()?;

    let mut counts = Counts::default();
    for inst in &instances {
        let u_hat = contextual_embedding(&mut tape, head, &fwd.states, inst.masked)?;
        let u_hat_v = tape.value(u_hat).to_vec();
        // canonical candidate scores: target first, then pool order
        let mut canonical = Vec::with_capacity(1 + noise_nodes.len());
        let target_node = fwd.utts[inst.masked - 1];
        canonical.push(score_candidate(&tape, scorer, &u_hat_v, target_node, true)?);
        for &n in &noise_nodes {
            canonical.push(score_candidate(&tape, scorer, &u_hat_v, n, false)?);
        }
        // wide set: all candidates, shuffled presentation
        let wide: Vec<f64> = inst.order.iter().map(|&c| canonical[c]).collect();
        counts.r11_1 += recall_at_k(&wide, inst.target_slot, 1)?;
        counts.r11_2 += recall_at_k(&wide, inst.target_slot, 2)?;
        // narrow set: target plus the first 4 pool entries, pool order
        let narrow: Vec<f64> = canonical[..5.min(canonical.len())].to_vec();
        counts.r5_1 += recall_at_k(&narrow, 0, 1)?;
        counts.r5_2 += recall_at_k(&narrow, 0, 2)?;
        counts.instances += 1;
    }
    Ok(counts)
}

fn score_candidate(
    tape: &Tape,
    scorer: Scorer,
    u_hat: &[f64],
    candidate: NodeId,
    is_target: bool,
) -> Result<f64> {
    match scorer {
        Scorer::Model => match_score(u_hat, tape.value(candidate)),
        Scorer::Oracle => Ok(if is_target { 1.0 } else { 0.0 }),
    }
}

/// Draw `k` dynamic noise utterances for `conv` uniformly over all
/// utterances of the other conversations in the split, without replacement.
pub fn sample_dynamic_noise<'a>(
    split: &'a [Conversation],
    conv_index: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ResolvedNoise<'a>>> {
    let mut flat: Vec<(usize, usize)> = Vec::new();
    for (ci, c) in split.iter().enumerate() {
        if ci != conv_index {
            for ui in 0..c.len() {
                flat.push((ci, ui));
            }
        }
    }
    if flat.len() < k {
        return Err(Error::Data(format!(
            "conversation `{}`: only {} noise candidates available, need {k}",
            split[conv_index].id,
            flat.len()
        )));
    }
    let picks = rand::seq::index::sample(rng, flat.len(), k);
    Ok(picks
        .iter()
        .map(|p| {
            let (ci, ui) = flat[p];
            ResolvedNoise {
                conv_id: split[ci].id.as_str(),
                utterance: &split[ci].utterances[ui],
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Conversation, EmbeddingTable, Utterance};
    use crate::encoder::{encode_conversation, CodeModel, ModelDims};
    use crate::params::Matrix;

    fn tiny_model(vocab: usize, d_w: usize, d_u: usize, d_c: usize, seed: u64) -> CodeModel {
        let emb = EmbeddingTable::random(vocab, d_w, seed);
        let mut m = CodeModel::new(
            ModelDims {
                vocab,
                d_w,
                d_u,
                d_c,
            },
            "tiny",
            emb,
            seed,
        );
        m.ensure_coco_head();
        m
    }

    fn conv(id: &str, token_seqs: &[&[usize]]) -> Conversation {
        Conversation {
            id: id.into(),
            utterances: token_seqs
                .iter()
                .map(|seq| Utterance {
                    text: seq
                        .iter()
                        .map(|t| format!("w{t}"))
                        .collect::<Vec<_>>()
                        .join(" "),
                    tokens: seq.to_vec(),
                    speaker: None,
                    label: None,
                    class: None,
                })
                .collect(),
        }
    }

    #[test]
    fn instances_cover_every_position_with_shared_noise() {
        let c = conv("a", &[&[1, 2], &[3], &[4, 5], &[1], &[2, 3]]);
        let other = conv("b", &[&[5], &[6, 1]]);
        let noise: Vec<ResolvedNoise> = (0..10)
            .map(|i| ResolvedNoise {
                conv_id: "b",
                utterance: &other.utterances[i % 2],
            })
            .collect();
        let instances = make_instances(&c, &noise, None).unwrap();
        assert_eq!(instances.len(), 5);
        for (i, inst) in instances.iter().enumerate() {
            assert_eq!(inst.masked, i + 1);
            assert_eq!(inst.candidates.len(), 11);
            // canonical position 0 is the target before any shuffle
            assert_eq!(inst.candidates[0], &c.utterances[i]);
            assert_eq!(inst.order, (0..11).collect::<Vec<_>>());
            assert_eq!(inst.target_slot, 0);
        }
    }

    #[test]
    fn instances_reject_noise_from_the_same_conversation() {
        let c = conv("a", &[&[1], &[2]]);
        let noise = [ResolvedNoise {
            conv_id: "a",
            utterance: &c.utterances[0],
        }];
        assert!(make_instances(&c, &noise, None).is_err());
    }

    #[test]
    fn shuffled_order_tracks_the_target() {
        let c = conv("a", &[&[1], &[2], &[3]]);
        let other = conv("b", &[&[4], &[5], &[6], &[1], &[2]]);
        let noise: Vec<ResolvedNoise> = other
            .utterances
            .iter()
            .map(|u| ResolvedNoise {
                conv_id: "b",
                utterance: u,
            })
            .collect();
        let mut rng = crate::rng::named_stream(3, "shuffle");
        let instances = make_instances(&c, &noise, Some(&mut rng)).unwrap();
        for inst in &instances {
            assert_eq!(inst.order[inst.target_slot], 0);
            let mut sorted = inst.order.clone();
            sorted.sort();
            assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_head_gives_zero_contextual_embedding() {
        let mut model = tiny_model(6, 3, 4, 4, 1);
        let head = model.coco.unwrap();
        model.store.get_mut(head.w).value.fill(0.0);
        model.store.get_mut(head.b).value.fill(0.0);
        let mut tape = Tape::new(&model.store);
        let us: Vec<_> = [[1usize, 2], [3, 4]]
            .iter()
            .map(|t| encode_utterance(&mut tape, &model, t).unwrap())
            .collect();
        let states = encode_conversation(&mut tape, &model, &us).unwrap();
        let u_hat = contextual_embedding(&mut tape, &head, &states, 1).unwrap();
        assert!(tape.value(u_hat).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_utterance_context_is_tanh_of_bias() {
        let mut model = tiny_model(6, 3, 4, 4, 2);
        let head = model.coco.unwrap();
        let bias: Vec<f64> = (0..4).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        model
            .store
            .get_mut(head.b)
            .value
            .as_mut_slice()
            .copy_from_slice(&bias);
        let mut tape = Tape::new(&model.store);
        let u = encode_utterance(&mut tape, &model, &[2, 3]).unwrap();
        let states = encode_conversation(&mut tape, &model, &[u]).unwrap();
        let u_hat = contextual_embedding(&mut tape, &head, &states, 1).unwrap();
        for (v, b) in tape.value(u_hat).iter().zip(&bias) {
            assert!((v - b.tanh()).abs() < 1e-15);
        }
        assert!(contextual_embedding(&mut tape, &head, &states, 0).is_err());
        assert!(contextual_embedding(&mut tape, &head, &states, 2).is_err());
    }

    #[test]
    fn masked_position_cannot_see_its_own_content() {
        let model = tiny_model(9, 3, 4, 4, 4);
        let head = model.coco.unwrap();
        let compute = |seqs: &[&[usize]], l: usize| {
            let mut tape = Tape::new(&model.store);
            let mut drop = DropoutState::Off;
            let fwd = forward_conversation(&mut tape, &model, seqs, &mut drop).unwrap();
            let u_hat = contextual_embedding(&mut tape, &head, &fwd.states, l).unwrap();
            tape.value(u_hat).to_vec()
        };
        let base: Vec<&[usize]> = vec![&[1, 2, 3], &[4, 5], &[6], &[7, 8]];
        for l in 1..=4usize {
            let mut changed = base.clone();
            let replacement = [8usize, 8, 8, 8];
            changed[l - 1] = &replacement;
            let a = compute(&base, l);
            let b = compute(&changed, l);
            assert_eq!(a, b, "contextual embedding at {l} must ignore u_{l}");
        }
    }

    #[test]
    fn match_score_examples() {
        assert_eq!(match_score(&[0.0, 0.0], &[3.0, -1.0]).unwrap(), 0.5);
        let s = match_score(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((s - 0.7310585786300049).abs() < 1e-15);
        let a = [0.3, -0.8, 0.5];
        let b = [1.0, 0.25, -0.75];
        let neg_a: Vec<f64> = a.iter().map(|x| -x).collect();
        let s1 = match_score(&a, &b).unwrap();
        let s2 = match_score(&neg_a, &b).unwrap();
        assert!((s1 + s2 - 1.0).abs() < 1e-15);
        assert!(match_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_at_zero_scores_is_candidates_times_ln2() {
        let u_hat = [0.0; 3];
        let target = [0.4, 0.5, -0.2];
        let noise_store: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 1.0, -1.0]).collect();
        let noise: Vec<&[f64]> = noise_store.iter().map(|n| n.as_slice()).collect();
        let loss = coco_loss(&u_hat, &target, &noise).unwrap();
        assert!((loss - 11.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_vanishes_under_perfect_separation() {
        let u_hat = [50.0, 0.0];
        let target = [1.0, 0.0];
        let noise_store = [[-1.0, 0.0], [-2.0, 0.5]];
        let noise: Vec<&[f64]> = noise_store.iter().map(|n| n.as_slice()).collect();
        let loss = coco_loss(&u_hat, &target, &noise).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-12);
    }

    #[test]
    fn loss_matches_hand_computation_and_tape_version() {
        let u_hat = [0.5, -0.25];
        let target = [0.8, 0.1];
        let n1 = [0.3, 0.9];
        let n2 = [-0.6, 0.4];
        // hand: -ln s(0.375) - ln s(-(-0.075)) - ln s(-(-0.4))
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expected = -(s(0.375).ln()) - (s(0.075).ln()) - (s(0.4).ln());
        let loss = coco_loss(&u_hat, &target, &[&n1, &n2]).unwrap();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");

        let store = crate::params::ParameterStore::new();
        let mut tape = Tape::new(&store);
        let uh = tape.leaf(u_hat.to_vec());
        let t = tape.leaf(target.to_vec());
        let a = tape.leaf(n1.to_vec());
        let b = tape.leaf(n2.to_vec());
        let node = coco_loss_node(&mut tape, uh, t, &[a, b]);
        assert!((tape.scalar(node) - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_is_monotone_in_scores() {
        // with u_hat = [1, 0] the dot products are just the first coordinates
        let u_hat = [1.0, 0.0];
        let noise = [0.3, 0.0];
        let loss_at = |target_dot: f64, noise_dot: f64| {
            coco_loss(&u_hat, &[target_dot, 0.0], &[&[noise_dot, 0.0][..]]).unwrap()
        };
        // raising the target score strictly lowers the loss
        assert!(loss_at(0.8, noise[0]) < loss_at(0.2, noise[0]));
        // lowering a noise score strictly lowers the loss
        assert!(loss_at(0.5, -0.4) < loss_at(0.5, 0.4));
    }

    #[test]
    fn recall_examples() {
        let mut scores = vec![0.9];
        scores.extend((0..10).map(|i| 0.05 * i as f64));
        assert_eq!(recall_at_k(&scores, 0, 1).unwrap(), 1);

        let second = vec![0.8, 0.9, 0.1, 0.2];
        assert_eq!(recall_at_k(&second, 0, 1).unwrap(), 0);
        assert_eq!(recall_at_k(&second, 0, 2).unwrap(), 1);

        // pessimistic tie: target loses
        let tied = vec![0.7, 0.7, 0.1];
        assert_eq!(recall_at_k(&tied, 0, 1).unwrap(), 0);
        assert_eq!(recall_at_k(&tied, 0, 2).unwrap(), 1);

        assert!(recall_at_k(&tied, 0, 0).is_err());
        assert!(recall_at_k(&tied, 0, 4).is_err());
        assert!(recall_at_k(&tied, 3, 1).is_err());
    }

    #[test]
    fn recall_is_monotone_in_k_and_saturates() {
        let scores = [0.1, 0.5, 0.3, 0.2, 0.9];
        let mut prev = 0;
        for k in 1..=scores.len() {
            let r = recall_at_k(&scores, 0, k).unwrap();
            assert!(r >= prev);
            prev = r;
        }
        assert_eq!(recall_at_k(&scores, 0, scores.len()).unwrap(), 1);
    }

    fn eval_fixture(seed: u64) -> (CodeModel, Vec<Conversation>, NoisePool) {
        let model = tiny_model(30, 3, 4, 4, seed);
        let mut rng = crate::rng::named_stream(seed, "fixture");
        let convs: Vec<Conversation> = (0..6)
            .map(|i| {
                let seqs: Vec<Vec<usize>> = (0..5)
                    .map(|_| {
                        (0..3)
                            .map(|_| rng.random_range(1..30usize))
                            .collect()
                    })
                    .collect();
                let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
                conv(&format!("c{i}"), &refs)
            })
            .collect();
        let pool =
            crate::subtitles::sample_noise_pool(&convs, 10, &mut rng).unwrap();
        (model, convs, pool)
    }

    #[test]
    fn oracle_scorer_achieves_perfect_recall() {
        let (model, convs, pool) = eval_fixture(6);
        let report = evaluate_split(&model, &convs, &pool, Scorer::Oracle).unwrap();
        assert_eq!(report.instances, 30);
        assert_eq!(report.r5_at_1, 1.0);
        assert_eq!(report.r5_at_2, 1.0);
        assert_eq!(report.r11_at_1, 1.0);
        assert_eq!(report.r11_at_2, 1.0);
    }

    #[test]
    fn narrow_recall_dominates_wide_recall() {
        let (model, convs, pool) = eval_fixture(7);
        let report = evaluate_split(&model, &convs, &pool, Scorer::Model).unwrap();
        assert!(report.r5_at_1 >= report.r11_at_1);
        assert!(report.r5_at_2 >= report.r11_at_2);
        assert!(report.r11_at_2 >= report.r11_at_1);
    }

    #[test]
    fn evaluation_errors_on_missing_pool_entry() {
        let (model, convs, _) = eval_fixture(8);
        let empty = NoisePool::default();
        assert!(evaluate_split(&model, &convs, &empty, Scorer::Model).is_err());
    }

    #[test]
    fn report_serializes_with_metric_keys() {
        let report = CocoReport {
            r5_at_1: 0.5,
            r5_at_2: 0.75,
            r11_at_1: 0.25,
            r11_at_2: 0.5,
            instances: 4,
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"r5@1\":0.5"));
        assert!(json.contains("\"r11@2\":0.5"));
        assert!(json.contains("\"instances\":4"));
    }

    #[test]
    fn dynamic_noise_excludes_own_conversation() {
        let convs: Vec<Conversation> = (0..3)
            .map(|i| conv(&format!("c{i}"), &[&[1, 2], &[3], &[4]]))
            .collect();
        let mut rng = crate::rng::named_stream(0, "noise");
        let noise = sample_dynamic_noise(&convs, 1, 5, &mut rng).unwrap();
        assert_eq!(noise.len(), 5);
        assert!(noise.iter().all(|n| n.conv_id != "c1"));
        assert!(sample_dynamic_noise(&convs, 1, 7, &mut rng).is_err());
    }
}
