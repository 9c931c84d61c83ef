//! The two-level context-dependent encoder.
//!
//! An utterance encoder (word embeddings -> BiGRU -> max+mean pooling ->
//! tanh projection) produces one vector per utterance; a conversation
//! encoder (another BiGRU over those vectors) produces forward/backward
//! contextual states per position. Both run on the recording [`Tape`], so
//! the same code path serves evaluation and training.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Manifest};
use crate::corpus::EmbeddingTable;
use crate::error::{Error, Result};
use crate::params::{Matrix, ParamId, ParameterStore};
use crate::rng::named_stream;
use crate::tape::{NodeId, Tape};

/// Named model scales: utterance and conversation hidden sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelScale {
    Small,
    Mid,
    Large,
}

impl ModelScale {
    pub fn d_u(self) -> usize {
        match self {
            ModelScale::Small => 150,
            ModelScale::Mid => 300,
            ModelScale::Large => 450,
        }
    }

    pub fn d_c(self) -> usize {
        self.d_u()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelScale::Small => "small",
            ModelScale::Mid => "mid",
            ModelScale::Large => "large",
        }
    }
}

impl FromStr for ModelScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(ModelScale::Small),
            "mid" => Ok(ModelScale::Mid),
            "large" => Ok(ModelScale::Large),
            other => Err(Error::Config(format!(
                "unknown model scale `{other}` (expected small, mid, or large)"
            ))),
        }
    }
}

impl fmt::Display for ModelScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Concrete tensor dimensions of one model instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_w: usize,
    pub d_u: usize,
    pub d_c: usize,
}

impl ModelDims {
    pub fn from_scale(scale: ModelScale, vocab: usize, d_w: usize) -> Self {
        ModelDims {
            vocab,
            d_w,
            d_u: scale.d_u(),
            d_c: scale.d_c(),
        }
    }
}

/// Parameter ids of one GRU direction.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl GruParams {
    fn create(store: &mut ParameterStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut mat = |name: &str, rows: usize, cols: usize| {
            store.add(format!("{prefix}.{name}"), Matrix::glorot(rows, cols, rng), true)
        };
        let w_z = mat("w_z", d_h, d_in);
        let w_r = mat("w_r", d_h, d_in);
        let w_h = mat("w_h", d_h, d_in);
        let u_z = mat("u_z", d_h, d_h);
        let u_r = mat("u_r", d_h, d_h);
        let u_h = mat("u_h", d_h, d_h);
        let b_z = store.add(format!("{prefix}.b_z"), Matrix::zeros(1, d_h), true);
        let b_r = store.add(format!("{prefix}.b_r"), Matrix::zeros(1, d_h), true);
        let b_h = store.add(format!("{prefix}.b_h"), Matrix::zeros(1, d_h), true);
        GruParams {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
            d_in,
            d_h,
        }
    }

    fn resolve(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let id = |name: &str| store.require(&format!("{prefix}.{name}"));
        let w_z = id("w_z")?;
        let p = GruParams {
            w_z,
            w_r: id("w_r")?,
            w_h: id("w_h")?,
            u_z: id("u_z")?,
            u_r: id("u_r")?,
            u_h: id("u_h")?,
            b_z: id("b_z")?,
            b_r: id("b_r")?,
            b_h: id("b_h")?,
            d_in: store.value(w_z).cols(),
            d_h: store.value(w_z).rows(),
        };
        Ok(p)
    }

    pub fn tensor_ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r,
            self.b_h,
        ]
    }
}

/// One GRU step: update gate z, reset gate r, candidate state, convex blend.
///
/// z = sigma(W_z x + U_z h + b_z)
/// r = sigma(W_r x + U_r h + b_r)
/// c = tanh(W_h x + U_h (r * h) + b_h)
/// h' = (1 - z) * h + z * c
pub fn gru_step(tape: &mut Tape, p: &GruParams, x: NodeId, h_prev: NodeId) -> Result<NodeId> {
    if tape.dim(x) != p.d_in {
        return Err(Error::Shape(format!(
            "gru input dimension {} != {}",
            tape.dim(x),
            p.d_in
        )));
    }
    if tape.dim(h_prev) != p.d_h {
        return Err(Error::Shape(format!(
            "gru state dimension {} != {}",
            tape.dim(h_prev),
            p.d_h
        )));
    }
    let z_pre = tape.affine2(p.w_z, x, p.u_z, h_prev, p.b_z);
    let z = tape.sigmoid(z_pre);
    let r_pre = tape.affine2(p.w_r, x, p.u_r, h_prev, p.b_r);
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h_prev);
    let c_pre = tape.affine2(p.w_h, x, p.u_h, rh, p.b_h);
    let c = tape.tanh(c_pre);
    // h' = h + z * (c - h)
    let delta = tape.sub(c, h_prev);
    let z_delta = tape.mul(z, delta);
    Ok(tape.add(h_prev, z_delta))
}

/// Run forward and backward GRU chains over a sequence, both from zero
/// states. Returns one (forward, backward) state pair per position.
pub fn bigru(
    tape: &mut Tape,
    fwd: &GruParams,
    bwd: &GruParams,
    xs: &[NodeId],
) -> Result<Vec<(NodeId, NodeId)>> {
    if xs.is_empty() {
        return Err(Error::Shape("bigru needs a non-empty sequence".into()));
    }
    let mut h = tape.zeros(fwd.d_h);
    let mut fwd_states = Vec::with_capacity(xs.len());
    for &x in xs {
        h = gru_step(tape, fwd, x, h)?;
        fwd_states.push(h);
    }
    let mut h = tape.zeros(bwd.d_h);
    let mut bwd_states = Vec::with_capacity(xs.len());
    for &x in xs.iter().rev() {
        h = gru_step(tape, bwd, x, h)?;
        bwd_states.push(h);
    }
    bwd_states.reverse();
    Ok(fwd_states.into_iter().zip(bwd_states).collect())
}

/// Forward/backward contextual states of a conversation, with the zero
/// boundary states used by consumers at positions 0 and L+1.
pub struct ConvStates {
    pub states: Vec<(NodeId, NodeId)>,
    zero: NodeId,
}

impl ConvStates {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Forward state at 1-based position `l`; `l = 0` is the zero boundary.
    pub fn fwd_at(&self, l: usize) -> NodeId {
        if l == 0 {
            self.zero
        } else {
            self.states[l - 1].0
        }
    }

    /// Backward state at 1-based position `l`; `l = L + 1` is the zero
    /// boundary.
    pub fn bwd_at(&self, l: usize) -> NodeId {
        if l == self.states.len() + 1 {
            self.zero
        } else {
            self.states[l - 1].1
        }
    }
}

/// Head projecting masked-slot context onto the utterance-embedding space.
#[derive(Clone, Copy, Debug)]
pub struct CocoHead {
    pub w: ParamId,
    pub b: ParamId,
}

/// Classification head: tanh projection over `[H_fwd; H_bwd; u]` followed by
/// a softmax layer.
#[derive(Clone, Copy, Debug)]
pub struct UlerHead {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub d_f: usize,
    pub classes: usize,
}

/// The full model: embedding table, both encoders, optional task heads, all
/// living in one parameter store.
pub struct CodeModel {
    pub store: ParameterStore,
    pub dims: ModelDims,
    pub scale_name: String,
    pub seed: u64,
    pub step: u64,
    pub embedding: ParamId,
    pub utt_fwd: GruParams,
    pub utt_bwd: GruParams,
    pub utt_proj_w: ParamId,
    pub utt_proj_b: ParamId,
    pub conv_fwd: GruParams,
    pub conv_bwd: GruParams,
    pub coco: Option<CocoHead>,
    pub uler: Option<UlerHead>,
}

impl CodeModel {
    /// Fresh model with Glorot-uniform weights and zero biases, deterministic
    /// under `seed`. The embedding table is taken as given.
    pub fn new(dims: ModelDims, scale_name: &str, embedding: EmbeddingTable, seed: u64) -> Self {
        assert_eq!(embedding.vocab_size(), dims.vocab, "embedding rows");
        assert_eq!(embedding.dim(), dims.d_w, "embedding dim");
        let mut store = ParameterStore::new();
        let mut rng = named_stream(seed, "init");
        let embedding_id = store.add("embedding", embedding.weights, embedding.trainable);
        let utt_fwd = GruParams::create(&mut store, "utt.fwd", dims.d_w, dims.d_u, &mut rng);
        let utt_bwd = GruParams::create(&mut store, "utt.bwd", dims.d_w, dims.d_u, &mut rng);
        let utt_proj_w = store.add(
            "utt.proj.w",
            Matrix::glorot(dims.d_u, 2 * dims.d_u, &mut rng),
            true,
        );
        let utt_proj_b = store.add("utt.proj.b", Matrix::zeros(1, dims.d_u), true);
        let conv_fwd = GruParams::create(&mut store, "conv.fwd", dims.d_u, dims.d_c, &mut rng);
        let conv_bwd = GruParams::create(&mut store, "conv.bwd", dims.d_u, dims.d_c, &mut rng);
        CodeModel {
            store,
            dims,
            scale_name: scale_name.to_string(),
            seed,
            step: 0,
            embedding: embedding_id,
            utt_fwd,
            utt_bwd,
            utt_proj_w,
            utt_proj_b,
            conv_fwd,
            conv_bwd,
            coco: None,
            uler: None,
        }
    }

    pub fn from_scale(scale: ModelScale, embedding: EmbeddingTable, seed: u64) -> Self {
        let dims = ModelDims::from_scale(scale, embedding.vocab_size(), embedding.dim());
        Self::new(dims, scale.name(), embedding, seed)
    }

    /// Add the completion head used during pre-training (idempotent).
    pub fn ensure_coco_head(&mut self) -> CocoHead {
        if let Some(h) = self.coco {
            return h;
        }
        let mut rng = named_stream(self.seed, "init-coco");
        let w = self.store.add(
            "coco.w",
            Matrix::glorot(self.dims.d_u, 2 * self.dims.d_c, &mut rng),
            true,
        );
        let b = self.store.add("coco.b", Matrix::zeros(1, self.dims.d_u), true);
        let head = CocoHead { w, b };
        self.coco = Some(head);
        head
    }

    /// Add the classification head used during fine-tuning (idempotent; the
    /// class count must match if the head already exists).
    pub fn ensure_uler_head(&mut self, classes: usize) -> Result<UlerHead> {
        if let Some(h) = self.uler {
            if h.classes != classes {
                return Err(Error::Config(format!(
                    "model already has a {}-class head, requested {classes}",
                    h.classes
                )));
            }
            return Ok(h);
        }
        let d_f = self.dims.d_u;
        let mut rng = named_stream(self.seed, "init-uler");
        let proj_w = self.store.add(
            "uler.proj.w",
            Matrix::glorot(d_f, 2 * self.dims.d_c + self.dims.d_u, &mut rng),
            true,
        );
        let proj_b = self.store.add("uler.proj.b", Matrix::zeros(1, d_f), true);
        let out_w = self
            .store
            .add("uler.out.w", Matrix::glorot(classes, d_f, &mut rng), true);
        let out_b = self.store.add("uler.out.b", Matrix::zeros(1, classes), true);
        let head = UlerHead {
            proj_w,
            proj_b,
            out_w,
            out_b,
            d_f,
            classes,
        };
        self.uler = Some(head);
        Ok(head)
    }

    pub fn set_embedding_trainable(&mut self, trainable: bool) {
        self.store.get_mut(self.embedding).trainable = trainable;
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            scale: self.scale_name.clone(),
            d_w: self.dims.d_w,
            d_u: self.dims.d_u,
            d_c: self.dims.d_c,
            vocab_size: self.dims.vocab,
            seed: self.seed,
            step: self.step,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.manifest(), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, store) = checkpoint::load(path)?;
        let dims = ModelDims {
            vocab: manifest.vocab_size,
            d_w: manifest.d_w,
            d_u: manifest.d_u,
            d_c: manifest.d_c,
        };
        let embedding = store.require("embedding")?;
        let utt_fwd = GruParams::resolve(&store, "utt.fwd")?;
        let utt_bwd = GruParams::resolve(&store, "utt.bwd")?;
        let utt_proj_w = store.require("utt.proj.w")?;
        let utt_proj_b = store.require("utt.proj.b")?;
        let conv_fwd = GruParams::resolve(&store, "conv.fwd")?;
        let conv_bwd = GruParams::resolve(&store, "conv.bwd")?;
        let coco = match (store.by_name("coco.w"), store.by_name("coco.b")) {
            (Some(w), Some(b)) => Some(CocoHead { w, b }),
            _ => None,
        };
        let uler = match (
            store.by_name("uler.proj.w"),
            store.by_name("uler.proj.b"),
            store.by_name("uler.out.w"),
            store.by_name("uler.out.b"),
        ) {
            (Some(proj_w), Some(proj_b), Some(out_w), Some(out_b)) => Some(UlerHead {
                proj_w,
                proj_b,
                out_w,
                out_b,
                d_f: store.value(proj_w).rows(),
                classes: store.value(out_w).rows(),
            }),
            _ => None,
        };
        Ok(CodeModel {
            store,
            dims,
            scale_name: manifest.scale,
            seed: manifest.seed,
            step: manifest.step,
            embedding,
            utt_fwd,
            utt_bwd,
            utt_proj_w,
            utt_proj_b,
            conv_fwd,
            conv_bwd,
            coco,
            uler,
        })
    }
}

/// Dropout switch threaded through the encoders: off for evaluation and
/// gradient checks, an owned rate + stream during training.
pub enum DropoutState {
    Off,
    On { rate: f64, rng: ChaCha8Rng },
}

impl DropoutState {
    pub fn apply(&mut self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            DropoutState::Off => x,
            DropoutState::On { rate, rng } => tape.dropout(x, *rate, rng),
        }
    }
}

/// Encode one utterance: embed tokens, run the BiGRU, sum max- and
/// mean-pooled concatenated states, project through tanh.
pub fn encode_utterance(
    tape: &mut Tape,
    model: &CodeModel,
    tokens: &[usize],
) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(Error::Shape("cannot encode an utterance with no tokens".into()));
    }
    for &t in tokens {
        if t >= model.dims.vocab {
            return Err(Error::Data(format!(
                "token index {t} out of vocabulary (size {})",
                model.dims.vocab
            )));
        }
    }
    let xs: Vec<NodeId> = tokens.iter().map(|&t| tape.embed(model.embedding, t)).collect();
    let states = bigru(tape, &model.utt_fwd, &model.utt_bwd, &xs)?;
    let cats: Vec<NodeId> = states
        .iter()
        .map(|&(f, b)| tape.concat(&[f, b]))
        .collect();
    let maxed = tape.max_pool(&cats);
    let meaned = tape.mean_pool(&cats);
    let pooled = tape.add(maxed, meaned);
    let projected = tape.affine(model.utt_proj_w, pooled, Some(model.utt_proj_b));
    Ok(tape.tanh(projected))
}

/// Run the conversation-level BiGRU over utterance embeddings.
pub fn encode_conversation(
    tape: &mut Tape,
    model: &CodeModel,
    us: &[NodeId],
) -> Result<ConvStates> {
    if us.is_empty() {
        return Err(Error::Shape("cannot encode an empty conversation".into()));
    }
    let states = bigru(tape, &model.conv_fwd, &model.conv_bwd, us)?;
    let zero = tape.zeros(model.dims.d_c);
    Ok(ConvStates { states, zero })
}

/// Utterance embeddings and conversation states for a whole conversation,
/// with dropout applied to utterance-encoder outputs and to the
/// conversation-encoder inputs while training.
pub struct ConversationForward {
    /// Post-dropout utterance embeddings (the candidate/classifier view).
    pub utts: Vec<NodeId>,
    pub states: ConvStates,
}

pub fn forward_conversation(
    tape: &mut Tape,
    model: &CodeModel,
    token_seqs: &[&[usize]],
    dropout: &mut DropoutState,
) -> Result<ConversationForward> {
    let mut utts = Vec::with_capacity(token_seqs.len());
    for tokens in token_seqs {
        let u = encode_utterance(tape, model, tokens)?;
        utts.push(dropout.apply(tape, u));
    }
    let conv_inputs: Vec<NodeId> = utts.iter().map(|&u| dropout.apply(tape, u)).collect();
    let states = encode_conversation(tape, model, &conv_inputs)?;
    Ok(ConversationForward { utts, states })
}
