//! The scoring network.
//!
//! * entity vectors are computed from types alone:
//!   `e = relu(W_e * mean(type vectors) + b_e)`
//! * the sentence is encoded by a BiLSTM over `[word ; position]` embeddings;
//!   the mention is summarised by the forward/backward states just before
//!   and at the end of its span
//! * `g(e, m, c)` is a one-hidden-layer network over `[e, f_{h-1}, b_{h-1}, f_k, b_k]`
//! * the noise detector pools E+ with attention weights `softmax(g / T)` and
//!   feeds `[pooled, context]` to a second one-hidden-layer network whose
//!   logit, divided by `T`, goes through a sigmoid.
//!
//! Entity surface names never enter the network.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::candidates::{DataPoint, NeType, Sentence};
use crate::kb::{EntityId, KnowledgeBase};
use crate::vocab::Vocab;

pub const OOV_WORD_ROW: usize = 0;
pub const UNK_TYPE_ROW: usize = 0;
pub const NO_TYPE_ROW: usize = 1;

/// Hyper-parameters. Defaults are the published settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub position_dim: usize,
    pub type_dim: usize,
    pub entity_dim: usize,
    pub lstm_hidden: usize,
    pub ffn_g_hidden: usize,
    pub ffn_f_hidden: usize,
    /// Hinge margin.
    pub margin: f64,
    /// Shared by the attention softmax and the noise sigmoid.
    pub temperature: f64,
    /// KL coefficient.
    pub eta: f64,
    /// Prior probability that a training point is noisy.
    pub prior_noise: f64,
    /// Abstention threshold on the noise probability.
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Early stopping patience, in epochs without dev improvement.
    pub patience: usize,
    /// Relative positions are clamped to `[-max_position, max_position]`.
    pub max_position: usize,
    /// Weights start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    /// Starting bias of the entity projection and of the feed-forward hidden
    /// layers. Other biases start at zero.
    pub relu_bias_init: f64,
    /// Type, position and boundary embedding tables start uniform in
    /// `[-embedding_init_range, embedding_init_range]`.
    pub embedding_init_range: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 300,
            position_dim: 5,
            type_dim: 50,
            entity_dim: 100,
            lstm_hidden: 100,
            ffn_g_hidden: 300,
            ffn_f_hidden: 300,
            margin: 0.1,
            temperature: 1.0 / 3.0,
            eta: 5.0,
            prior_noise: 0.9,
            tau: 0.75,
            learning_rate: 0.001,
            batch_size: 50,
            epochs: 20,
            patience: 3,
            max_position: 40,
            init_range: 0.08,
            embedding_init_range: 1.0,
            relu_bias_init: 0.0,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for gradient checking and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            word_dim: 8,
            position_dim: 2,
            type_dim: 4,
            entity_dim: 6,
            lstm_hidden: 8,
            ffn_g_hidden: 8,
            ffn_f_hidden: 8,
            ..Default::default()
        }
    }

    /// Settings for the desk-scale synthetic benchmark: small dimensions, a
    /// faster optimizer and a noise prior matching the injected noise rate.
    pub fn benchmark() -> Self {
        ModelConfig {
            word_dim: 16,
            position_dim: 4,
            type_dim: 16,
            entity_dim: 32,
            lstm_hidden: 16,
            ffn_g_hidden: 64,
            ffn_f_hidden: 64,
            eta: 50.0,
            prior_noise: 0.4,
            learning_rate: 0.003,
            epochs: 16,
            patience: 16,
            init_range: 0.3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("word_dim", self.word_dim),
            ("position_dim", self.position_dim),
            ("type_dim", self.type_dim),
            ("entity_dim", self.entity_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("ffn_g_hidden", self.ffn_g_hidden),
            ("ffn_f_hidden", self.ffn_f_hidden),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(ModelError::Config("temperature must be positive".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(ModelError::Config("margin must be non-negative".into()));
        }
        if !(self.eta >= 0.0) {
            return Err(ModelError::Config("eta must be non-negative".into()));
        }
        if !(self.prior_noise > 0.0 && self.prior_noise < 1.0) {
            return Err(ModelError::Config("prior_noise must lie in (0, 1)".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(ModelError::Config("tau must lie in (0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn context_dim(&self) -> usize {
        4 * self.lstm_hidden
    }

    fn input_dim(&self) -> usize {
        self.word_dim + self.position_dim
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug)]
struct LstmIds {
    w_input: ParamId,
    w_hidden: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ParamIds {
    words: ParamId,
    positions: ParamId,
    types: ParamId,
    entity_proj: ParamId,
    entity_bias: ParamId,
    /// Learned inputs for the padding positions before the first and after the last token.
    boundary: ParamId,
    forward: LstmIds,
    backward: LstmIds,
    ffn_g: FfnIds,
    ffn_f: FfnIds,
}

/// Graph handles for the encoded mention context.
#[derive(Clone, Copy, Debug)]
pub struct ContextVars {
    pub f_pre: Var,
    pub b_pre: Var,
    pub f_post: Var,
    pub b_post: Var,
    /// `[f_pre, b_pre, f_post, b_post]` as one `1 x 4H` row.
    pub joined: Var,
}

/// Plain values of the four boundary states.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedContext {
    pub f_pre: Vec<f64>,
    pub b_pre: Vec<f64>,
    pub f_post: Vec<f64>,
    pub b_post: Vec<f64>,
}

/// Type-vector rows for every KB entity, indexed by prominence.
#[derive(Clone, Debug)]
pub struct EntityTypes(Vec<Vec<usize>>);

impl EntityTypes {
    pub fn groups(&self, entities: &[usize]) -> Vec<Vec<usize>> {
        entities.iter().map(|&e| self.0[e].clone()).collect()
    }

    pub fn of(&self, entity: usize) -> &[usize] {
        &self.0[entity]
    }
}

/// A data point resolved against the model vocabulary and the KB.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub point_id: String,
    pub tokens: Vec<usize>,
    pub span: (usize, usize),
    /// E+ as prominence indices, in prominence order.
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub gold: Option<EntityId>,
    pub ne_type: Option<NeType>,
    pub noise_label: Option<bool>,
}

impl Instance {
    pub fn gold_in_positive(&self, kb: &KnowledgeBase) -> Option<bool> {
        self.gold.as_ref().map(|g| self.positive.iter().any(|&e| kb.id_of(e) == g))
    }
}

/// Graph handles produced by scoring one instance.
#[derive(Clone, Copy, Debug)]
pub struct PointVars {
    pub context: ContextVars,
    /// Entity vectors of E+ followed by E-, `n x d_e`.
    pub entities: Var,
    /// Scores of E+ followed by E-, `n x 1`.
    pub scores: Var,
    pub n_positive: usize,
}

#[derive(Clone, Debug)]
pub struct ElModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: ParamIds,
    words: Vocab,
    types: Vocab,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    words: Vocab,
    types: Vocab,
}

impl ElModel {
    /// Creates a model with freshly initialised parameters.
    ///
    /// Word rows come from `vectors` when present (OOV rows stay zero); without
    /// pretrained vectors, every word gets a fixed random vector. Word
    /// embeddings are frozen either way.
    pub fn new(
        config: ModelConfig,
        words: Vocab,
        vectors: Option<&HashMap<String, Vec<f64>>>,
        types: Vocab,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let r = c.init_range;
        let h = c.lstm_hidden;
        let mut params = ParamStore::new();

        let mut word_table = Tensor::zeros(words.len(), c.word_dim);
        match vectors {
            Some(vectors) => {
                for (i, w) in words.tokens().iter().enumerate() {
                    let found = vectors.get(w).or_else(|| vectors.get(&w.to_lowercase()));
                    if let Some(v) = found {
                        if v.len() != c.word_dim {
                            return Err(ModelError::Config(format!(
                                "word vector for {w} has {} values, word_dim is {}",
                                v.len(),
                                c.word_dim
                            )));
                        }
                        word_table.row_mut(words.row_of(i)).copy_from_slice(v);
                    }
                }
            }
            None => {
                let random = Tensor::uniform(words.len(), c.word_dim, 1.0, &mut rng);
                for i in 0..words.tokens().len() {
                    let row = words.row_of(i);
                    word_table.row_mut(row).copy_from_slice(random.row(row));
                }
            }
        }
        let words_id = params.add("word_embeddings", word_table, false);
        let mut table = |name: &str, rows: usize, cols: usize, params: &mut ParamStore| {
            params.add(name, Tensor::uniform(rows, cols, c.embedding_init_range, &mut rng), true)
        };
        let positions = table("position_embeddings", 2 * c.max_position + 1, c.position_dim, &mut params);
        let types_id = table("type_embeddings", types.len(), c.type_dim, &mut params);
        let boundary = table("boundary_inputs", 2, c.input_dim(), &mut params);
        let mut uniform = |name: &str, rows: usize, cols: usize, params: &mut ParamStore| {
            params.add(name, Tensor::uniform(rows, cols, r, &mut rng), true)
        };
        let zeros = |name: &str, cols: usize, params: &mut ParamStore| params.add(name, Tensor::zeros(1, cols), true);
        let entity_proj = uniform("entity.w", c.type_dim, c.entity_dim, &mut params);
        let relu_bias = |name: &str, cols: usize, params: &mut ParamStore| {
            params.add(name, Tensor::from_vec(1, cols, vec![c.relu_bias_init; cols]), true)
        };
        let entity_bias = relu_bias("entity.b", c.entity_dim, &mut params);
        let mut lstm = |dir: &str, params: &mut ParamStore| LstmIds {
            w_input: uniform(&format!("lstm.{dir}.w_input"), c.input_dim(), 4 * h, params),
            w_hidden: uniform(&format!("lstm.{dir}.w_hidden"), h, 4 * h, params),
            bias: zeros(&format!("lstm.{dir}.bias"), 4 * h, params),
        };
        let forward = lstm("forward", &mut params);
        let backward = lstm("backward", &mut params);
        let in_dim = c.entity_dim + c.context_dim();
        let mut ffn = |name: &str, hidden: usize, params: &mut ParamStore| FfnIds {
            w1: uniform(&format!("{name}.w1"), in_dim, hidden, params),
            b1: relu_bias(&format!("{name}.b1"), hidden, params),
            w2: uniform(&format!("{name}.w2"), hidden, 1, params),
            b2: zeros(&format!("{name}.b2"), 1, params),
        };
        let ffn_g = ffn("ffn_g", c.ffn_g_hidden, &mut params);
        let ffn_f = ffn("ffn_f", c.ffn_f_hidden, &mut params);

        let ids = ParamIds {
            words: words_id,
            positions,
            types: types_id,
            entity_proj,
            entity_bias,
            boundary,
            forward,
            backward,
            ffn_g,
            ffn_f,
        };
        Ok(ElModel { config, params, ids, words, types })
    }

    /// Vocabulary with the reserved OOV row.
    pub fn word_vocab(tokens: impl IntoIterator<Item = String>) -> Vocab {
        Vocab::new(&["<oov>"], tokens)
    }

    /// Type vocabulary with the reserved UNK-type and NO-TYPE rows.
    pub fn type_vocab(types: impl IntoIterator<Item = String>) -> Vocab {
        Vocab::new(&["<unk-type>", "<no-type>"], types)
    }

    pub fn words(&self) -> &Vocab {
        &self.words
    }

    pub fn types(&self) -> &Vocab {
        &self.types
    }

    pub fn word_row(&self, token: &str) -> usize {
        self.words.get(token).or_else(|| self.words.get(&token.to_lowercase())).unwrap_or(OOV_WORD_ROW)
    }

    /// Type-table rows for a type set: unknown types map to the UNK row, an
    /// empty set to the NO-TYPE row.
    pub fn type_rows<S: AsRef<str>>(&self, types: &[S]) -> Vec<usize> {
        if types.is_empty() {
            return vec![NO_TYPE_ROW];
        }
        types.iter().map(|t| self.types.get(t.as_ref()).unwrap_or(UNK_TYPE_ROW)).collect()
    }

    pub fn entity_types(&self, kb: &KnowledgeBase) -> EntityTypes {
        EntityTypes(kb.entities().iter().map(|e| self.type_rows(&e.types)).collect())
    }

    pub fn ffn_g_output_bias(&self) -> ParamId {
        self.ids.ffn_g.b2
    }

    /// Parameters of the noise detector (FFN_f).
    pub fn noise_detector_params(&self) -> [ParamId; 4] {
        let f = self.ids.ffn_f;
        [f.w1, f.b1, f.w2, f.b2]
    }

    pub fn entity_params(&self) -> (ParamId, ParamId, ParamId) {
        (self.ids.types, self.ids.entity_proj, self.ids.entity_bias)
    }

    /// Row in the position table for token `i` (1-based) relative to the span:
    /// signed distance to the nearest span boundary, zero inside, clamped.
    pub fn position_row(&self, i: usize, span: (usize, usize)) -> usize {
        let (h, k) = span;
        let offset: i64 = if i < h {
            i as i64 - h as i64
        } else if i > k {
            i as i64 - k as i64
        } else {
            0
        };
        let m = self.config.max_position as i64;
        (offset.clamp(-m, m) + m) as usize
    }

    /// Resolves data points against their sentences and the KB.
    pub fn prepare(&self, kb: &KnowledgeBase, corpus: &[Sentence], points: &[DataPoint]) -> Result<Vec<Instance>> {
        let by_id: HashMap<&str, &Sentence> = corpus.iter().map(|s| (s.id.as_str(), s)).collect();
        let resolve = |ids: &[EntityId], point: &str| -> Result<Vec<usize>> {
            ids.iter()
                .map(|e| {
                    kb.index_of(e.as_str())
                        .ok_or_else(|| ModelError::Data(format!("{point}: entity {e} is not in the knowledge base")))
                })
                .collect()
        };
        points
            .iter()
            .map(|p| {
                let pid = p.point_id();
                let sentence = by_id
                    .get(p.mention.sentence_id.as_str())
                    .ok_or_else(|| ModelError::Data(format!("{pid}: sentence not found in corpus")))?;
                let (h, k) = p.mention.span;
                if !(1 <= h && h <= k && k <= sentence.tokens.len()) {
                    return Err(ModelError::Data(format!("{pid}: span ({h}, {k}) outside the sentence")));
                }
                Ok(Instance {
                    tokens: sentence.tokens.iter().map(|t| self.word_row(t)).collect(),
                    span: p.mention.span,
                    positive: resolve(&p.positive, &pid)?,
                    negative: resolve(&p.negative, &pid)?,
                    gold: p.mention.gold.clone(),
                    ne_type: p.mention.ne_type,
                    noise_label: p.noise_label,
                    point_id: pid,
                })
            })
            .collect()
    }

    /// Entity vectors for a batch of type sets, `n x d_e`.
    pub fn embed_entities(&self, g: &mut Graph, groups: Vec<Vec<usize>>) -> Result<Var> {
        let mean_types = g.gather_mean(&self.params, self.ids.types, groups)?;
        let w = g.param(&self.params, self.ids.entity_proj)?;
        let b = g.param(&self.params, self.ids.entity_bias)?;
        let affine = g.matmul(mean_types, w)?;
        let affine = g.add_row(affine, b)?;
        Ok(g.relu(affine)?)
    }

    /// One LSTM step; `state` is `(h, c)` or `None` for a zero initial state.
    fn lstm_step(&self, g: &mut Graph, ids: LstmIds, projected: Var, state: Option<(Var, Var)>) -> Result<(Var, Var)> {
        let hd = self.config.lstm_hidden;
        let gates = match state {
            Some((h, _)) => {
                let wh = g.param(&self.params, ids.w_hidden)?;
                let rec = g.matmul(h, wh)?;
                g.add(projected, rec)?
            }
            None => projected,
        };
        let i_pre = g.slice_cols(gates, 0, hd)?;
        let f_pre = g.slice_cols(gates, hd, 2 * hd)?;
        let c_pre = g.slice_cols(gates, 2 * hd, 3 * hd)?;
        let o_pre = g.slice_cols(gates, 3 * hd, 4 * hd)?;
        let i = g.sigmoid(i_pre)?;
        let cand = g.tanh(c_pre)?;
        let o = g.sigmoid(o_pre)?;
        let mut c = g.mul(i, cand)?;
        if let Some((_, c_prev)) = state {
            let f = g.sigmoid(f_pre)?;
            let keep = g.mul(f, c_prev)?;
            c = g.add(keep, c)?;
        }
        let c_act = g.tanh(c)?;
        let h = g.mul(o, c_act)?;
        Ok((h, c))
    }

    /// Runs the BiLSTM over the sentence padded with learned boundary inputs
    /// at positions `0` and `l + 1`, and returns the forward and backward
    /// states at `h - 1` and `k`.
    pub fn encode_context(&self, g: &mut Graph, tokens: &[usize], span: (usize, usize)) -> Result<ContextVars> {
        let l = tokens.len();
        let (h, k) = span;
        if !(1 <= h && h <= k && k <= l) {
            return Err(ModelError::Data(format!("span ({h}, {k}) outside a sentence of {l} tokens")));
        }
        let word_rows = g.gather_rows(&self.params, self.ids.words, tokens)?;
        let pos: Vec<usize> = (1..=l).map(|i| self.position_row(i, span)).collect();
        let pos_rows = g.gather_rows(&self.params, self.ids.positions, &pos)?;
        let body = g.concat_cols(&[word_rows, pos_rows])?;
        let boundary = g.param(&self.params, self.ids.boundary)?;
        let start = g.slice_rows(boundary, 0, 1)?;
        let end = g.slice_rows(boundary, 1, 2)?;
        let inputs = g.concat_rows(&[start, body, end])?;

        // forward direction: padded positions 0..=k
        let fw = self.ids.forward;
        let x = g.slice_rows(inputs, 0, k + 1)?;
        let w = g.param(&self.params, fw.w_input)?;
        let b = g.param(&self.params, fw.bias)?;
        let proj = g.matmul(x, w)?;
        let proj = g.add_row(proj, b)?;
        let mut state = None;
        let mut f_pre = None;
        for t in 0..=k {
            let row = g.slice_rows(proj, t, t + 1)?;
            let next = self.lstm_step(g, fw, row, state)?;
            if t == h - 1 {
                f_pre = Some(next.0);
            }
            state = Some(next);
        }
        let f_post = state.expect("at least one step").0;

        // backward direction: padded positions l+1 down to h-1
        let bw = self.ids.backward;
        let x = g.slice_rows(inputs, h - 1, l + 2)?;
        let w = g.param(&self.params, bw.w_input)?;
        let b = g.param(&self.params, bw.bias)?;
        let proj = g.matmul(x, w)?;
        let proj = g.add_row(proj, b)?;
        let mut state = None;
        let mut b_post = None;
        for t in (h - 1..=l + 1).rev() {
            let row = g.slice_rows(proj, t - (h - 1), t - (h - 1) + 1)?;
            let next = self.lstm_step(g, bw, row, state)?;
            if t == k {
                b_post = Some(next.0);
            }
            state = Some(next);
        }
        let b_pre = state.expect("at least one step").0;

        let f_pre = f_pre.expect("h - 1 <= k");
        let b_post = b_post.expect("k >= h - 1");
        let joined = g.concat_cols(&[f_pre, b_pre, f_post, b_post])?;
        Ok(ContextVars { f_pre, b_pre, f_post, b_post, joined })
    }

    /// One-hidden-layer network over `[rows_i, context]` for every row of `rows`;
    /// returns `n x 1` outputs.
    fn ffn(&self, g: &mut Graph, ids: FfnIds, rows: Var, context: Var) -> Result<Var> {
        let d_e = self.config.entity_dim;
        let w1 = g.param(&self.params, ids.w1)?;
        let w1_rows = g.slice_rows(w1, 0, d_e)?;
        let w1_ctx = g.slice_rows(w1, d_e, d_e + self.config.context_dim())?;
        let b1 = g.param(&self.params, ids.b1)?;
        let from_rows = g.matmul(rows, w1_rows)?;
        let from_ctx = g.matmul(context, w1_ctx)?;
        let shared = g.add(from_ctx, b1)?;
        let pre = g.add_row(from_rows, shared)?;
        let hidden = g.relu(pre)?;
        let w2 = g.param(&self.params, ids.w2)?;
        let b2 = g.param(&self.params, ids.b2)?;
        let out = g.matmul(hidden, w2)?;
        Ok(g.add_row(out, b2)?)
    }

    /// `g(e, m, c)` for every row of `entities` (`n x d_e`), as `n x 1`.
    pub fn score(&self, g: &mut Graph, entities: Var, context: Var) -> Result<Var> {
        self.ffn(g, self.ids.ffn_g, entities, context)
    }

    /// Attention pooling of E+ with weights `softmax(scores / T)`; returns the
    /// pooled `1 x d_e` vector and the `n x 1` weights.
    pub fn attend_positive(&self, g: &mut Graph, scores: Var, entities: Var) -> Result<(Var, Var)> {
        if g.value(scores).is_empty() {
            return Err(ModelError::Data("attention over an empty E+".into()));
        }
        let alpha = g.temperature_softmax(scores, self.config.temperature)?;
        let alpha_row = g.transpose(alpha)?;
        let pooled = g.matmul(alpha_row, entities)?;
        Ok((pooled, alpha))
    }

    /// Raw FFN_f output for the pooled E+ vector and context.
    pub fn noise_logit(&self, g: &mut Graph, pooled: Var, context: Var) -> Result<Var> {
        self.ffn(g, self.ids.ffn_f, pooled, context)
    }

    /// `p_N(1 | m, c, E+) = sigmoid(FFN_f([pooled, context]) / T)`.
    pub fn noise_prob(&self, g: &mut Graph, pooled: Var, context: Var) -> Result<Var> {
        let logit = self.noise_logit(g, pooled, context)?;
        let scaled = g.scale(logit, 1.0 / self.config.temperature)?;
        Ok(g.sigmoid(scaled)?)
    }

    /// Encodes the instance and scores E+ (and E- when `with_negatives`).
    pub fn forward_point(
        &self,
        g: &mut Graph,
        types: &EntityTypes,
        inst: &Instance,
        with_negatives: bool,
    ) -> Result<PointVars> {
        let context = self.encode_context(g, &inst.tokens, inst.span)?;
        let mut candidates = inst.positive.clone();
        if with_negatives {
            candidates.extend_from_slice(&inst.negative);
        }
        if candidates.is_empty() {
            return Err(ModelError::Data(format!("{}: no candidates to score", inst.point_id)));
        }
        let entities = self.embed_entities(g, types.groups(&candidates))?;
        let scores = self.score(g, entities, context.joined)?;
        Ok(PointVars { context, entities, scores, n_positive: inst.positive.len() })
    }

    /// Noise probability for an instance whose E+ has already been scored.
    pub fn noise_prob_for(&self, g: &mut Graph, vars: &PointVars) -> Result<Var> {
        let n = vars.n_positive;
        let total = g.value(vars.scores).rows();
        let (pos_scores, pos_entities) = if n == total {
            (vars.scores, vars.entities)
        } else {
            (g.slice_rows(vars.scores, 0, n)?, g.slice_rows(vars.entities, 0, n)?)
        };
        let (pooled, _) = self.attend_positive(g, pos_scores, pos_entities)?;
        self.noise_prob(g, pooled, vars.context.joined)
    }

    /// Plain values of the encoder output.
    pub fn encode_context_values(&self, tokens: &[usize], span: (usize, usize)) -> Result<EncodedContext> {
        let mut g = Graph::new();
        let c = self.encode_context(&mut g, tokens, span)?;
        let v = |x| g.value(x).data().to_vec();
        Ok(EncodedContext { f_pre: v(c.f_pre), b_pre: v(c.b_pre), f_post: v(c.f_post), b_post: v(c.b_post) })
    }

    /// Scores of E+ and, when the instance has a non-empty E+, its noise probability.
    pub fn evaluate_point(&self, types: &EntityTypes, inst: &Instance) -> Result<(Vec<f64>, Option<f64>)> {
        if inst.positive.is_empty() {
            return Ok((Vec::new(), None));
        }
        let mut g = Graph::new();
        let vars = self.forward_point(&mut g, types, inst, false)?;
        let p = self.noise_prob_for(&mut g, &vars)?;
        Ok((g.value(vars.scores).data().to_vec(), Some(g.scalar_value(p))))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let header = ModelHeader { config: self.config.clone(), words: self.words.clone(), types: self.types.clone() };
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("model.json"))?), &header)?;
        let mut w = BufWriter::new(File::create(dir.join("params.bin"))?);
        checkpoint::save_params(&mut w, &self.params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header: ModelHeader = serde_json::from_reader(BufReader::new(File::open(dir.join("model.json"))?))?;
        let ModelHeader { config, mut words, mut types } = header;
        words.reindex();
        types.reindex();
        let mut model = ElModel::new(config, words, Some(&HashMap::new()), types, 0)?;
        checkpoint::load_params(BufReader::new(File::open(dir.join("params.bin"))?), &mut model.params)?;
        Ok(model)
    }
}

/// Every token of the given corpora, in first-seen order.
pub fn corpus_tokens<'a>(corpora: impl IntoIterator<Item = &'a [Sentence]>) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for corpus in corpora {
        for s in corpus {
            for t in &s.tokens {
                if seen.insert(t.as_str()) {
                    out.push(t.clone());
                }
            }
        }
    }
    out
}

/// Every type used in the KB, sorted.
pub fn kb_types(kb: &KnowledgeBase) -> Vec<String> {
    let mut types: Vec<String> = kb.entities().iter().flat_map(|e| e.types.iter().cloned()).collect();
    types.sort();
    types.dedup();
    types
}
