//! The DeepCAT network: a convolution + highway query encoder, joint
//! word-category attention over cosine similarities, and category-category
//! matrix estimation from the learned category embeddings.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Vocabulary, PAD_ID, QUERY_LEN, UNK_ID};
use crate::numerics::{NodeId, NumericsError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("expected {expected} token ids, got {got}")]
    WrongQueryLength { expected: usize, got: usize },
    #[error("category embedding row {0} is all zero")]
    ZeroCategoryRow(usize),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("bad vectors file: {0}")]
    Vectors(String),
}

/// Which parts of the network a run exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// query encoder alone
    WordOnly,
    /// adds the word-category attention branch
    Joint,
    /// adds the category-category matrix loss on top
    JointPlusCm,
}

impl Ablation {
    pub fn uses_categories(self) -> bool {
        !matches!(self, Ablation::WordOnly)
    }

    pub fn uses_cm_loss(self) -> bool {
        matches!(self, Ablation::JointPlusCm)
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::WordOnly => "word_only",
            Ablation::Joint => "joint",
            Ablation::JointPlusCm => "joint_plus_cm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_categories: usize,
    /// word/category embedding width V
    pub emb_dim: usize,
    /// attention working width; must be divisible by `num_heads`
    pub d_model: usize,
    pub num_heads: usize,
    pub query_len: usize,
    pub num_conv_layers: usize,
    pub conv_kernel: usize,
}

impl ModelConfig {
    pub fn with_defaults(vocab_size: usize, num_categories: usize) -> Self {
        ModelConfig {
            vocab_size,
            num_categories,
            emb_dim: 100,
            d_model: 100,
            num_heads: 10,
            query_len: QUERY_LEN,
            num_conv_layers: 3,
            conv_kernel: 3,
        }
    }

    /// Shrunken geometry for gradient checking.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 20,
            num_categories: 5,
            emb_dim: 8,
            d_model: 10,
            num_heads: 10,
            query_len: QUERY_LEN,
            num_conv_layers: 3,
            conv_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidConfig(
                "vocabulary must at least hold PAD and UNK".into(),
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(ModelError::InvalidConfig("conv kernel width must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: Arc<Tensor>,
    pub b: Arc<Tensor>,
}

#[derive(Debug, Clone)]
pub struct HighwayLayer {
    pub w_h: Arc<Tensor>,
    pub b_h: Arc<Tensor>,
    pub w_t: Arc<Tensor>,
    pub b_t: Arc<Tensor>,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// [|C|, d_model] projection of the similarity matrix
    pub w_in: Arc<Tensor>,
    pub w_q: Arc<Tensor>,
    pub w_k: Arc<Tensor>,
    pub w_v: Arc<Tensor>,
    /// [d_model, |C|] projection back to category width
    pub w_out: Arc<Tensor>,
}

/// All learnable parameters. Tensors are shared (`Arc`) so that per-example
/// tapes can reference them without copying.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub word_emb: Arc<Tensor>,
    pub cat_emb: Arc<Tensor>,
    pub conv: Vec<ConvLayer>,
    pub highway: Vec<HighwayLayer>,
    pub attn: AttentionParams,
    pub fuse_w: Arc<Tensor>,
    pub fuse_b: Arc<Tensor>,
    pub out_w: Arc<Tensor>,
    pub out_b: Arc<Tensor>,
}

fn xavier(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Arc<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Arc::new(Tensor::rand_uniform(shape, -limit, limit, rng))
}

fn zeros(shape: Vec<usize>) -> Arc<Tensor> {
    Arc::new(Tensor::zeros(shape))
}

impl ModelParams {
    /// Seeded initialization. Word and category embeddings start from
    /// uniform(-0.05, 0.05); the PAD row of the word table is fixed to
    /// zero. Highway transform gates are biased toward carry at the start.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (v, d, c) = (cfg.emb_dim, cfg.d_model, cfg.num_categories);

        let mut word = Tensor::rand_uniform(vec![cfg.vocab_size, v], -0.05, 0.05, rng);
        word.data_mut()[..v].fill(0.0); // PAD row
        let word_emb = Arc::new(word);

        let mut cat = Tensor::rand_uniform(vec![c, v], -0.05, 0.05, rng);
        // a zero category row would make its cosine undefined; nudge any
        for r in 0..c {
            if cat.data()[r * v..(r + 1) * v].iter().all(|&x| x == 0.0) {
                cat.data_mut()[r * v] = 0.01;
            }
        }
        let cat_emb = Arc::new(cat);

        let k = cfg.conv_kernel;
        let conv = (0..cfg.num_conv_layers)
            .map(|_| ConvLayer {
                w: xavier(vec![k, v, v], k * v, v, rng),
                b: zeros(vec![1, v]),
            })
            .collect();
        let highway = (0..cfg.num_conv_layers)
            .map(|_| HighwayLayer {
                w_h: xavier(vec![v, v], v, v, rng),
                b_h: zeros(vec![1, v]),
                w_t: xavier(vec![v, v], v, v, rng),
                b_t: Arc::new(Tensor::new(vec![1, v], vec![-1.0; v]).expect("finite")),
            })
            .collect();
        let attn = AttentionParams {
            w_in: xavier(vec![c, d], c, d, rng),
            w_q: xavier(vec![d, d], d, d, rng),
            w_k: xavier(vec![d, d], d, d, rng),
            w_v: xavier(vec![d, d], d, d, rng),
            w_out: xavier(vec![d, c], d, c, rng),
        };
        Ok(ModelParams {
            cfg: cfg.clone(),
            word_emb,
            cat_emb,
            conv,
            highway,
            attn,
            fuse_w: xavier(vec![2 * v, v], 2 * v, v, rng),
            fuse_b: zeros(vec![1, v]),
            out_w: xavier(vec![v, c], v, c, rng),
            out_b: zeros(vec![1, c]),
        })
    }

    /// Parameters in a fixed order with stable names. The order defines the
    /// layout of optimizer state and gradient accumulators.
    pub fn named(&self) -> Vec<(String, Arc<Tensor>)> {
        let mut out = vec![
            ("word_emb".to_string(), self.word_emb.clone()),
            ("cat_emb".to_string(), self.cat_emb.clone()),
        ];
        for (i, l) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}.w"), l.w.clone()));
            out.push((format!("conv{i}.b"), l.b.clone()));
        }
        for (i, l) in self.highway.iter().enumerate() {
            out.push((format!("highway{i}.w_h"), l.w_h.clone()));
            out.push((format!("highway{i}.b_h"), l.b_h.clone()));
            out.push((format!("highway{i}.w_t"), l.w_t.clone()));
            out.push((format!("highway{i}.b_t"), l.b_t.clone()));
        }
        out.push(("attn.w_in".to_string(), self.attn.w_in.clone()));
        out.push(("attn.w_q".to_string(), self.attn.w_q.clone()));
        out.push(("attn.w_k".to_string(), self.attn.w_k.clone()));
        out.push(("attn.w_v".to_string(), self.attn.w_v.clone()));
        out.push(("attn.w_out".to_string(), self.attn.w_out.clone()));
        out.push(("fuse_w".to_string(), self.fuse_w.clone()));
        out.push(("fuse_b".to_string(), self.fuse_b.clone()));
        out.push(("out_w".to_string(), self.out_w.clone()));
        out.push(("out_b".to_string(), self.out_b.clone()));
        out
    }

    /// Mutable access in the same order as [`Self::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Arc<Tensor>)> {
        let mut out: Vec<(String, &mut Arc<Tensor>)> = vec![
            ("word_emb".to_string(), &mut self.word_emb),
            ("cat_emb".to_string(), &mut self.cat_emb),
        ];
        for (i, l) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{i}.w"), &mut l.w));
            out.push((format!("conv{i}.b"), &mut l.b));
        }
        for (i, l) in self.highway.iter_mut().enumerate() {
            out.push((format!("highway{i}.w_h"), &mut l.w_h));
            out.push((format!("highway{i}.b_h"), &mut l.b_h));
            out.push((format!("highway{i}.w_t"), &mut l.w_t));
            out.push((format!("highway{i}.b_t"), &mut l.b_t));
        }
        out.push(("attn.w_in".to_string(), &mut self.attn.w_in));
        out.push(("attn.w_q".to_string(), &mut self.attn.w_q));
        out.push(("attn.w_k".to_string(), &mut self.attn.w_k));
        out.push(("attn.w_v".to_string(), &mut self.attn.w_v));
        out.push(("attn.w_out".to_string(), &mut self.attn.w_out));
        out.push(("fuse_w".to_string(), &mut self.fuse_w));
        out.push(("fuse_b".to_string(), &mut self.fuse_b));
        out.push(("out_w".to_string(), &mut self.out_w));
        out.push(("out_b".to_string(), &mut self.out_b));
        out
    }

    /// Check that the category table has no all-zero row.
    pub fn check_cat_rows(&self) -> Result<(), ModelError> {
        let v = self.cfg.emb_dim;
        for r in 0..self.cfg.num_categories {
            if self.cat_emb.data()[r * v..(r + 1) * v].iter().all(|&x| x == 0.0) {
                return Err(ModelError::ZeroCategoryRow(r));
            }
        }
        Ok(())
    }
}

/// Overwrite word-embedding rows from a plain-text vectors file with one
/// `token v1 … vV` line per word (whitespace-separated, width = `emb_dim`).
/// Tokens absent from the vocabulary are skipped and the PAD/UNK rows are
/// never touched, so the PAD row stays zero. Returns the number of rows
/// loaded. Pretraining such vectors is out of scope; this only consumes
/// them.
pub fn load_word_vectors(
    path: &std::path::Path,
    vocab: &Vocabulary,
    params: &mut ModelParams,
) -> Result<usize, ModelError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ModelError::Vectors(format!("{}: {e}", path.display())))?;
    let v = params.cfg.emb_dim;
    let emb = Arc::make_mut(&mut params.word_emb);
    let mut loaded = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-empty line has a first field");
        let values = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    ModelError::Vectors(format!("line {}: bad float {f:?}", lineno + 1))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if values.len() != v {
            return Err(ModelError::Vectors(format!(
                "line {}: expected {v} components, got {}",
                lineno + 1,
                values.len()
            )));
        }
        let id = vocab.id_of(token);
        if id == PAD_ID || id == UNK_ID {
            continue;
        }
        emb.data_mut()[id * v..(id + 1) * v].copy_from_slice(&values);
        loaded += 1;
    }
    Ok(loaded)
}

/// Tape node ids of every registered parameter, in [`ModelParams::named`]
/// order.
pub struct ParamNodes {
    pub ids: Vec<NodeId>,
    pub names: Vec<String>,
}

impl ParamNodes {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        let named = params.named();
        let mut ids = Vec::with_capacity(named.len());
        let mut names = Vec::with_capacity(named.len());
        for (name, t) in named {
            ids.push(tape.param(t));
            names.push(name);
        }
        ParamNodes { ids, names }
    }

    fn by_name(&self, name: &str) -> NodeId {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[idx]
    }
}

/// Node ids of the intermediate representations of one query's forward
/// pass. Attention-side nodes are absent in word-only mode.
pub struct ForwardTrace {
    pub q_w: NodeId,
    pub similarity: Option<NodeId>,
    pub a_wc: Option<NodeId>,
    pub word_weights: Option<NodeId>,
    pub r_qw: NodeId,
    pub r_wc: Option<NodeId>,
    pub r: NodeId,
    pub logits: NodeId,
}

/// Embed token ids as the query matrix q_w: [n, V]. PAD rows are zero.
pub fn embed_query(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
    token_ids: &[usize],
) -> Result<NodeId, ModelError> {
    if token_ids.len() != cfg.query_len {
        return Err(ModelError::WrongQueryLength {
            expected: cfg.query_len,
            got: token_ids.len(),
        });
    }
    Ok(tape.gather(nodes.by_name("word_emb"), token_ids)?)
}

fn highway(
    tape: &mut Tape,
    layer_idx: usize,
    nodes: &ParamNodes,
    x: NodeId,
) -> Result<NodeId, NumericsError> {
    let w_h = nodes.by_name(&format!("highway{layer_idx}.w_h"));
    let b_h = nodes.by_name(&format!("highway{layer_idx}.b_h"));
    let w_t = nodes.by_name(&format!("highway{layer_idx}.w_t"));
    let b_t = nodes.by_name(&format!("highway{layer_idx}.b_t"));

    let hx = tape.matmul(x, w_h)?;
    let hx = tape.add_row(hx, b_h)?;
    let h = tape.relu(hx)?;

    let tx = tape.matmul(x, w_t)?;
    let tx = tape.add_row(tx, b_t)?;
    let t = tape.sigmoid(tx)?;

    let shape = tape.value(x).shape().to_vec();
    let ones = tape.constant(Tensor::new(shape.clone(), vec![1.0; shape.iter().product()])?);
    let carry = tape.sub(ones, t)?;

    let th = tape.mul(t, h)?;
    let cx = tape.mul(carry, x)?;
    tape.add(th, cx)
}

/// Query encoder: stacked (conv -> ReLU -> highway -> dropout) blocks
/// followed by a max over the sequence axis. Output: [1, V].
pub fn query2vector(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
    q_w: NodeId,
    training: bool,
    dropout_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, ModelError> {
    let mut x = q_w;
    for i in 0..cfg.num_conv_layers {
        let w = nodes.by_name(&format!("conv{i}.w"));
        let b = nodes.by_name(&format!("conv{i}.b"));
        x = tape.conv1d_same(x, w, b)?;
        x = tape.relu(x)?;
        x = highway(tape, i, nodes, x)?;
        x = tape.dropout(x, dropout_rate, training, rng)?;
    }
    Ok(tape.max_axis(x, 0)?)
}

/// Cosine word-category similarity: rowL2(q_w) · rowL2(cat_emb)ᵀ, [n, |C|].
pub fn word_category_similarity(
    tape: &mut Tape,
    nodes: &ParamNodes,
    q_w: NodeId,
) -> Result<NodeId, NumericsError> {
    let qn = tape.row_l2_norm(q_w)?;
    let cn = tape.row_l2_norm(nodes.by_name("cat_emb"))?;
    tape.matmul_trans_b(qn, cn)
}

/// Multi-head scaled dot-product self-attention over the query positions
/// of the similarity matrix. PAD positions are masked out of every softmax.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
    similarity: NodeId,
    valid: &[bool],
) -> Result<NodeId, NumericsError> {
    let x = tape.matmul(similarity, nodes.by_name("attn.w_in"))?;
    let q = tape.matmul(x, nodes.by_name("attn.w_q"))?;
    let k = tape.matmul(x, nodes.by_name("attn.w_k"))?;
    let v = tape.matmul(x, nodes.by_name("attn.w_v"))?;

    let d_k = cfg.d_model / cfg.num_heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.slice_cols(q, h * d_k, d_k)?;
        let kh = tape.slice_cols(k, h * d_k, d_k)?;
        let vh = tape.slice_cols(v, h * d_k, d_k)?;
        let scores = tape.matmul_trans_b(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.row_softmax_masked(scores, valid)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    tape.matmul(merged, nodes.by_name("attn.w_out"))
}

/// Per-word scores from the attention matrix: max over the category axis,
/// then a softmax over the non-PAD positions. Output: [1, n].
pub fn attention_pool(
    tape: &mut Tape,
    cfg: &ModelConfig,
    a_wc: NodeId,
    valid: &[bool],
) -> Result<NodeId, NumericsError> {
    let m = tape.max_axis(a_wc, 1)?;
    let row = tape.reshape(m, vec![1, cfg.query_len])?;
    tape.row_softmax_masked(row, valid)
}

/// Convex combination of word embeddings under the attention weights.
pub fn weighted_word_rep(
    tape: &mut Tape,
    word_weights: NodeId,
    q_w: NodeId,
) -> Result<NodeId, NumericsError> {
    tape.matmul(word_weights, q_w)
}

/// Concatenate the encoder and word-category representations and project
/// back to width V.
pub fn fuse(
    tape: &mut Tape,
    nodes: &ParamNodes,
    r_qw: NodeId,
    r_wc: NodeId,
) -> Result<NodeId, NumericsError> {
    let cat = tape.concat_cols(&[r_qw, r_wc])?;
    let out = tape.matmul(cat, nodes.by_name("fuse_w"))?;
    tape.add_row(out, nodes.by_name("fuse_b"))
}

/// Linear output head over the fused representation: [1, |C|] logits.
pub fn predict_logits(
    tape: &mut Tape,
    nodes: &ParamNodes,
    r: NodeId,
) -> Result<NodeId, NumericsError> {
    let s = tape.matmul(r, nodes.by_name("out_w"))?;
    tape.add_row(s, nodes.by_name("out_b"))
}

/// Estimated category-category matrix: pairwise cosine of category
/// embeddings with the diagonal pinned to exactly 1.
pub fn estimate_category_cm(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
    cat_emb_value: &Tensor,
) -> Result<NodeId, ModelError> {
    let v = cfg.emb_dim;
    for r in 0..cfg.num_categories {
        if cat_emb_value.data()[r * v..(r + 1) * v].iter().all(|&x| x == 0.0) {
            return Err(ModelError::ZeroCategoryRow(r));
        }
    }
    let ln = tape.row_l2_norm(nodes.by_name("cat_emb"))?;
    let cm = tape.matmul_trans_b(ln, ln)?;

    // pin the diagonal: rounding can leave self-cosines a ULP shy of 1
    let c = cfg.num_categories;
    let mut off_diag = vec![1.0; c * c];
    let mut eye = vec![0.0; c * c];
    for i in 0..c {
        off_diag[i * c + i] = 0.0;
        eye[i * c + i] = 1.0;
    }
    let mask = tape.constant(Tensor::new(vec![c, c], off_diag)?);
    let eye = tape.constant(Tensor::new(vec![c, c], eye)?);
    let masked = tape.mul(cm, mask)?;
    Ok(tape.add(masked, eye)?)
}

/// Full forward pass for one encoded query.
#[allow(clippy::too_many_arguments)]
pub fn forward_query(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
    token_ids: &[usize],
    ablation: Ablation,
    training: bool,
    dropout_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardTrace, ModelError> {
    let valid: Vec<bool> = token_ids.iter().map(|&t| t != PAD_ID).collect();
    let q_w = embed_query(tape, nodes, cfg, token_ids)?;
    let r_qw = query2vector(tape, nodes, cfg, q_w, training, dropout_rate, rng)?;

    let (similarity, a_wc, word_weights, r_wc, r) = if ablation.uses_categories() {
        let g = word_category_similarity(tape, nodes, q_w)?;
        let a = multi_head_self_attention(tape, nodes, cfg, g, &valid)?;
        let w = attention_pool(tape, cfg, a, &valid)?;
        let r_wc = weighted_word_rep(tape, w, q_w)?;
        let r = fuse(tape, nodes, r_qw, r_wc)?;
        (Some(g), Some(a), Some(w), Some(r_wc), r)
    } else {
        (None, None, None, None, r_qw)
    };

    let r_dropped = tape.dropout(r, dropout_rate, training, rng)?;
    let logits = predict_logits(tape, nodes, r_dropped)?;
    Ok(ForwardTrace {
        q_w,
        similarity,
        a_wc,
        word_weights,
        r_qw,
        r_wc,
        r,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::rng_from_seed;

    fn setup(cfg: &ModelConfig, seed: u64) -> ModelParams {
        let mut rng = rng_from_seed(seed);
        ModelParams::init(cfg, &mut rng).unwrap()
    }

    fn infer_logits(params: &ModelParams, tokens: &[usize], ablation: Ablation) -> Vec<f64> {
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, params);
        let mut rng = rng_from_seed(0);
        let trace = forward_query(
            &mut tape,
            &nodes,
            &params.cfg,
            tokens,
            ablation,
            false,
            0.5,
            &mut rng,
        )
        .unwrap();
        tape.value(trace.logits).data().to_vec()
    }

    #[test]
    fn shapes_under_defaults() {
        let cfg = ModelConfig::with_defaults(50, 12);
        let params = setup(&cfg, 1);
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &params);
        let tokens = [2, 3, 4, 5, 0, 0, 0, 0, 0, 0];
        let mut rng = rng_from_seed(0);
        let trace = forward_query(
            &mut tape, &nodes, &cfg, &tokens, Ablation::Joint, false, 0.5, &mut rng,
        )
        .unwrap();
        assert_eq!(tape.value(trace.q_w).shape(), &[10, 100]);
        assert_eq!(tape.value(trace.similarity.unwrap()).shape(), &[10, 12]);
        assert_eq!(tape.value(trace.a_wc.unwrap()).shape(), &[10, 12]);
        assert_eq!(tape.value(trace.word_weights.unwrap()).shape(), &[1, 10]);
        assert_eq!(tape.value(trace.r_qw).shape(), &[1, 100]);
        assert_eq!(tape.value(trace.r).shape(), &[1, 100]);
        assert_eq!(tape.value(trace.logits).shape(), &[1, 12]);
    }

    #[test]
    fn pad_rows_of_query_matrix_are_zero() {
        let cfg = ModelConfig::tiny();
        let params = setup(&cfg, 2);
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &params);
        let tokens = [3, 4, 0, 0, 0, 0, 0, 0, 0, 0];
        let q_w = embed_query(&mut tape, &nodes, &cfg, &tokens).unwrap();
        let v = cfg.emb_dim;
        let data = tape.value(q_w).data();
        assert!(data[2 * v..].iter().all(|&x| x == 0.0));
        assert!(data[..2 * v].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn embedding_rejects_bad_ids_and_lengths() {
        let cfg = ModelConfig::tiny();
        let params = setup(&cfg, 2);
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &params);
        assert!(embed_query(&mut tape, &nodes, &cfg, &[1, 2, 3]).is_err());
        let bad = [99, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        assert!(embed_query(&mut tape, &nodes, &cfg, &bad).is_err());
    }

    #[test]
    fn inference_forward_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let params = setup(&cfg, 3);
        let tokens = [2, 5, 7, 0, 0, 0, 0, 0, 0, 0];
        let a = infer_logits(&params, &tokens, Ablation::Joint);
        let b = infer_logits(&params, &tokens, Ablation::Joint);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn token_order_matters_to_the_encoder() {
        let cfg = ModelConfig::tiny();
        let params = setup(&cfg, 4);
        let a = infer_logits(&params, &[2, 5, 7, 0, 0, 0, 0, 0, 0, 0], Ablation::WordOnly);
        let b = infer_logits(&params, &[5, 2, 7, 0, 0, 0, 0, 0, 0, 0], Ablation::WordOnly);
        assert_ne!(a, b);
    }

    #[test]
    fn word_weights_sum_to_one_and_ignore_pad() {
        let cfg = ModelConfig::tiny();
        let params = setup(&cfg, 5);
        let weights = |tokens: &[usize]| {
            let mut tape = Tape::new();
            let nodes = ParamNodes::register(&mut tape, &params);
            let mut rng = rng_from_seed(0);
            let trace = forward_query(
                &mut tape, &nodes, &cfg, tokens, Ablation::Joint, false, 0.5, &mut rng,
            )
            .unwrap();
            tape.value(trace.word_weights.unwrap()).data().to_vec()
        };
        let w = weights(&[2, 5, 7, 0, 0, 0, 0, 0, 0, 0]);
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(w[3..].iter().all(|&x| x == 0.0));

        // PAD invariance: weights on real tokens do not depend on how much
        // padding follows (the query length is fixed, so compare against a
        // second query identical except for trailing PAD handling).
        let w2 = weights(&[2, 5, 7, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(w, w2);
    }

    #[test]
    fn similarity_entries_are_cosines() {
        let cfg = ModelConfig::tiny();
        let params = setup(&cfg, 6);
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &params);
        let tokens = [2, 3, 0, 0, 0, 0, 0, 0, 0, 0];
        let q_w = embed_query(&mut tape, &nodes, &cfg, &tokens).unwrap();
        let g = word_category_similarity(&mut tape, &nodes, q_w).unwrap();
        for &v in tape.value(g).data() {
            assert!((-1.0..=1.0).contains(&v), "cosine out of range: {v}");
        }
        // PAD rows yield zero rows
        let c = cfg.num_categories;
        assert!(tape.value(g).data()[2 * c..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_rows_are_valid_distributions_at_any_scale() {
        let cfg = ModelConfig::tiny();
        let params = setup(&cfg, 7);
        for scale in [0.1, 1.0, 10.0] {
            let mut tape = Tape::new();
            let nodes = ParamNodes::register(&mut tape, &params);
            let tokens = [2, 3, 4, 0, 0, 0, 0, 0, 0, 0];
            let valid: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
            let q_w = embed_query(&mut tape, &nodes, &cfg, &tokens).unwrap();
            let g = word_category_similarity(&mut tape, &nodes, q_w).unwrap();
            let g = tape.scale(g, scale).unwrap();
            let a = multi_head_self_attention(&mut tape, &nodes, &cfg, g, &valid).unwrap();
            assert!(tape.value(a).data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn cm_hat_symmetric_with_unit_diagonal() {
        let cfg = ModelConfig::tiny();
        let params = setup(&cfg, 8);
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &params);
        let cm = estimate_category_cm(&mut tape, &nodes, &cfg, &params.cat_emb).unwrap();
        let t = tape.value(cm);
        let c = cfg.num_categories;
        for i in 0..c {
            assert_eq!(t.at2(i, i), 1.0);
            for j in 0..c {
                assert_eq!(t.at2(i, j).to_bits(), t.at2(j, i).to_bits());
                assert!((-1.0..=1.0).contains(&t.at2(i, j)));
            }
        }
    }

    #[test]
    fn cm_hat_rejects_zero_row() {
        let cfg = ModelConfig::tiny();
        let mut params = setup(&cfg, 9);
        let v = cfg.emb_dim;
        Arc::make_mut(&mut params.cat_emb).data_mut()[v..2 * v].fill(0.0);
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &params);
        let err = estimate_category_cm(&mut tape, &nodes, &cfg, &params.cat_emb);
        assert!(matches!(err, Err(ModelError::ZeroCategoryRow(1))));
    }

    #[test]
    fn category_permutation_equivariance() {
        let cfg = ModelConfig::tiny();
        let params = setup(&cfg, 10);
        let c = cfg.num_categories;
        let perm: Vec<usize> = vec![3, 0, 4, 1, 2];

        let permuted = {
            let mut p = params.clone();
            let v = cfg.emb_dim;
            let d = cfg.d_model;
            // cat_emb rows and attn.w_in rows are category-indexed
            let mut cat = Tensor::zeros(vec![c, v]);
            let mut w_in = Tensor::zeros(vec![c, d]);
            for i in 0..c {
                let src = perm[i];
                cat.data_mut()[i * v..(i + 1) * v]
                    .copy_from_slice(&params.cat_emb.data()[src * v..(src + 1) * v]);
                w_in.data_mut()[i * d..(i + 1) * d]
                    .copy_from_slice(&params.attn.w_in.data()[src * d..(src + 1) * d]);
            }
            // attn.w_out columns, out_w columns and out_b entries likewise
            let mut w_out = Tensor::zeros(vec![d, c]);
            for r in 0..d {
                for i in 0..c {
                    w_out.data_mut()[r * c + i] = params.attn.w_out.data()[r * c + perm[i]];
                }
            }
            let mut out_w = Tensor::zeros(vec![v, c]);
            for r in 0..v {
                for i in 0..c {
                    out_w.data_mut()[r * c + i] = params.out_w.data()[r * c + perm[i]];
                }
            }
            let mut out_b = Tensor::zeros(vec![1, c]);
            for i in 0..c {
                out_b.data_mut()[i] = params.out_b.data()[perm[i]];
            }
            p.cat_emb = Arc::new(cat);
            p.attn.w_in = Arc::new(w_in);
            p.attn.w_out = Arc::new(w_out);
            p.out_w = Arc::new(out_w);
            p.out_b = Arc::new(out_b);
            p
        };

        let tokens = [2, 5, 7, 9, 0, 0, 0, 0, 0, 0];
        let base = infer_logits(&params, &tokens, Ablation::Joint);
        let perm_logits = infer_logits(&permuted, &tokens, Ablation::Joint);
        // permuting the category axis reorders the floating-point sums in
        // the similarity projection, so logits agree to rounding only
        for i in 0..c {
            assert!((perm_logits[i] - base[perm[i]]).abs() < 1e-9);
        }
        // in word-only mode no sum runs over the category axis and the
        // equivariance is bit-exact
        let base_w = infer_logits(&params, &tokens, Ablation::WordOnly);
        let perm_w = infer_logits(&permuted, &tokens, Ablation::WordOnly);
        for i in 0..c {
            assert_eq!(perm_w[i].to_bits(), base_w[perm[i]].to_bits());
        }

        let cm_of = |p: &ModelParams| {
            let mut tape = Tape::new();
            let nodes = ParamNodes::register(&mut tape, p);
            let cm = estimate_category_cm(&mut tape, &nodes, &cfg, &p.cat_emb).unwrap();
            tape.value(cm).data().to_vec()
        };
        let base_cm = cm_of(&params);
        let perm_cm = cm_of(&permuted);
        for i in 0..c {
            for j in 0..c {
                assert_eq!(
                    perm_cm[i * c + j].to_bits(),
                    base_cm[perm[i] * c + perm[j]].to_bits()
                );
            }
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        use crate::numerics::finite_diff_check;
        let cfg = ModelConfig::tiny();
        let params = setup(&cfg, 11);
        let tokens = [2, 5, 7, 0, 0, 0, 0, 0, 0, 0];
        let targets = vec![1.0, 0.0, 1.0, 0.0, 0.0];

        // check the word-embedding table as the differentiated input; all
        // other parameters enter as constants through the shared Arcs
        let params2 = params.clone();
        let f = move |tape: &mut Tape, x: crate::numerics::NodeId| {
            let mut p = params2.clone();
            p.word_emb = Arc::new(tape.value(x).clone());
            // rebuild with x as the word_emb leaf
            let mut ids = Vec::new();
            let mut names = Vec::new();
            for (name, t) in p.named() {
                if name == "word_emb" {
                    ids.push(x);
                } else {
                    ids.push(tape.constant((*t).clone()));
                }
                names.push(name);
            }
            let nodes = ParamNodes {
                ids,
                names,
            };
            let mut rng = rng_from_seed(0);
            let trace = forward_query(
                &mut *tape, &nodes, &cfg, &tokens, Ablation::Joint, false, 0.0, &mut rng,
            )
            .map_err(|_| crate::numerics::NumericsError::EmptyGraph)?;
            tape.sigmoid_cross_entropy(trace.logits, &targets, false)
        };
        let point = (*params.word_emb).clone();
        let err = finite_diff_check(&f, &point, 1e-5).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn pretrained_vectors_load_into_matching_rows() {
        use crate::corpus::{build_vocab, QueryRecord};
        use std::collections::BTreeSet;
        use std::io::Write;

        let recs: Vec<QueryRecord> = ["red drill", "red drill", "blue saw", "blue saw"]
            .iter()
            .map(|t| QueryRecord::new(t.to_string(), BTreeSet::from([0usize]), 1).unwrap())
            .collect();
        let vocab = build_vocab(&recs, 2).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.vocab_size = vocab.len();
        let mut params = setup(&cfg, 3);
        let v = cfg.emb_dim;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        let mut f = std::fs::File::create(&path).unwrap();
        let row = |x: f64| {
            (0..v).map(|i| format!("{}", x + i as f64)).collect::<Vec<_>>().join(" ")
        };
        writeln!(f, "drill {}", row(1.0)).unwrap();
        writeln!(f, "unseen-token {}", row(9.0)).unwrap();
        drop(f);

        let before_pad = params.word_emb.data()[..v].to_vec();
        let loaded = load_word_vectors(&path, &vocab, &mut params).unwrap();
        assert_eq!(loaded, 1);
        let id = vocab.id_of("drill");
        let got = &params.word_emb.data()[id * v..(id + 1) * v];
        assert_eq!(got, &(0..v).map(|i| 1.0 + i as f64).collect::<Vec<_>>()[..]);
        // PAD row untouched (still zero), unknown token skipped
        assert_eq!(&params.word_emb.data()[..v], &before_pad[..]);
    }

    #[test]
    fn pretrained_vectors_reject_bad_lines() {
        use crate::corpus::{build_vocab, QueryRecord};
        use std::collections::BTreeSet;

        let recs: Vec<QueryRecord> = ["red drill", "red drill"]
            .iter()
            .map(|t| QueryRecord::new(t.to_string(), BTreeSet::from([0usize]), 1).unwrap())
            .collect();
        let vocab = build_vocab(&recs, 1).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.vocab_size = vocab.len();
        let mut params = setup(&cfg, 3);

        let dir = tempfile::tempdir().unwrap();
        let short = dir.path().join("short.txt");
        std::fs::write(&short, "drill 1.0 2.0\n").unwrap();
        assert!(matches!(
            load_word_vectors(&short, &vocab, &mut params),
            Err(ModelError::Vectors(_))
        ));

        let junk = dir.path().join("junk.txt");
        let line = format!("drill {}\n", vec!["x"; cfg.emb_dim].join(" "));
        std::fs::write(&junk, line).unwrap();
        assert!(matches!(
            load_word_vectors(&junk, &vocab, &mut params),
            Err(ModelError::Vectors(_))
        ));
    }
}
