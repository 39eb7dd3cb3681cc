//! Transformer encoders and the step-wise decoder, with either standard or
//! hierarchical source attention.

use crate::attention::{
    head_dim, mhatt_projected, multi_head_projected, project_hierarchical_memory, HattOutput, HattScale,
    MhattMemory, MhattProjections, MultiHeadProjections, ProjectedMemory,
};
use crate::data::{Bio, BOS, EOS};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::tensor::{Axis, Graph, ParamId, Tensor, Var};

/// Sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(length: usize, d_model: usize) -> Result<Tensor> {
    if length == 0 || d_model == 0 {
        return Err(Error::arg("positional encoding needs length and d_model ≥ 1"));
    }
    let mut data = Vec::with_capacity(length * d_model);
    for p in 0..length {
        data.extend(pe_row(p, d_model));
    }
    Tensor::matrix(length, d_model, data)
}

fn pe_row(p: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|j| {
            let angle = p as f64 / 10000f64.powf((j - j % 2) as f64 / d_model as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn register(init: &mut Init, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: init.constant(&format!("{prefix}.gain"), &[1, d], 1.0)?,
            bias: init.constant(&format!("{prefix}.bias"), &[1, d], 0.0)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn register(init: &mut Init, prefix: &str, d_model: usize, inner: usize) -> Result<Self> {
        Ok(Self {
            w1: init.xavier(&format!("{prefix}.w1"), d_model, inner)?,
            b1: init.constant(&format!("{prefix}.b1"), &[1, inner], 0.0)?,
            w2: init.xavier(&format!("{prefix}.w2"), inner, d_model)?,
            b2: init.constant(&format!("{prefix}.b2"), &[1, d_model], 0.0)?,
        })
    }
}

/// `max(0, x W_1 + b_1) W_2 + b_2`, row-wise.
pub fn ffn(g: &mut Graph, x: Var, p: &FfnParams) -> Result<Var> {
    let (w1, b1, w2, b2) = (g.param(p.w1), g.param(p.b1), g.param(p.w2), g.param(p.b2));
    let h = g.linear(x, w1, b1)?;
    let h = g.relu(h)?;
    g.linear(h, w2, b2)
}

/// Multi-head attention projections as parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn register(init: &mut Init, prefix: &str, d_model: usize) -> Result<Self> {
        Ok(Self {
            wq: init.xavier(&format!("{prefix}.wq"), d_model, d_model)?,
            wk: init.xavier(&format!("{prefix}.wk"), d_model, d_model)?,
            wv: init.xavier(&format!("{prefix}.wv"), d_model, d_model)?,
            wo: init.xavier(&format!("{prefix}.wo"), d_model, d_model)?,
        })
    }

    pub fn vars(&self, g: &mut Graph) -> MultiHeadProjections {
        MultiHeadProjections {
            wq: g.param(self.wq),
            wk: g.param(self.wk),
            wv: g.param(self.wv),
            wo: g.param(self.wo),
        }
    }
}

fn check_dims(d_model: usize, heads: usize, inner: usize) -> Result<()> {
    head_dim(d_model, heads)?;
    if inner < d_model {
        return Err(Error::Config(format!("FFN inner dim {inner} is below d_model {d_model}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderBlockParams {
    pub attn: AttentionParams,
    pub ln1: LayerNormParams,
    pub ffn: FfnParams,
    pub ln2: LayerNormParams,
    pub heads: usize,
    pub d_model: usize,
}

impl EncoderBlockParams {
    pub fn register(init: &mut Init, prefix: &str, d_model: usize, heads: usize, inner: usize) -> Result<Self> {
        check_dims(d_model, heads, inner)?;
        Ok(Self {
            attn: AttentionParams::register(init, &format!("{prefix}.attn"), d_model)?,
            ln1: LayerNormParams::register(init, &format!("{prefix}.ln1"), d_model)?,
            ffn: FfnParams::register(init, &format!("{prefix}.ffn"), d_model, inner)?,
            ln2: LayerNormParams::register(init, &format!("{prefix}.ln2"), d_model)?,
            heads,
            d_model,
        })
    }
}

/// Post-norm block: `LN(x + SelfAttn(x))`, then `LN(y + FFN(y))`.
pub fn encoder_block(g: &mut Graph, x: Var, p: &EncoderBlockParams) -> Result<Var> {
    if g.shape(x)[1] != p.d_model {
        return Err(Error::dim("encoder_block", g.shape(x), &[g.shape(x)[0], p.d_model]));
    }
    let proj = p.attn.vars(g);
    let memory = ProjectedMemory {
        keys: g.matmul(x, proj.wk)?,
        values: g.matmul(x, proj.wv)?,
    };
    let (att, _) = multi_head_projected(g, x, &memory, p.heads, &proj)?;
    let y = g.add(x, att)?;
    let y = p.ln1.apply(g, y)?;
    let f = ffn(g, y, &p.ffn)?;
    let z = g.add(y, f)?;
    p.ln2.apply(g, z)
}

pub fn encoder_stack(g: &mut Graph, mut x: Var, blocks: &[EncoderBlockParams]) -> Result<Var> {
    for b in blocks {
        x = encoder_block(g, x, b)?;
    }
    Ok(x)
}

fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let pe = g.constant(positional_encoding(n, d)?);
    g.add(x, pe)
}

/// How the BIO feature joins the word embedding before the first block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFeatureMode {
    /// `[e ; f^w] W_in + b_in`.
    #[default]
    Concat,
    /// `e W_in + b_in + f^w` with a `3 × d_model` tag table.
    Add,
}

/// Maps token embeddings and BIO tags to `d_model` input rows.
#[derive(Clone, Copy, Debug)]
pub struct TokenInputParams {
    pub bio: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub mode: AnswerFeatureMode,
}

impl TokenInputParams {
    pub fn register(
        init: &mut Init,
        prefix: &str,
        emb_dim: usize,
        bio_dim: usize,
        d_model: usize,
        mode: AnswerFeatureMode,
    ) -> Result<Self> {
        let (bio_rows, in_rows) = match mode {
            AnswerFeatureMode::Concat => (bio_dim, emb_dim + bio_dim),
            AnswerFeatureMode::Add => (d_model, emb_dim),
        };
        Ok(Self {
            bio: init.uniform(&format!("{prefix}.bio"), &[3, bio_rows], 0.1)?,
            w_in: init.xavier(&format!("{prefix}.w_in"), in_rows, d_model)?,
            b_in: init.constant(&format!("{prefix}.b_in"), &[1, d_model], 0.0)?,
            mode,
        })
    }
}

pub fn token_inputs(g: &mut Graph, embeddings: ParamId, tokens: &[usize], tags: &[Bio], p: &TokenInputParams) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::arg("empty token sequence"));
    }
    if tokens.len() != tags.len() {
        return Err(Error::arg(format!("{} tokens but {} BIO tags", tokens.len(), tags.len())));
    }
    let table = g.param(embeddings);
    let e = g.gather(table, tokens)?;
    let bio = g.param(p.bio);
    let tag_ids: Vec<usize> = tags.iter().map(|t| t.index()).collect();
    let f = g.gather(bio, &tag_ids)?;
    let (w, b) = (g.param(p.w_in), g.param(p.b_in));
    match p.mode {
        AnswerFeatureMode::Concat => {
            let x = g.concat(&[e, f], Axis::Cols)?;
            g.linear(x, w, b)
        }
        AnswerFeatureMode::Add => {
            let x = g.linear(e, w, b)?;
            g.add(x, f)
        }
    }
}

/// Word representations `r` of one token sequence: inputs plus positions
/// through the encoder stack.
pub fn encode_sentence_transformer(
    g: &mut Graph,
    embeddings: ParamId,
    tokens: &[usize],
    tags: &[Bio],
    input: &TokenInputParams,
    blocks: &[EncoderBlockParams],
) -> Result<Var> {
    let x = token_inputs(g, embeddings, tokens, tags, input)?;
    let x = add_positions(g, x)?;
    encoder_stack(g, x, blocks)
}

/// `[r_BOS ; r_EOS]` of one sentence.
pub fn sentence_repr_boseos(g: &mut Graph, r: Var, tokens: &[usize]) -> Result<Var> {
    if g.shape(r)[0] != tokens.len() {
        return Err(Error::dim("sentence_repr_boseos", g.shape(r), &[tokens.len()]));
    }
    if tokens.len() < 2 || tokens[0] != BOS || tokens[tokens.len() - 1] != EOS {
        return Err(Error::arg("sentence must start with BOS and end with EOS"));
    }
    let first = g.row(r, 0)?;
    let last = g.row(r, tokens.len() - 1)?;
    g.concat(&[first, last], Axis::Cols)
}

/// Paragraph-level encoder: `[s̃ ; f^s] W_p + b_p`, positions over the sentence
/// index, then its own block stack.
#[derive(Clone, Debug)]
pub struct ParagraphEncoderParams {
    pub flag: ParamId,
    pub w_p: ParamId,
    pub b_p: ParamId,
    pub blocks: Vec<EncoderBlockParams>,
}

impl ParagraphEncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        init: &mut Init,
        prefix: &str,
        d_model: usize,
        flag_dim: usize,
        heads: usize,
        inner: usize,
        layers: usize,
    ) -> Result<Self> {
        let flag = init.uniform(&format!("{prefix}.flag"), &[2, flag_dim], 0.1)?;
        let w_p = init.xavier(&format!("{prefix}.w_p"), 2 * d_model + flag_dim, d_model)?;
        let b_p = init.constant(&format!("{prefix}.b_p"), &[1, d_model], 0.0)?;
        let blocks = (0..layers)
            .map(|l| EncoderBlockParams::register(init, &format!("{prefix}.block{l}"), d_model, heads, inner))
            .collect::<Result<_>>()?;
        Ok(Self { flag, w_p, b_p, blocks })
    }
}

/// `K × 2d_model` sentence vectors to `K × d_model` paragraph representations.
pub fn encode_paragraph_transformer(g: &mut Graph, s_tilde: Var, has_answer: &[bool], p: &ParagraphEncoderParams) -> Result<Var> {
    let k = g.shape(s_tilde)[0];
    if has_answer.is_empty() {
        return Err(Error::arg("paragraph encoder over zero sentences"));
    }
    if has_answer.len() != k {
        return Err(Error::dim("encode_paragraph_transformer", g.shape(s_tilde), &[has_answer.len()]));
    }
    let table = g.param(p.flag);
    let ids: Vec<usize> = has_answer.iter().map(|&f| usize::from(f)).collect();
    let f = g.gather(table, &ids)?;
    let x = g.concat(&[s_tilde, f], Axis::Cols)?;
    let (w, b) = (g.param(p.w_p), g.param(p.b_p));
    let x = g.linear(x, w, b)?;
    let x = add_positions(g, x)?;
    encoder_stack(g, x, &p.blocks)
}

/// Source attention of one decoder block.
#[derive(Clone, Copy, Debug)]
pub enum SourceAttentionParams {
    Flat(AttentionParams),
    /// MHATT with queries `tanh(h_{t−1} W + b)` for each level.
    Hier {
        wq_s: ParamId,
        wk_s: ParamId,
        wq_w: ParamId,
        wk_w: ParamId,
        wv: ParamId,
        wo: ParamId,
        state_s: (ParamId, ParamId),
        state_w: (ParamId, ParamId),
    },
}

impl SourceAttentionParams {
    pub fn register_flat(init: &mut Init, prefix: &str, d_model: usize) -> Result<Self> {
        Ok(Self::Flat(AttentionParams::register(init, prefix, d_model)?))
    }

    pub fn register_hier(init: &mut Init, prefix: &str, d_model: usize) -> Result<Self> {
        let sq = |name: &str, init: &mut Init| init.xavier(&format!("{prefix}.{name}"), d_model, d_model);
        let wq_s = sq("wq_s", init)?;
        let wk_s = sq("wk_s", init)?;
        let wq_w = sq("wq_w", init)?;
        let wk_w = sq("wk_w", init)?;
        let wv = sq("wv", init)?;
        let wo = sq("wo", init)?;
        let state_s = (
            init.xavier(&format!("{prefix}.state_s.w"), d_model, d_model)?,
            init.constant(&format!("{prefix}.state_s.b"), &[1, d_model], 0.0)?,
        );
        let state_w = (
            init.xavier(&format!("{prefix}.state_w.w"), d_model, d_model)?,
            init.constant(&format!("{prefix}.state_w.b"), &[1, d_model], 0.0)?,
        );
        Ok(Self::Hier {
            wq_s,
            wk_s,
            wq_w,
            wk_w,
            wv,
            wo,
            state_s,
            state_w,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderBlockParams {
    pub self_attn: AttentionParams,
    pub ln1: LayerNormParams,
    pub source: SourceAttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
    pub ln3: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct TransformerDecoderParams {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub blocks: Vec<DecoderBlockParams>,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub d_model: usize,
    pub heads: usize,
    pub scale: HattScale,
}

impl TransformerDecoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        init: &mut Init,
        prefix: &str,
        emb_dim: usize,
        vocab: usize,
        d_model: usize,
        heads: usize,
        inner: usize,
        layers: usize,
        hierarchical: bool,
        scale: HattScale,
    ) -> Result<Self> {
        check_dims(d_model, heads, inner)?;
        let w_in = init.xavier(&format!("{prefix}.w_in"), emb_dim, d_model)?;
        let b_in = init.constant(&format!("{prefix}.b_in"), &[1, d_model], 0.0)?;
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = format!("{prefix}.block{l}");
            let self_attn = AttentionParams::register(init, &format!("{p}.self"), d_model)?;
            let ln1 = LayerNormParams::register(init, &format!("{p}.ln1"), d_model)?;
            let source = if hierarchical {
                SourceAttentionParams::register_hier(init, &format!("{p}.src"), d_model)?
            } else {
                SourceAttentionParams::register_flat(init, &format!("{p}.src"), d_model)?
            };
            let ln2 = LayerNormParams::register(init, &format!("{p}.ln2"), d_model)?;
            let ffn = FfnParams::register(init, &format!("{p}.ffn"), d_model, inner)?;
            let ln3 = LayerNormParams::register(init, &format!("{p}.ln3"), d_model)?;
            blocks.push(DecoderBlockParams {
                self_attn,
                ln1,
                source,
                ln2,
                ffn,
                ln3,
            });
        }
        let w_out = init.xavier(&format!("{prefix}.w_out"), d_model, vocab)?;
        let b_out = init.constant(&format!("{prefix}.b_out"), &[1, vocab], 0.0)?;
        Ok(Self {
            w_in,
            b_in,
            blocks,
            w_out,
            b_out,
            d_model,
            heads,
            scale,
        })
    }
}

/// Encoder output seen by the decoder.
#[derive(Clone, Debug)]
pub enum SourceRepr {
    /// `M × d_model` word representations.
    Flat(Var),
    /// Paragraph representations `s` (`K × d_model`), stacked word
    /// representations `r` (`M × d_model`) and sentence lengths.
    Hier { s: Var, r: Var, lens: Vec<usize> },
}

/// Per-block source keys and values, projected once per instance.
#[derive(Clone, Debug)]
pub enum DecoderMemory {
    Flat(Vec<ProjectedMemory>),
    Hier(Vec<MhattMemory>),
}

pub fn prepare_memory(g: &mut Graph, source: &SourceRepr, p: &TransformerDecoderParams) -> Result<DecoderMemory> {
    match source {
        SourceRepr::Flat(m) => {
            let mut out = Vec::with_capacity(p.blocks.len());
            for b in &p.blocks {
                let SourceAttentionParams::Flat(a) = b.source else {
                    return Err(Error::arg("flat source given to a hierarchical decoder"));
                };
                let (wk, wv) = (g.param(a.wk), g.param(a.wv));
                out.push(ProjectedMemory {
                    keys: g.matmul(*m, wk)?,
                    values: g.matmul(*m, wv)?,
                });
            }
            Ok(DecoderMemory::Flat(out))
        }
        SourceRepr::Hier { s, r, lens } => {
            let mut out = Vec::with_capacity(p.blocks.len());
            for b in &p.blocks {
                let proj = hier_projections(g, &b.source)?;
                out.push(project_hierarchical_memory(g, *s, *r, *r, lens, &proj)?);
            }
            Ok(DecoderMemory::Hier(out))
        }
    }
}

fn hier_projections(g: &mut Graph, src: &SourceAttentionParams) -> Result<MhattProjections> {
    match *src {
        SourceAttentionParams::Hier {
            wq_s,
            wk_s,
            wq_w,
            wk_w,
            wv,
            wo,
            ..
        } => Ok(MhattProjections {
            wq_s: g.param(wq_s),
            wk_s: g.param(wk_s),
            wq_w: g.param(wq_w),
            wk_w: g.param(wk_w),
            wv: g.param(wv),
            wo: g.param(wo),
        }),
        SourceAttentionParams::Flat(_) => Err(Error::arg("hierarchical source given to a flat decoder")),
    }
}

/// Generated prefix, per-block self-attention key/value rows, and the
/// previous step's pre-softmax vector `h_{t−1}`.
#[derive(Clone, Debug)]
pub struct TransformerDecoderState {
    pub prefix: Vec<usize>,
    keys: Vec<Vec<Var>>,
    values: Vec<Vec<Var>>,
    pub h_prev: Var,
}

impl TransformerDecoderState {
    pub fn new(g: &mut Graph, p: &TransformerDecoderParams) -> Self {
        Self {
            prefix: Vec::new(),
            keys: vec![Vec::new(); p.blocks.len()],
            values: vec![Vec::new(); p.blocks.len()],
            h_prev: g.constant(Tensor::zeros(&[1, p.d_model])),
        }
    }
}

/// Result of one decoder step. `source_heads` holds the last block's
/// hierarchical attention per head (empty for flat source attention).
#[derive(Clone, Debug)]
pub struct DecoderStepOutput {
    pub logits: Var,
    pub state: TransformerDecoderState,
    pub source_heads: Vec<HattOutput>,
}

/// Feeds `token` at position `state.prefix.len()` and returns next-token
/// logits. The first token must be BOS. `extra` (1 × d_model), when given,
/// is added to the input row.
pub fn transformer_decoder_step(
    g: &mut Graph,
    state: &TransformerDecoderState,
    token: usize,
    embeddings: ParamId,
    extra: Option<Var>,
    memory: &DecoderMemory,
    p: &TransformerDecoderParams,
) -> Result<DecoderStepOutput> {
    if state.prefix.is_empty() && token != BOS {
        return Err(Error::arg("decoder prefix must begin with BOS"));
    }
    let t = state.prefix.len();
    let table = g.param(embeddings);
    let e = g.gather(table, &[token])?;
    let (w, b) = (g.param(p.w_in), g.param(p.b_in));
    let mut x = g.linear(e, w, b)?;
    let pe = g.constant(Tensor::row(pe_row(t, p.d_model))?);
    x = g.add(x, pe)?;
    if let Some(extra) = extra {
        x = g.add(x, extra)?;
    }
    let mut next = state.clone();
    next.prefix.push(token);
    let mut source_heads = Vec::new();
    for (l, block) in p.blocks.iter().enumerate() {
        let proj = block.self_attn.vars(g);
        let k = g.matmul(x, proj.wk)?;
        let v = g.matmul(x, proj.wv)?;
        next.keys[l].push(k);
        next.values[l].push(v);
        let cache = ProjectedMemory {
            keys: g.concat(&next.keys[l], Axis::Rows)?,
            values: g.concat(&next.values[l], Axis::Rows)?,
        };
        let (att, _) = multi_head_projected(g, x, &cache, p.heads, &proj)?;
        let y = g.add(x, att)?;
        let y = block.ln1.apply(g, y)?;

        let src = match (memory, &block.source) {
            (DecoderMemory::Flat(mems), SourceAttentionParams::Flat(a)) => {
                let proj = a.vars(g);
                multi_head_projected(g, y, &mems[l], p.heads, &proj)?.0
            }
            (DecoderMemory::Hier(mems), SourceAttentionParams::Hier { state_s, state_w, .. }) => {
                let (ws, bs) = (g.param(state_s.0), g.param(state_s.1));
                let q_s = g.linear(state.h_prev, ws, bs)?;
                let q_s = g.tanh(q_s)?;
                let (ww, bw) = (g.param(state_w.0), g.param(state_w.1));
                let q_w = g.linear(state.h_prev, ww, bw)?;
                let q_w = g.tanh(q_w)?;
                let proj = hier_projections(g, &block.source)?;
                let out = mhatt_projected(g, q_s, q_w, &mems[l], p.heads, &proj, p.scale)?;
                source_heads = out.heads;
                out.context
            }
            _ => return Err(Error::arg("decoder memory does not match source attention kind")),
        };
        let z = g.add(y, src)?;
        let z = block.ln2.apply(g, z)?;
        let f = ffn(g, z, &block.ffn)?;
        let o = g.add(z, f)?;
        x = block.ln3.apply(g, o)?;
    }
    next.h_prev = x;
    let (wo, bo) = (g.param(p.w_out), g.param(p.b_out));
    let logits = g.linear(x, wo, bo)?;
    Ok(DecoderStepOutput {
        logits,
        state: next,
        source_heads,
    })
}
