//! Attention primitives shared by the recurrent and Transformer models.
//!
//! Plain-slice kernels ([`softmax`], [`sparsemax`], [`simplex_projection`])
//! are used for inspection and by the tape. Everything that takes a
//! [`Graph`] is differentiable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Axis, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Word,
    Sentence,
}

/// A normalized attention distribution over `len()` items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    weights: Vec<f64>,
    level: Level,
}

impl AttentionWeights {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn support(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }
}

fn check_scores(v: &[f64], op: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::arg(format!("{op} of an empty vector")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::arg(format!("{op} input must be finite")));
    }
    Ok(())
}

pub fn softmax(v: &[f64], level: Level) -> Result<AttentionWeights> {
    check_scores(v, "softmax")?;
    let mut weights = v.to_vec();
    crate::tensor::softmax_kernel(&mut weights);
    Ok(AttentionWeights { weights, level })
}

pub fn sparsemax(v: &[f64], level: Level) -> Result<AttentionWeights> {
    Ok(AttentionWeights {
        weights: simplex_projection(v)?,
        level,
    })
}

/// Euclidean projection of `v` onto the probability simplex by the
/// sorted-threshold rule: with `z` sorted descending, the support size is the
/// largest `k` such that `1 + k·z_k > Σ_{j≤k} z_j`, the threshold is
/// `τ = (Σ_{j≤k} z_j − 1) / k`, and the result is `max(v − τ, 0)`.
///
/// Inputs are shifted by their maximum first, so adding a constant to every
/// entry only changes the result through rounding of the shift itself.
pub fn simplex_projection(v: &[f64]) -> Result<Vec<f64>> {
    check_scores(v, "sparsemax")?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: Vec<f64> = v.iter().map(|x| x - max).collect();
    let mut sorted = z.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support = (1, sorted[0]);
    for (i, &x) in sorted.iter().enumerate() {
        cumsum += x;
        let k = (i + 1) as f64;
        if 1.0 + k * x > cumsum {
            support = (i + 1, cumsum);
        }
    }
    let tau = (support.1 - 1.0) / support.0 as f64;
    Ok(z.iter().map(|x| (x - tau).max(0.0)).collect())
}

/// `vᵀ tanh(W [item; decoder])` for a single item. `w` is
/// `(len(item) + len(decoder)) × A` and `v` is `A × 1`.
pub fn additive_score(g: &mut Graph, item: Var, decoder: Var, w: Var, v: Var) -> Result<Var> {
    let (ni, nd) = (g.shape(item)[1], g.shape(decoder)[1]);
    let (wr, wc) = (g.value(w).rows(), g.value(w).cols());
    if wr != ni + nd || g.value(v).rows() != wc || g.value(v).cols() != 1 {
        return Err(Error::dim("additive_score", g.shape(w), &[ni + nd, g.value(v).rows()]));
    }
    let x = g.concat(&[item, decoder], Axis::Cols)?;
    let hidden = g.matmul(x, w)?;
    let hidden = g.tanh(hidden)?;
    g.matmul(hidden, v)
}

/// Projects `items` (`M × n`) through the item half of `w`. The result can be
/// reused across decoder steps by [`additive_scores_projected`].
pub fn project_items(g: &mut Graph, items: Var, w: Var) -> Result<Var> {
    let n = g.shape(items)[1];
    if g.value(w).rows() <= n {
        return Err(Error::dim("additive_score", g.shape(w), g.shape(items)));
    }
    let w_item = g.rows(w, 0, n)?;
    g.matmul(items, w_item)
}

/// Scores for every row of an item matrix against one decoder state, given
/// the item projection from [`project_items`]. Returns `1 × M`.
pub fn additive_scores_projected(g: &mut Graph, projected: Var, n_item: usize, decoder: Var, w: Var, v: Var) -> Result<Var> {
    let rows = g.value(w).rows();
    if rows != n_item + g.shape(decoder)[1] || g.value(v).cols() != 1 {
        return Err(Error::dim("additive_score", g.shape(w), g.shape(decoder)));
    }
    let w_dec = g.rows(w, n_item, rows)?;
    let d = g.matmul(decoder, w_dec)?;
    let pre = g.add_row(projected, d)?;
    let hidden = g.tanh(pre)?;
    let scores = g.matmul(hidden, v)?;
    g.transpose(scores)
}

pub fn additive_scores(g: &mut Graph, items: Var, decoder: Var, w: Var, v: Var) -> Result<Var> {
    let n = g.shape(items)[1];
    let projected = project_items(g, items, w)?;
    additive_scores_projected(g, projected, n, decoder, w, v)
}

/// `softmax(Q Kᵀ / scale) V`, returning the context and the weights.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> Result<(Var, Var)> {
    let (n, nv) = (g.value(k).rows(), g.value(v).rows());
    if n != nv {
        return Err(Error::dim("scaled_dot_attention", g.shape(k), g.shape(v)));
    }
    if !(scale > 0.0) {
        return Err(Error::arg(format!("attention scale must be positive, got {scale}")));
    }
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / scale)?;
    let weights = g.softmax(scores)?;
    let context = g.matmul(weights, v)?;
    Ok((context, weights))
}

/// Per-head query/key/value and output projections, each `d_model × d_model`.
/// Head `i` uses column block `[i·d_k, (i+1)·d_k)` of the input projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadProjections {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

pub fn head_dim(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by {heads} heads"
        )));
    }
    Ok(d_model / heads)
}

/// Keys and values already multiplied by their projections.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedMemory {
    pub keys: Var,
    pub values: Var,
}

pub fn project_memory(g: &mut Graph, k: Var, v: Var, proj: &MultiHeadProjections) -> Result<ProjectedMemory> {
    Ok(ProjectedMemory {
        keys: g.matmul(k, proj.wk)?,
        values: g.matmul(v, proj.wv)?,
    })
}

/// `Concat(head_0, …, head_{h−1}) · W^O` with `head_i` the scaled dot-product
/// attention of the projected inputs at scale `√d_k`.
pub fn multi_head(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, proj: &MultiHeadProjections) -> Result<Var> {
    let memory = project_memory(g, k, v, proj)?;
    multi_head_projected(g, q, &memory, heads, proj).map(|(ctx, _)| ctx)
}

/// Multi-head attention against pre-projected memory. Also returns each
/// head's weight row.
pub fn multi_head_projected(
    g: &mut Graph,
    q: Var,
    memory: &ProjectedMemory,
    heads: usize,
    proj: &MultiHeadProjections,
) -> Result<(Var, Vec<Var>)> {
    let d_model = g.shape(q)[1];
    let dk = head_dim(d_model, heads)?;
    let qp = g.matmul(q, proj.wq)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = g.cols(qp, lo, hi)?;
        let kh = g.cols(memory.keys, lo, hi)?;
        let vh = g.cols(memory.values, lo, hi)?;
        let (ctx, w) = scaled_dot_attention(g, qh, kh, vh, (dk as f64).sqrt())?;
        outs.push(ctx);
        weights.push(w);
    }
    let cat = g.concat(&outs, Axis::Cols)?;
    Ok((g.matmul(cat, proj.wo)?, weights))
}

/// Scaling of hierarchical attention scores: divide by `√d` (as in scaled
/// dot-product attention) or by `d`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HattScale {
    #[default]
    SqrtD,
    D,
}

impl HattScale {
    pub fn divisor(self, d: usize) -> f64 {
        match self {
            HattScale::SqrtD => (d as f64).sqrt(),
            HattScale::D => d as f64,
        }
    }
}

/// Inputs of the hierarchical attention module. Word keys and values of all
/// sentences are stacked row-wise; `lens[i]` is the word count of sentence `i`.
#[derive(Clone, Debug)]
pub struct HattInputs {
    pub q_s: Var,
    pub q_w: Var,
    pub k_s: Var,
    pub k_w: Var,
    pub v_w: Var,
    pub lens: Vec<usize>,
}

impl HattInputs {
    pub fn from_sentences(g: &mut Graph, q_s: Var, q_w: Var, k_s: Var, k_w: &[Var], v_w: &[Var]) -> Result<Self> {
        if k_w.len() != v_w.len() {
            return Err(Error::arg("per-sentence key and value counts differ"));
        }
        let mut lens = Vec::with_capacity(k_w.len());
        for (k, v) in k_w.iter().zip(v_w) {
            let (kr, vr) = (g.value(*k).rows(), g.value(*v).rows());
            if kr != vr {
                return Err(Error::dim("hatt", g.shape(*k), g.shape(*v)));
            }
            lens.push(kr);
        }
        let k_w = g.concat(k_w, Axis::Rows)?;
        let v_w = g.concat(v_w, Axis::Rows)?;
        let inputs = Self { q_s, q_w, k_s, k_w, v_w, lens };
        inputs.validate(g)?;
        Ok(inputs)
    }

    pub fn sentences(&self) -> usize {
        self.lens.len()
    }

    pub fn validate(&self, g: &Graph) -> Result<()> {
        if self.lens.is_empty() {
            return Err(Error::arg("hierarchical attention over zero sentences"));
        }
        if self.lens.contains(&0) {
            return Err(Error::arg("hierarchical attention over an empty sentence"));
        }
        let m: usize = self.lens.iter().sum();
        let (ks, kw, vw) = (g.value(self.k_s), g.value(self.k_w), g.value(self.v_w));
        if ks.rows() != self.lens.len() {
            return Err(Error::dim("hatt", ks.shape(), &[self.lens.len()]));
        }
        if kw.rows() != m || vw.rows() != m {
            return Err(Error::dim("hatt", kw.shape(), vw.shape()));
        }
        let (ds, dw) = (g.shape(self.q_s)[1], g.shape(self.q_w)[1]);
        if ds != ks.cols() || dw != kw.cols() {
            return Err(Error::dim("hatt", g.shape(self.q_s), ks.shape()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HattOutput {
    pub context: Var,
    /// `1 × K` sentence weights `a`.
    pub sentence_weights: Var,
    /// `1 × M` word weights: every sentence segment is its own `b_i`.
    pub word_weights: Var,
}

/// Constant `K × M` matrix with `P[i, j] = 1` when word `j` belongs to
/// sentence `i`. `a · P` spreads sentence weights over their words.
pub(crate) fn membership(g: &mut Graph, lens: &[usize]) -> Result<Var> {
    let m: usize = lens.iter().sum();
    let mut data = vec![0.0; lens.len() * m];
    let mut off = 0;
    for (i, &len) in lens.iter().enumerate() {
        for j in off..off + len {
            data[i * m + j] = 1.0;
        }
        off += len;
    }
    Ok(g.constant(crate::tensor::Tensor::matrix(lens.len(), m, data)?))
}

/// `Σ_i a_i (b_i · V_w^i)` with `a = softmax(q_s K_sᵀ / s)` and
/// `b_i = softmax(q_w (K_w^i)ᵀ / s)`, `s = scale.divisor(d)`.
pub fn hatt(g: &mut Graph, inputs: &HattInputs, scale: HattScale) -> Result<HattOutput> {
    inputs.validate(g)?;
    let d = g.shape(inputs.q_s)[1];
    let s = scale.divisor(d);
    let sent_scores = g.matmul_nt(inputs.q_s, inputs.k_s)?;
    let sent_scores = g.scale(sent_scores, 1.0 / s)?;
    let a = g.softmax(sent_scores)?;
    let word_scores = g.matmul_nt(inputs.q_w, inputs.k_w)?;
    let word_scores = g.scale(word_scores, 1.0 / s)?;
    let b = g.segment_softmax(word_scores, &inputs.lens)?;
    let p = membership(g, &inputs.lens)?;
    let spread = g.matmul(a, p)?;
    let w = g.mul(b, spread)?;
    let context = g.matmul(w, inputs.v_w)?;
    Ok(HattOutput {
        context,
        sentence_weights: a,
        word_weights: b,
    })
}

/// Projections for the multi-head hierarchical attention module. All are
/// `d_model × d_model`; head `i` uses column block `i` of the first five.
#[derive(Clone, Copy, Debug)]
pub struct MhattProjections {
    pub wq_s: Var,
    pub wk_s: Var,
    pub wq_w: Var,
    pub wk_w: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Sentence keys, word keys and word values after projection.
#[derive(Clone, Debug)]
pub struct MhattMemory {
    pub k_s: Var,
    pub k_w: Var,
    pub v_w: Var,
    pub lens: Vec<usize>,
}

pub fn project_hierarchical_memory(
    g: &mut Graph,
    k_s: Var,
    k_w: Var,
    v_w: Var,
    lens: &[usize],
    proj: &MhattProjections,
) -> Result<MhattMemory> {
    Ok(MhattMemory {
        k_s: g.matmul(k_s, proj.wk_s)?,
        k_w: g.matmul(k_w, proj.wk_w)?,
        v_w: g.matmul(v_w, proj.wv)?,
        lens: lens.to_vec(),
    })
}

#[derive(Clone, Debug)]
pub struct MhattOutput {
    pub context: Var,
    pub heads: Vec<HattOutput>,
}

/// Multi-head extension of [`hatt`]: each head runs the hierarchical module
/// on its projected slice with `d = d_k`; head contexts are concatenated and
/// mapped through `W^O`.
pub fn mhatt(g: &mut Graph, inputs: &HattInputs, heads: usize, proj: &MhattProjections, scale: HattScale) -> Result<MhattOutput> {
    inputs.validate(g)?;
    let memory = project_hierarchical_memory(g, inputs.k_s, inputs.k_w, inputs.v_w, &inputs.lens, proj)?;
    mhatt_projected(g, inputs.q_s, inputs.q_w, &memory, heads, proj, scale)
}

pub fn mhatt_projected(
    g: &mut Graph,
    q_s: Var,
    q_w: Var,
    memory: &MhattMemory,
    heads: usize,
    proj: &MhattProjections,
    scale: HattScale,
) -> Result<MhattOutput> {
    let d_model = g.shape(q_s)[1];
    let dk = head_dim(d_model, heads)?;
    let qs = g.matmul(q_s, proj.wq_s)?;
    let qw = g.matmul(q_w, proj.wq_w)?;
    let mut outs = Vec::with_capacity(heads);
    let mut traces = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let head_inputs = HattInputs {
            q_s: g.cols(qs, lo, hi)?,
            q_w: g.cols(qw, lo, hi)?,
            k_s: g.cols(memory.k_s, lo, hi)?,
            k_w: g.cols(memory.k_w, lo, hi)?,
            v_w: g.cols(memory.v_w, lo, hi)?,
            lens: memory.lens.clone(),
        };
        let out = hatt(g, &head_inputs, scale)?;
        outs.push(out.context);
        traces.push(out);
    }
    let cat = g.concat(&outs, Axis::Cols)?;
    let context = g.matmul(cat, proj.wo)?;
    Ok(MhattOutput { context, heads: traces })
}
