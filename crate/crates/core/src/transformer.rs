//! Single-stream transformer over packed visual+text sequences, input
//! embeddings and the pre-training heads.

use rand::Rng;

use crate::autograd::{Graph, Segment, Var};
use crate::error::{Error, Result};
use crate::params::{normal, uniform_fan_in, Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// `x·W + b` for `W` stored as `[in×out]`.
pub fn linear(g: &mut Graph, bound: &Bound, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let y = g.matmul(x, bound.var(w))?;
    g.add_row(y, bound.var(b))
}

fn add_linear<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let w = if zero {
        Tensor::zeros(&[fan_in, fan_out])
    } else {
        uniform_fan_in(rng, &[fan_in, fan_out], fan_in, 1.0)
    };
    let wid = store.add(name.to_string(), w, ParamGroup::Adaptive)?;
    let bid = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), ParamGroup::Adaptive)?;
    Ok((wid, bid))
}

fn add_norm(store: &mut ParamStore, name: &str, c: usize) -> Result<(ParamId, ParamId)> {
    let g = store.add(format!("{name}.gain"), Tensor::full(&[c], 1.0), ParamGroup::Adaptive)?;
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[c]), ParamGroup::Adaptive)?;
    Ok((g, b))
}

fn find(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
}

fn find_linear(store: &ParamStore, name: &str) -> Result<(ParamId, ParamId)> {
    Ok((find(store, name)?, find(store, &format!("{name}.bias"))?))
}

fn find_norm(store: &ParamStore, name: &str) -> Result<(ParamId, ParamId)> {
    Ok((find(store, &format!("{name}.gain"))?, find(store, &format!("{name}.bias"))?))
}

#[derive(Clone, Debug)]
struct Layer {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

/// Stack of pre-norm blocks: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Transformer {
    layers: Vec<Layer>,
    heads: usize,
    c: usize,
}

impl Transformer {
    /// With `zero_residual`, the output projections of both residual branches
    /// start at zero, so the freshly built stack is the identity map.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        c: usize,
        layers: usize,
        heads: usize,
        mlp_ratio: usize,
        zero_residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::config(format!("width {c} is not divisible by {heads} heads")));
        }
        let hidden = c * mlp_ratio;
        let mut out = Vec::with_capacity(layers);
        for i in 0..layers {
            let p = format!("layer.{i}");
            out.push(Layer {
                ln1: add_norm(store, &format!("{p}.ln1"), c)?,
                q: add_linear(store, &format!("{p}.attn.q"), c, c, false, rng)?,
                k: add_linear(store, &format!("{p}.attn.k"), c, c, false, rng)?,
                v: add_linear(store, &format!("{p}.attn.v"), c, c, false, rng)?,
                o: add_linear(store, &format!("{p}.attn.o"), c, c, zero_residual, rng)?,
                ln2: add_norm(store, &format!("{p}.ln2"), c)?,
                fc1: add_linear(store, &format!("{p}.mlp.fc1"), c, hidden, false, rng)?,
                fc2: add_linear(store, &format!("{p}.mlp.fc2"), hidden, c, zero_residual, rng)?,
            });
        }
        Ok(Transformer {
            layers: out,
            heads,
            c,
        })
    }

    pub fn from_store(store: &ParamStore, c: usize, layers: usize, heads: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| {
                let p = format!("layer.{i}");
                Ok(Layer {
                    ln1: find_norm(store, &format!("{p}.ln1"))?,
                    q: find_linear(store, &format!("{p}.attn.q"))?,
                    k: find_linear(store, &format!("{p}.attn.k"))?,
                    v: find_linear(store, &format!("{p}.attn.v"))?,
                    o: find_linear(store, &format!("{p}.attn.o"))?,
                    ln2: find_norm(store, &format!("{p}.ln2"))?,
                    fc1: find_linear(store, &format!("{p}.mlp.fc1"))?,
                    fc2: find_linear(store, &format!("{p}.mlp.fc2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Transformer { layers, heads, c })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Multi-head self-attention sublayer (without residual) on already
    /// normalised input `h`.
    fn attention(&self, g: &mut Graph, bound: &Bound, layer: usize, h: Var, segments: &[Segment]) -> Result<(Var, Var)> {
        let l = &self.layers[layer];
        let q = linear(g, bound, h, l.q.0, l.q.1)?;
        let k = linear(g, bound, h, l.k.0, l.k.1)?;
        let v = linear(g, bound, h, l.v.0, l.v.1)?;
        let a = g.attention(q, k, v, segments, self.heads)?;
        Ok((linear(g, bound, a, l.o.0, l.o.1)?, a))
    }

    /// Runs every block over the packed `[N×c]` input.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, segments: &[Segment]) -> Result<Var> {
        Ok(self.forward_traced(g, bound, x, segments)?.0)
    }

    /// Like [`Transformer::forward`], also returning each layer's attention node.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        bound: &Bound,
        mut x: Var,
        segments: &[Segment],
    ) -> Result<(Var, Vec<Var>)> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.c {
            return Err(Error::dim(format!(
                "transformer input {:?}, expected width {}",
                g.shape(x),
                self.c
            )));
        }
        let mut attn = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let h = g.layer_norm(x, bound.var(l.ln1.0), bound.var(l.ln1.1), LN_EPS)?;
            let (a, node) = self.attention(g, bound, i, h, segments)?;
            attn.push(node);
            x = g.add(x, a)?;
            let h = g.layer_norm(x, bound.var(l.ln2.0), bound.var(l.ln2.1), LN_EPS)?;
            let m = linear(g, bound, h, l.fc1.0, l.fc1.1)?;
            let m = g.gelu(m);
            let m = linear(g, bound, m, l.fc2.0, l.fc2.1)?;
            x = g.add(x, m)?;
        }
        Ok((x, attn))
    }

    /// Single attention sublayer for direct inspection: `O(Attn(Q x, K x, V x))`.
    pub fn attention_sublayer(
        &self,
        g: &mut Graph,
        bound: &Bound,
        layer: usize,
        x: Var,
        segments: &[Segment],
    ) -> Result<(Var, Var)> {
        self.attention(g, bound, layer, x, segments)
    }
}

/// Input embedding tables.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub visual_mask: ParamId,
}

impl Embeddings {
    pub fn new<R: Rng>(store: &mut ParamStore, vocab: usize, max_len: usize, c: usize, rng: &mut R) -> Result<Self> {
        Ok(Embeddings {
            token: store.add("text.token_embedding", normal(rng, &[vocab, c], 1.0), ParamGroup::Adaptive)?,
            position: store.add(
                "text.position_embedding",
                normal(rng, &[max_len, c], 1.0),
                ParamGroup::Adaptive,
            )?,
            segment: store.add("segment_embedding", normal(rng, &[2, c], 1.0), ParamGroup::Adaptive)?,
            visual_mask: store.add("visual_mask", normal(rng, &[c], 1.0), ParamGroup::Adaptive)?,
        })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Embeddings {
            token: find(store, "text.token_embedding")?,
            position: find(store, "text.position_embedding")?,
            segment: find(store, "segment_embedding")?,
            visual_mask: find(store, "visual_mask")?,
        })
    }
}

/// One image-text pair inside a packed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInput {
    /// Slot of the image in the stacked visual tensor.
    pub image: usize,
    /// Text ids starting with `[CLS]`; padding may follow `[SEP]`.
    pub tokens: Vec<usize>,
    /// False at padding positions.
    pub text_mask: Vec<bool>,
    /// Visual positions (within this pair's `l` tokens) replaced by the mask vector.
    pub visual_masked: Vec<usize>,
}

/// Row offsets of a packed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Packing {
    /// Tokens per image.
    pub l: usize,
    /// First row of each pair.
    pub starts: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl Packing {
    pub fn cls_rows(&self) -> Vec<usize> {
        self.starts.iter().map(|s| s + self.l).collect()
    }

    pub fn rows(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.len)
    }
}

/// Builds the packed joint input `[N×c]` for `pairs`.
///
/// Visual rows come from `visual` (`[n_images·l × c]`), masked positions are
/// overwritten by the visual mask vector, then the 2-D position code `pe` and
/// segment 0 are added. Text rows are token plus position embeddings plus
/// segment 1. Each pair is laid out as `l` visual rows followed by its text.
pub fn assemble(
    g: &mut Graph,
    bound: &Bound,
    emb: &Embeddings,
    visual: Var,
    pe: &Tensor,
    pairs: &[PairInput],
) -> Result<(Var, Packing)> {
    if pairs.is_empty() {
        return Err(Error::dim("no pairs to assemble"));
    }
    let l = pe.rows();
    let c = pe.cols();
    let n_images = g.value(visual).rows() / l;
    if g.value(visual).rows() != n_images * l || g.value(visual).cols() != c {
        return Err(Error::dim(format!(
            "visual rows {:?} do not split into {l}-token images of width {c}",
            g.shape(visual)
        )));
    }

    let mut vis_idx = Vec::with_capacity(pairs.len() * l);
    let mut masked = Vec::new();
    let mut tok = Vec::new();
    let mut pos = Vec::new();
    for (p, pair) in pairs.iter().enumerate() {
        if pair.image >= n_images {
            return Err(Error::Index {
                index: pair.image,
                len: n_images,
            });
        }
        if pair.tokens.len() != pair.text_mask.len() || pair.tokens.is_empty() {
            return Err(Error::dim("text ids and mask lengths differ"));
        }
        vis_idx.extend(pair.image * l..(pair.image + 1) * l);
        for &m in &pair.visual_masked {
            if m >= l {
                return Err(Error::Index { index: m, len: l });
            }
            masked.push(p * l + m);
        }
        tok.extend_from_slice(&pair.tokens);
        pos.extend(0..pair.tokens.len());
    }

    let vis = g.gather_rows(visual, &vis_idx)?;
    let vis = if masked.is_empty() {
        vis
    } else {
        g.replace_rows(vis, &masked, bound.var(emb.visual_mask))?
    };
    let mut tiled = Vec::with_capacity(pairs.len() * l * c);
    for _ in pairs {
        tiled.extend_from_slice(pe.data());
    }
    let pe_var = g.constant(Tensor::new(&[pairs.len() * l, c], tiled)?);
    let vis = g.add(vis, pe_var)?;
    let seg0 = g.gather_rows(bound.var(emb.segment), &[0])?;
    let vis = g.add_row(vis, seg0)?;

    let t = g.gather_rows(bound.var(emb.token), &tok)?;
    let pp = g.gather_rows(bound.var(emb.position), &pos)?;
    let text = g.add(t, pp)?;
    let seg1 = g.gather_rows(bound.var(emb.segment), &[1])?;
    let text = g.add_row(text, seg1)?;

    let vis_rows = pairs.len() * l;
    let mut order = Vec::with_capacity(vis_rows + tok.len());
    let mut starts = Vec::with_capacity(pairs.len());
    let mut segments = Vec::with_capacity(pairs.len());
    let mut text_off = 0;
    for (p, pair) in pairs.iter().enumerate() {
        let start = order.len();
        starts.push(start);
        order.extend(p * l..(p + 1) * l);
        order.extend(vis_rows + text_off..vis_rows + text_off + pair.tokens.len());
        text_off += pair.tokens.len();
        let mut key_mask = vec![true; l];
        key_mask.extend_from_slice(&pair.text_mask);
        segments.push(Segment {
            start,
            len: l + pair.tokens.len(),
            key_mask,
        });
    }
    let both = g.concat_rows(&[vis, text])?;
    let joint = g.gather_rows(both, &order)?;
    Ok((joint, Packing { l, starts, segments }))
}

/// Output heads on top of the final hidden states. A shared layer norm is
/// applied to every row a head reads.
#[derive(Clone, Debug)]
pub struct Heads {
    ln: (ParamId, ParamId),
    mlm: (ParamId, ParamId),
    mvm: (ParamId, ParamId),
    itm: (ParamId, ParamId),
}

impl Heads {
    pub fn new<R: Rng>(store: &mut ParamStore, c: usize, vocab: usize, k: usize, rng: &mut R) -> Result<Self> {
        Ok(Heads {
            ln: add_norm(store, "head.ln", c)?,
            mlm: add_linear(store, "head.mlm", c, vocab, false, rng)?,
            mvm: add_linear(store, "head.mvm", c, k, false, rng)?,
            itm: add_linear(store, "head.itm", c, 1, false, rng)?,
        })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Heads {
            ln: find_norm(store, "head.ln")?,
            mlm: find_linear(store, "head.mlm")?,
            mvm: find_linear(store, "head.mvm")?,
            itm: find_linear(store, "head.itm")?,
        })
    }

    /// Normalised hidden states at `rows`.
    pub fn features(&self, g: &mut Graph, bound: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(hidden, rows)?;
        g.layer_norm(h, bound.var(self.ln.0), bound.var(self.ln.1), LN_EPS)
    }

    /// Vocabulary logits `[rows × |V|]`.
    pub fn mlm(&self, g: &mut Graph, bound: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = self.features(g, bound, hidden, rows)?;
        linear(g, bound, h, self.mlm.0, self.mlm.1)
    }

    /// Codebook-index logits `[rows × k]`.
    pub fn mvm(&self, g: &mut Graph, bound: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = self.features(g, bound, hidden, rows)?;
        linear(g, bound, h, self.mvm.0, self.mvm.1)
    }

    /// One matching logit per row, shape `[rows]`.
    pub fn itm(&self, g: &mut Graph, bound: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = self.features(g, bound, hidden, rows)?;
        let z = linear(g, bound, h, self.itm.0, self.itm.1)?;
        g.reshape(z, &[rows.len()])
    }
}
