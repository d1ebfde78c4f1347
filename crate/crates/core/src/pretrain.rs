//! Pre-training batches and the three objectives.

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::dictionary::Assignment;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::Tensor;
use crate::text::{mlm_mask, MlmLabels, Vocabulary};
use crate::transformer::{Packing, PairInput};
use crate::model::Model;

/// Positions hidden from masked visual modeling and their codebook labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MvmMask {
    /// Entry indices chosen for masking, ascending.
    pub chosen: Vec<usize>,
    /// Every token position carrying a chosen index, ascending.
    pub positions: Vec<usize>,
    /// Pre-mask assignment index at each position.
    pub labels: Vec<usize>,
}

/// Picks `m_idx` distinct used indices uniformly and masks every token
/// assigned to them (all of them when fewer are in use).
pub fn mvm_plan<R: Rng + ?Sized>(assignment: &Assignment, m_idx: usize, rng: &mut R) -> Result<MvmMask> {
    if assignment.is_empty() {
        return Err(Error::contract("visual masking needs a non-empty assignment"));
    }
    if m_idx == 0 {
        return Err(Error::config("m_idx must be at least 1"));
    }
    let used = assignment.used();
    let n = m_idx.min(used.len());
    let mut chosen: Vec<usize> = sample(rng, used.len(), n).into_iter().map(|i| used[i]).collect();
    chosen.sort_unstable();
    let mut positions: Vec<usize> = chosen.iter().flat_map(|j| assignment.inverse[j].iter().copied()).collect();
    positions.sort_unstable();
    let labels = positions.iter().map(|&p| assignment.indices[p]).collect();
    Ok(MvmMask {
        chosen,
        positions,
        labels,
    })
}

/// Replaces the planned rows of `visual` (`[l×c]`) with `mask_vector`.
pub fn mvm_mask(g: &mut Graph, visual: Var, mask_vector: Var, plan: &MvmMask) -> Result<Var> {
    g.replace_rows(visual, &plan.positions, mask_vector)
}

/// One image-text pair with its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainPair {
    pub input: PairInput,
    /// 1 for matched pairs, 0 otherwise.
    pub itm: f64,
    pub mlm: MlmLabels,
    /// `(visual position, codebook index)`.
    pub mvm: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub mlm_p: f64,
    pub m_idx: usize,
    pub max_len: usize,
    /// Drop trailing padding; exact because padding is never attended to.
    pub trim_padding: bool,
}

fn text_input(vocab: &Vocabulary, caption: &str, opts: &PretrainOptions) -> Result<(Vec<usize>, Vec<bool>, crate::text::TokenSequence)> {
    let seq = vocab.tokenize(caption, opts.max_len)?;
    let keep = if opts.trim_padding { seq.real } else { seq.len() };
    let mask = seq.pad_mask()[..keep].to_vec();
    Ok((seq.ids[..keep].to_vec(), mask, seq))
}

/// Two matched and two unmatched pairs for one image. `assignment` covers
/// this image's tokens (it may be `None` when quantization is off, in which
/// case no visual masking happens). Masking is applied to matched pairs only.
pub fn build_pretrain_batch<R: Rng + ?Sized>(
    image: usize,
    assignment: Option<&Assignment>,
    positives: [&str; 2],
    negatives: [&str; 2],
    vocab: &Vocabulary,
    opts: &PretrainOptions,
    rng: &mut R,
) -> Result<Vec<PretrainPair>> {
    for neg in negatives {
        if positives.contains(&neg) {
            return Err(Error::Sampling(format!("negative caption {neg:?} duplicates a positive")));
        }
    }
    let mut out = Vec::with_capacity(4);
    for caption in positives {
        let (_, mask, seq) = text_input(vocab, caption, opts)?;
        let (masked, mlm) = mlm_mask(&seq, vocab.len(), opts.mlm_p, rng)?;
        let keep = mask.len();
        let (visual_masked, mvm) = match assignment {
            Some(a) => {
                let plan = mvm_plan(a, opts.m_idx, rng)?;
                let labels = plan.positions.iter().copied().zip(plan.labels.iter().copied()).collect();
                (plan.positions, labels)
            }
            None => (Vec::new(), Vec::new()),
        };
        out.push(PretrainPair {
            input: PairInput {
                image,
                tokens: masked.ids[..keep].to_vec(),
                text_mask: mask,
                visual_masked,
            },
            itm: 1.0,
            mlm,
            mvm,
        });
    }
    for caption in negatives {
        let (tokens, mask, _) = text_input(vocab, caption, opts)?;
        out.push(PretrainPair {
            input: PairInput {
                image,
                tokens,
                text_mask: mask,
                visual_masked: Vec::new(),
            },
            itm: 0.0,
            mlm: Vec::new(),
            mvm: Vec::new(),
        });
    }
    Ok(out)
}

/// Scalar loss nodes of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mlm: Var,
    pub mvm: Var,
    pub itm: Var,
    /// Matching logits, one per pair.
    pub itm_logits: Var,
}

/// Mean cross-entropy terms plus binary matching loss; a term without
/// targets is exactly zero. `total = (mlm + mvm) + itm`.
pub fn combine_losses(
    g: &mut Graph,
    mlm: Option<(Var, &[usize])>,
    mvm: Option<(Var, &[usize])>,
    itm_logits: Var,
    itm_labels: &[f64],
) -> Result<LossTerms> {
    let term = |g: &mut Graph, t: Option<(Var, &[usize])>| match t {
        Some((logits, targets)) if !targets.is_empty() => g.cross_entropy(logits, targets),
        _ => Ok(g.constant(Tensor::scalar(0.0))),
    };
    let mlm = term(g, mlm)?;
    let mvm = term(g, mvm)?;
    let itm = g.bce_with_logits(itm_logits, itm_labels)?;
    let partial = g.add(mlm, mvm)?;
    let total = g.add(partial, itm)?;
    Ok(LossTerms {
        total,
        mlm,
        mvm,
        itm,
        itm_logits,
    })
}

/// Runs the heads over `hidden` and combines the three objectives.
pub fn pretrain_loss(
    g: &mut Graph,
    model: &Model,
    bound: &Bound,
    hidden: Var,
    packing: &Packing,
    pairs: &[PretrainPair],
) -> Result<LossTerms> {
    let l = packing.l;
    let (mut mlm_rows, mut mlm_t, mut mvm_rows, mut mvm_t) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (pair, &start) in pairs.iter().zip(&packing.starts) {
        for &(pos, id) in &pair.mlm {
            mlm_rows.push(start + l + pos);
            mlm_t.push(id);
        }
        for &(pos, j) in &pair.mvm {
            mvm_rows.push(start + pos);
            mvm_t.push(j);
        }
    }
    let mlm = if mlm_rows.is_empty() {
        None
    } else {
        Some((model.heads.mlm(g, bound, hidden, &mlm_rows)?, &mlm_t[..]))
    };
    let mvm = if mvm_rows.is_empty() {
        None
    } else {
        Some((model.heads.mvm(g, bound, hidden, &mvm_rows)?, &mvm_t[..]))
    };
    let itm_logits = model.heads.itm(g, bound, hidden, &packing.cls_rows())?;
    let labels: Vec<f64> = pairs.iter().map(|p| p.itm).collect();
    combine_losses(g, mlm, mvm, itm_logits, &labels)
}
