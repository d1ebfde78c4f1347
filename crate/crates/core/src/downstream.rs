//! Fine-tuning and evaluation: retrieval, classification heads and codebook
//! inspection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{sigmoid, Graph, Var};
use crate::config::TrainConfig;
use crate::data::{write_ppm, CaptionedImage, Color, BACKGROUND};
use crate::dictionary::assign;
use crate::encoder::Image;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{uniform_fan_in, Bound, ParamGroup, ParamId};
use crate::tensor::Tensor;
use crate::trainer::{apply_updates, OptimState};
use crate::transformer::{assemble, linear, PairInput};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Pairs scored per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Text input of one caption, trailing padding dropped.
fn text_pair(model: &Model, image: usize, caption: &str) -> Result<PairInput> {
    let seq = model.vocab.tokenize(caption, model.dims.max_len)?;
    Ok(PairInput {
        image,
        tokens: seq.ids[..seq.real].to_vec(),
        text_mask: vec![true; seq.real],
        visual_masked: Vec::new(),
    })
}

/// Transformer visual inputs for each image, no gradients: `[n·l × c]`.
pub fn visual_inputs(model: &Model, images: &[&Image], use_vd: bool) -> Result<Tensor> {
    let l = model.dims.l();
    let c = model.dims.c;
    let mut out = Vec::with_capacity(images.len() * l * c);
    for img in images {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &model.store, |_| true);
        let raw = model.encode_images(&mut g, &bound, &[img])?;
        let vt = model.visual_tokens(&mut g, raw, use_vd, false)?;
        out.extend_from_slice(g.value(vt.inputs).data());
    }
    Tensor::new(&[images.len() * l, c], out)
}

/// ITM logits of `(image slot, caption)` pairs over precomputed visual inputs.
pub fn itm_logits(model: &Model, visual: &Tensor, pairs: &[(usize, &str)]) -> Result<Vec<f64>> {
    let l = model.dims.l();
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
        for &(i, _) in chunk {
            let n = slots.len();
            slots.entry(i).or_insert(n);
        }
        let mut rows = vec![0.0; slots.len() * l * model.dims.c];
        for (&i, &slot) in &slots {
            let w = l * model.dims.c;
            rows[slot * w..(slot + 1) * w].copy_from_slice(&visual.data()[i * w..(i + 1) * w]);
        }
        let inputs = chunk
            .iter()
            .map(|&(i, cap)| text_pair(model, slots[&i], cap))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &model.store, |_| true);
        let vis = g.constant(Tensor::new(&[slots.len() * l, model.dims.c], rows)?);
        let (joint, packing) = assemble(&mut g, &bound, &model.emb, vis, model.position_encoding(), &inputs)?;
        let hidden = model.transformer.forward(&mut g, &bound, joint, &packing.segments)?;
        let z = model.heads.itm(&mut g, &bound, hidden, &packing.cls_rows())?;
        out.extend_from_slice(g.value(z).data());
    }
    Ok(out)
}

/// 1-based rank of candidate `gt` in `scores`; ties go to the lower index.
pub fn rank_of(scores: &[f64], gt: usize) -> usize {
    let s = scores[gt];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < gt))
        .count()
}

/// Fraction of `ranks` within `k`.
pub fn recall_at(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Text (image → caption) and image (caption → image) recall at [`RECALL_KS`].
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub tr: [f64; 3],
    pub ir: [f64; 3],
}

impl RetrievalReport {
    /// `metric\tvalue` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        for (name, vals) in [("tr", &self.tr), ("ir", &self.ir)] {
            for (k, v) in RECALL_KS.iter().zip(vals.iter()) {
                writeln!(s, "{name}_r@{k}\t{v}").expect("string write");
            }
        }
        s
    }
}

/// Recall from an `[images × captions]` score matrix where caption `j`
/// belongs to image `j / per_image`.
pub fn recall_from_scores(scores: &Tensor, per_image: usize) -> Result<RetrievalReport> {
    let n = scores.rows();
    let m = scores.cols();
    if n == 0 || m != n * per_image {
        return Err(Error::dim(format!(
            "score matrix {n}x{m} does not hold {per_image} captions per image"
        )));
    }
    let tr_ranks: Vec<usize> = (0..n)
        .map(|i| {
            (0..per_image)
                .map(|q| rank_of(scores.row(i), i * per_image + q))
                .min()
                .expect("per_image > 0")
        })
        .collect();
    let ir_ranks: Vec<usize> = (0..m)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| scores.row(i)[j]).collect();
            rank_of(&col, j / per_image)
        })
        .collect();
    let pick = |r: &[usize]| RECALL_KS.map(|k| recall_at(r, k));
    Ok(RetrievalReport {
        tr: pick(&tr_ranks),
        ir: pick(&ir_ranks),
    })
}

/// ITM probability of every image against every caption, `[N × 2N]`.
pub fn score_matrix(model: &Model, data: &[CaptionedImage], use_vd: bool) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let images: Vec<&Image> = data.iter().map(|d| &d.image).collect();
    let visual = visual_inputs(model, &images, use_vd)?;
    let captions: Vec<&str> = data.iter().flat_map(|d| d.captions.iter().map(String::as_str)).collect();
    let pairs: Vec<(usize, &str)> = (0..data.len())
        .flat_map(|i| captions.iter().map(move |&c| (i, c)))
        .collect();
    let z = itm_logits(model, &visual, &pairs)?;
    Tensor::new(&[data.len(), captions.len()], z.into_iter().map(sigmoid).collect())
}

pub fn eval_retrieval(model: &Model, data: &[CaptionedImage], use_vd: bool) -> Result<RetrievalReport> {
    recall_from_scores(&score_matrix(model, data, use_vd)?, 2)
}

/// Fresh AdamW step over every parameter with the given gradients.
fn adamw_all(model: &mut Model, state: &mut OptimState, grads: Vec<Option<Tensor>>, lr: f64, wd: f64) -> Result<()> {
    apply_updates(&mut model.store, state, grads, false, None, (lr, wd))
}

/// Retrieval fine-tuning as binary matching: each step takes `t` images with
/// one caption each and scores all `t×t` combinations against the identity.
/// The codebook is not updated. Returns the mean loss per epoch.
pub fn finetune_retrieval(model: &mut Model, cfg: &TrainConfig, data: &[CaptionedImage]) -> Result<Vec<f64>> {
    let t = cfg.ft_batch;
    if t < 2 {
        return Err(Error::config("retrieval fine-tuning needs ft_batch >= 2"));
    }
    if t > data.len() {
        return Err(Error::config(format!(
            "ft_batch {t} exceeds the {} available images",
            data.len()
        )));
    }
    let mut state = OptimState::new(&model.store);
    let mut losses = Vec::with_capacity(cfg.ft_epochs);
    for epoch in 0..cfg.ft_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed ^ 0xf1e7, (epoch as u64) << 32 | 0xffff_ffff));
        let lr = cfg.ft_lr * cfg.ft_decay_factor(epoch);
        let mut sum = 0.0;
        let mut steps = 0;
        for (b, ids) in order.chunks_exact(t).enumerate() {
            let mut rng = stream_rng(cfg.seed ^ 0xf1e7, (epoch as u64) << 32 | b as u64);
            let captions: Vec<&str> = ids.iter().map(|&i| data[i].captions[rng.gen_range(0..2)].as_str()).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let images: Vec<&Image> = ids.iter().map(|&i| &data[i].image).collect();
            let raw = model.encode_images(&mut g, &bound, &images)?;
            let vt = model.visual_tokens(&mut g, raw, cfg.ft_use_vd, false)?;
            let mut inputs = Vec::with_capacity(t * t);
            let mut labels = Vec::with_capacity(t * t);
            for slot in 0..t {
                for (j, cap) in captions.iter().enumerate() {
                    inputs.push(text_pair(model, slot, cap)?);
                    labels.push(if slot == j { 1.0 } else { 0.0 });
                }
            }
            let (joint, packing) = assemble(&mut g, &bound, &model.emb, vt.inputs, model.position_encoding(), &inputs)?;
            let hidden = model.transformer.forward(&mut g, &bound, joint, &packing.segments)?;
            let z = model.heads.itm(&mut g, &bound, hidden, &packing.cls_rows())?;
            let loss = g.bce_with_logits(z, &labels)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: "retrieval fine-tuning loss".into(),
                });
            }
            g.backward(loss)?;
            let grads = model.store.ids().map(|id| g.take_grad(bound.var(id))).collect();
            drop(g);
            adamw_all(model, &mut state, grads, lr, cfg.ft_wd)?;
            sum += value;
            steps += 1;
        }
        losses.push(sum / steps as f64);
    }
    Ok(losses)
}

/// How many images a classification sample looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifyMode {
    Single,
    Paired,
}

/// One labelled example; `images` has one entry in single mode, two in paired.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyExample {
    pub images: Vec<usize>,
    pub text: String,
    pub label: usize,
}

/// Two-layer MLP over the `[CLS]` feature (or two concatenated `[CLS]`
/// features in paired mode), stored as `cls.fc1` and `cls.fc2`.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub mode: ClassifyMode,
    pub n_classes: usize,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

impl ClassifierHead {
    pub fn new<R: Rng>(model: &mut Model, mode: ClassifyMode, n_classes: usize, rng: &mut R) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::config("a classifier needs at least two classes"));
        }
        let c = model.dims.c;
        let d_in = Self::input_dim_for(mode, c);
        let mut add = |name: &str, shape: [usize; 2]| -> Result<(ParamId, ParamId)> {
            let w = model
                .store
                .add(name, uniform_fan_in(rng, &shape, shape[0], 1.0), ParamGroup::Adaptive)?;
            let b = model
                .store
                .add(format!("{name}.bias"), Tensor::zeros(&[shape[1]]), ParamGroup::Adaptive)?;
            Ok((w, b))
        };
        let fc1 = add("cls.fc1", [d_in, c])?;
        let fc2 = add("cls.fc2", [c, n_classes])?;
        Ok(ClassifierHead {
            mode,
            n_classes,
            fc1,
            fc2,
        })
    }

    pub fn input_dim_for(mode: ClassifyMode, c: usize) -> usize {
        match mode {
            ClassifyMode::Single => c,
            ClassifyMode::Paired => 2 * c,
        }
    }

    pub fn input_dim(&self, model: &Model) -> usize {
        model.store.get(self.fc1.0).shape()[0]
    }

    fn images_per_example(&self) -> usize {
        match self.mode {
            ClassifyMode::Single => 1,
            ClassifyMode::Paired => 2,
        }
    }

    /// Class logits `[batch × n_classes]` for `examples`.
    pub fn logits(
        &self,
        g: &mut Graph,
        bound: &Bound,
        model: &Model,
        data: &[CaptionedImage],
        examples: &[&ClassifyExample],
        use_vd: bool,
    ) -> Result<Var> {
        let per = self.images_per_example();
        let mut images = Vec::with_capacity(examples.len() * per);
        let mut inputs = Vec::with_capacity(examples.len() * per);
        for ex in examples {
            if ex.images.len() != per {
                return Err(Error::Data(format!(
                    "{:?} mode expects {per} images per example, got {}",
                    self.mode,
                    ex.images.len()
                )));
            }
            if ex.label >= self.n_classes {
                return Err(Error::Data(format!(
                    "class {} out of range for {} classes",
                    ex.label, self.n_classes
                )));
            }
            for &i in &ex.images {
                let img = data.get(i).ok_or(Error::Index { index: i, len: data.len() })?;
                inputs.push(text_pair(model, images.len(), &ex.text)?);
                images.push(&img.image);
            }
        }
        let raw = model.encode_images(g, bound, &images)?;
        let vt = model.visual_tokens(g, raw, use_vd, false)?;
        let (joint, packing) = assemble(g, bound, &model.emb, vt.inputs, model.position_encoding(), &inputs)?;
        let hidden = model.transformer.forward(g, bound, joint, &packing.segments)?;
        let cls = packing.cls_rows();
        let feats = match self.mode {
            ClassifyMode::Single => model.heads.features(g, bound, hidden, &cls)?,
            ClassifyMode::Paired => {
                let left: Vec<usize> = cls.iter().step_by(2).copied().collect();
                let right: Vec<usize> = cls.iter().skip(1).step_by(2).copied().collect();
                let a = model.heads.features(g, bound, hidden, &left)?;
                let b = model.heads.features(g, bound, hidden, &right)?;
                g.concat_cols(&[a, b])?
            }
        };
        let h = linear(g, bound, feats, self.fc1.0, self.fc1.1)?;
        let h = g.gelu(h);
        linear(g, bound, h, self.fc2.0, self.fc2.1)
    }

    /// Mean cross-entropy over `examples` without updating anything.
    pub fn loss(&self, model: &Model, data: &[CaptionedImage], examples: &[ClassifyExample], use_vd: bool) -> Result<f64> {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &model.store, |_| true);
        let refs: Vec<&ClassifyExample> = examples.iter().collect();
        let z = self.logits(&mut g, &bound, model, data, &refs, use_vd)?;
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        let loss = g.cross_entropy(z, &labels)?;
        Ok(g.value(loss).item())
    }

    /// Fraction of `examples` whose arg-max class matches the label.
    pub fn accuracy(&self, model: &Model, data: &[CaptionedImage], examples: &[ClassifyExample], use_vd: bool) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Data("no examples to score".into()));
        }
        let mut correct = 0;
        for chunk in examples.chunks(EVAL_CHUNK / self.images_per_example()) {
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &model.store, |_| true);
            let refs: Vec<&ClassifyExample> = chunk.iter().collect();
            let z = self.logits(&mut g, &bound, model, data, &refs, use_vd)?;
            let z = g.value(z);
            for (r, ex) in chunk.iter().enumerate() {
                let row = z.row(r);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += usize::from(best == ex.label);
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }
}

/// Fine-tunes the whole model plus a fresh classification head with
/// cross-entropy. Returns the head and the mean loss per epoch.
pub fn finetune_classify(
    model: &mut Model,
    cfg: &TrainConfig,
    data: &[CaptionedImage],
    examples: &[ClassifyExample],
    mode: ClassifyMode,
    n_classes: usize,
    batch: usize,
) -> Result<(ClassifierHead, Vec<f64>)> {
    if examples.is_empty() || batch == 0 {
        return Err(Error::Data("classification needs examples and a positive batch size".into()));
    }
    if let Some(ex) = examples.iter().find(|e| e.label >= n_classes) {
        return Err(Error::Data(format!("class {} out of range for {n_classes} classes", ex.label)));
    }
    let mut rng = stream_rng(cfg.seed ^ 0xc1a5, 0);
    let head = ClassifierHead::new(model, mode, n_classes, &mut rng)?;
    let mut state = OptimState::new(&model.store);
    let mut losses = Vec::with_capacity(cfg.ft_epochs);
    for epoch in 0..cfg.ft_epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed ^ 0xc1a5, epoch as u64 + 1));
        let lr = cfg.ft_lr * cfg.ft_decay_factor(epoch);
        let mut sum = 0.0;
        let mut steps = 0;
        for ids in order.chunks(batch) {
            let refs: Vec<&ClassifyExample> = ids.iter().map(|&i| &examples[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|e| e.label).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let z = head.logits(&mut g, &bound, model, data, &refs, cfg.ft_use_vd)?;
            let loss = g.cross_entropy(z, &labels)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: steps,
                    detail: "classification loss".into(),
                });
            }
            g.backward(loss)?;
            let grads = model.store.ids().map(|id| g.take_grad(bound.var(id))).collect();
            drop(g);
            adamw_all(model, &mut state, grads, lr, cfg.ft_wd)?;
            sum += value;
            steps += 1;
        }
        losses.push(sum / steps as f64);
    }
    Ok((head, losses))
}

/// Most frequent scene colour among a patch's pixels, `None` when the patch
/// shows background only.
pub fn dominant_color(patch: &Image) -> Option<Color> {
    let bytes = patch.to_rgb8();
    let mut counts = [0usize; 5];
    for px in bytes.chunks_exact(3) {
        if px == BACKGROUND {
            continue;
        }
        if let Some(c) = Color::ALL.iter().find(|c| c.rgb() == px) {
            counts[c.index()] += 1;
        }
    }
    let best = (0..5).fold(0, |b, j| if counts[j] > counts[b] { j } else { b });
    (counts[best] > 0).then(|| Color::ALL[best])
}

/// Per-index summary of a codebook dump.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexSummary {
    pub index: usize,
    /// Tokens assigned over the whole dataset.
    pub count: usize,
    /// Patches written (at most the per-index cap).
    pub patches: usize,
    /// Share of written patches whose dominant colour equals `dominant`.
    pub purity: f64,
    /// Most common dominant colour, `None` for background.
    pub dominant: Option<Color>,
}

/// Assigns every token of `data`, writes `index_map.tsv`, the `s×s` patches
/// of the chosen indices as `idx_{j}/patch_{n}.ppm` (up to `max_patches`
/// each) and `manifest.tsv`. Without `index`, the `top` most used indices are
/// dumped.
pub fn inspect_vd(
    model: &Model,
    data: &[CaptionedImage],
    index: Option<usize>,
    top: usize,
    max_patches: usize,
    out: &Path,
) -> Result<Vec<IndexSummary>> {
    let k = model.codebook.k();
    if let Some(j) = index {
        if j >= k {
            return Err(Error::Usage(format!("index {j} is out of range for a codebook of {k}")));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let s = model.dims.s;
    let (_, gw) = model.dims.grid();
    let images: Vec<&Image> = data.iter().map(|d| &d.image).collect();
    let raw = visual_inputs(model, &images, false)?;
    let assignment = assign(&raw, &model.codebook)?;
    let l = model.dims.l();

    let mut map = String::from("image\trow\tcol\tindex\n");
    for (t, &j) in assignment.indices.iter().enumerate() {
        let (img, pos) = (t / l, t % l);
        writeln!(map, "{}\t{}\t{}\t{j}", data[img].id, pos / gw, pos % gw).expect("string write");
    }
    fs::write(out.join("index_map.tsv"), map).map_err(|e| Error::io(out.join("index_map.tsv"), e))?;

    let chosen: Vec<usize> = match index {
        Some(j) => vec![j],
        None => {
            let mut used: Vec<(usize, usize)> = assignment.inverse.iter().map(|(&j, p)| (p.len(), j)).collect();
            used.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            used.into_iter().take(top).map(|(_, j)| j).collect()
        }
    };

    let mut manifest = String::from("index\tcount\tpatches\tpurity\tdominant\tnote\n");
    let mut out_rows = Vec::with_capacity(chosen.len());
    for j in chosen {
        let dir = out.join(format!("idx_{j}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let positions = assignment.inverse.get(&j).map_or(&[][..], |p| &p[..]);
        let mut tally: BTreeMap<Option<usize>, usize> = BTreeMap::new();
        let mut written = 0;
        for (n, &t) in positions.iter().take(max_patches).enumerate() {
            let (img, pos) = (t / l, t % l);
            let padded = data[img].image.pad_to_multiple(s);
            let patch = padded.crop((pos / gw) * s, (pos % gw) * s, s);
            *tally.entry(dominant_color(&patch).map(Color::index)).or_default() += 1;
            write_ppm(&dir.join(format!("patch_{n}.ppm")), &patch)?;
            written += 1;
        }
        let (dominant, top_count) = tally
            .iter()
            .fold((None, 0), |(bc, bn), (&c, &n)| if n > bn { (c, n) } else { (bc, bn) });
        let purity = if written == 0 { 0.0 } else { top_count as f64 / written as f64 };
        let dominant = dominant.map(|i| Color::ALL[i]);
        let note = if positions.is_empty() { "unused" } else { "" };
        writeln!(
            manifest,
            "{j}\t{}\t{written}\t{purity}\t{}\t{note}",
            positions.len(),
            dominant.map_or("background", Color::name)
        )
        .expect("string write");
        out_rows.push(IndexSummary {
            index: j,
            count: positions.len(),
            patches: written,
            purity,
            dominant,
        });
    }
    fs::write(out.join("manifest.tsv"), manifest).map_err(|e| Error::io(out.join("manifest.tsv"), e))?;
    Ok(out_rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_arithmetic() {
        let ranks = [1, 3, 6, 2];
        assert_eq!(RECALL_KS.map(|k| recall_at(&ranks, k)), [0.25, 0.75, 1.0]);
        assert_eq!(rank_of(&[0.5, 0.9, 0.5], 2), 3);
        assert_eq!(rank_of(&[0.5, 0.9, 0.5], 0), 2);
        assert_eq!(rank_of(&[0.1, 0.1], 1), 2);
    }

    #[test]
    fn single_image_retrieval_is_perfect() {
        let scores = Tensor::new(&[1, 2], vec![0.3, 0.7]).unwrap();
        let r = recall_from_scores(&scores, 2).unwrap();
        assert_eq!(r.tr, [1.0; 3]);
        assert_eq!(r.ir, [1.0; 3]);
    }

    #[test]
    fn recall_is_monotone_and_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores = Tensor::new(&[8, 16], (0..128).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let r = recall_from_scores(&scores, 2).unwrap();
        for v in [r.tr, r.ir] {
            assert!(v.windows(2).all(|w| w[0] <= w[1]));
        }
        assert_eq!(r.ir[2], 1.0);
        assert!(recall_from_scores(&scores, 3).is_err());
    }

    #[test]
    fn random_scores_hit_chance() {
        let (n, trials) = (50, 400);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hits = 0.0;
        for _ in 0..trials {
            let data: Vec<f64> = (0..n * n).map(|_| rng.gen()).collect();
            hits += recall_from_scores(&Tensor::new(&[n, n], data).unwrap(), 1).unwrap().tr[0];
        }
        let p = 1.0 / n as f64;
        let total = (n * trials) as f64;
        let sigma = (p * (1.0 - p) / total).sqrt();
        assert!((hits / trials as f64 - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn dominant_color_ignores_background() {
        let mut bytes = Vec::new();
        for i in 0..16 {
            bytes.extend_from_slice(if i < 3 { &[0, 0, 255] } else { &BACKGROUND });
        }
        let patch = Image::from_rgb8(4, 4, &bytes).unwrap();
        assert_eq!(dominant_color(&patch), Some(Color::Blue));
        let bg = Image::from_rgb8(1, 1, &BACKGROUND).unwrap();
        assert_eq!(dominant_color(&bg), None);
    }
}
