//! Pre-training loop: batching, optimizer state, logs and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::config::TrainConfig;
use crate::data::{caption_holds, CaptionedImage};
use crate::dictionary::{accumulate, momentum_update, utilization, Codebook};
use crate::encoder::Image;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{adamw_step, sgd_step};
use crate::params::{ParamGroup, ParamStore};
use crate::pretrain::{build_pretrain_batch, pretrain_loss, PretrainOptions, PretrainPair};
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::transformer::assemble;

pub const CSV_HEADER: &str = "epoch,total,mlm,mvm,itm,itm_acc,util,perplexity";

/// Per-parameter optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<Option<Tensor>>,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
    pub adam_step: u64,
    pub sgd_step: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let n = store.len();
        OptimState {
            velocity: vec![None; n],
            m: vec![None; n],
            v: vec![None; n],
            adam_step: 0,
            sgd_step: 0,
        }
    }

    /// Grows the state to cover parameters added to `store` later.
    pub fn extend_to(&mut self, store: &ParamStore) {
        let n = store.len();
        self.velocity.resize(n, None);
        self.m.resize(n, None);
        self.v.resize(n, None);
    }

    fn to_tensors(&self, store: &ParamStore) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for id in store.ids() {
            let name = store.name(id);
            let i = id.index();
            if let Some(t) = &self.velocity[i] {
                out.push(NamedTensor::f64(format!("sgd.velocity.{name}"), t.clone()));
            }
            if let Some(t) = &self.m[i] {
                out.push(NamedTensor::f64(format!("adamw.m.{name}"), t.clone()));
            }
            if let Some(t) = &self.v[i] {
                out.push(NamedTensor::f64(format!("adamw.v.{name}"), t.clone()));
            }
        }
        out
    }

    fn from_checkpoint(ck: &Checkpoint, store: &ParamStore) -> Self {
        let mut st = OptimState::new(store);
        for id in store.ids() {
            let name = store.name(id);
            let i = id.index();
            st.velocity[i] = ck.tensor(&format!("sgd.velocity.{name}")).cloned();
            st.m[i] = ck.tensor(&format!("adamw.m.{name}")).cloned();
            st.v[i] = ck.tensor(&format!("adamw.v.{name}")).cloned();
        }
        st.adam_step = ck.adam_step;
        st.sgd_step = ck.sgd_step;
        st
    }
}

/// Updates every parameter that received a gradient node in `g`.
///
/// Conv blocks go through momentum SGD unless `freeze_encoder`; the rest
/// through AdamW. Parameters absent from this step's graph get a zero
/// gradient, so decay and momentum still apply.
#[allow(clippy::too_many_arguments)]
pub fn apply_updates(
    store: &mut ParamStore,
    state: &mut OptimState,
    grads: Vec<Option<Tensor>>,
    freeze_encoder: bool,
    sgd: Option<(f64, f64, f64)>,
    adam: (f64, f64),
) -> Result<()> {
    state.extend_to(store);
    let any_sgd = sgd.is_some() && !freeze_encoder;
    if any_sgd {
        state.sgd_step += 1;
    }
    state.adam_step += 1;
    for (id, grad) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
        let i = id.index();
        let shape = store.get(id).shape().to_vec();
        let grad = grad.unwrap_or_else(|| Tensor::zeros(&shape));
        match (store.group(id), sgd) {
            (ParamGroup::EncoderConv, Some((lr, wd, mu))) => {
                if freeze_encoder {
                    continue;
                }
                let vel = state.velocity[i].get_or_insert_with(|| Tensor::zeros(&shape));
                sgd_step(store.get_mut(id), Some(&grad), vel, lr, wd, mu)?;
            }
            _ => {
                let m = state.m[i].get_or_insert_with(|| Tensor::zeros(&shape));
                let v = state.v[i].get_or_insert_with(|| Tensor::zeros(&shape));
                adamw_step(store.get_mut(id), Some(&grad), m, v, adam.0, adam.1, state.adam_step)?;
            }
        }
    }
    Ok(())
}

/// Per-epoch metrics written to `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub total: f64,
    pub mlm: f64,
    pub mvm: f64,
    pub itm: f64,
    pub itm_acc: f64,
    pub util: f64,
    pub perplexity: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.total, self.mlm, self.mvm, self.itm, self.itm_acc, self.util, self.perplexity
        )
    }
}

/// Diagnostics of a single optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub total: f64,
    pub mlm: f64,
    pub mvm: f64,
    pub itm: f64,
    pub itm_correct: usize,
    pub pairs: usize,
    pub encoder_calls: usize,
    /// Largest absolute task-loss gradient that reached the codebook.
    pub codebook_grad: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws two captions from other images that are neither duplicates of the
/// positives nor true of this image's scene.
pub fn sample_negatives<R: Rng>(data: &[CaptionedImage], i: usize, rng: &mut R) -> Result<[String; 2]> {
    if data.len() < 2 {
        return Err(Error::Sampling("negatives need at least two images".into()));
    }
    let mut out: Vec<String> = Vec::with_capacity(2);
    for _ in 0..10_000 {
        let mut j = rng.gen_range(0..data.len() - 1);
        if j >= i {
            j += 1;
        }
        let cap = &data[j].captions[rng.gen_range(0..2)];
        if data[i].captions.contains(cap) || out.contains(cap) || caption_holds(cap, &data[i].scene)? {
            continue;
        }
        out.push(cap.clone());
        if out.len() == 2 {
            return Ok([out[0].clone(), out[1].clone()]);
        }
    }
    Err(Error::Sampling(format!(
        "could not find two unmatched captions for image {}",
        data[i].id
    )))
}

pub struct Pretrainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub state: OptimState,
    pub next_epoch: usize,
    pub global_step: u64,
    pub history: Vec<EpochMetrics>,
    data: Vec<CaptionedImage>,
}

impl Pretrainer {
    pub fn new(cfg: TrainConfig, data: Vec<CaptionedImage>) -> Result<Self> {
        cfg.validate()?;
        if data.len() < 2 {
            return Err(Error::Data("pre-training needs at least two images".into()));
        }
        let vocab = Vocabulary::build(data.iter().flat_map(|d| d.captions.iter().map(String::as_str)))?;
        let mut model = Model::new(cfg.dims(), vocab, cfg.gamma, cfg.seed)?;
        let images: Vec<&Image> = data.iter().map(|d| &d.image).collect();
        model.center_features(&images)?;
        let state = OptimState::new(&model.store);
        Ok(Pretrainer {
            cfg,
            model,
            state,
            next_epoch: 0,
            global_step: 0,
            history: Vec::new(),
            data,
        })
    }

    /// Continues from a checkpoint written by [`Pretrainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, data: Vec<CaptionedImage>) -> Result<Self> {
        let cfg = TrainConfig::parse(&ck.config)?;
        let model = model_from_checkpoint(ck)?;
        let state = OptimState::from_checkpoint(ck, &model.store);
        Ok(Pretrainer {
            cfg,
            model,
            state,
            next_epoch: ck.next_epoch as usize,
            global_step: ck.global_step,
            history: Vec::new(),
            data,
        })
    }

    pub fn data(&self) -> &[CaptionedImage] {
        &self.data
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = model_checkpoint(&self.model, &self.cfg);
        ck.adam_step = self.state.adam_step;
        ck.sgd_step = self.state.sgd_step;
        ck.optimizer = self.state.to_tensors(&self.model.store);
        ck.next_epoch = self.next_epoch as u64;
        ck.global_step = self.global_step;
        ck
    }

    /// Image order for an epoch, split into batches.
    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, (epoch as u64) << 32 | 0xffff_ffff));
        order.chunks(self.cfg.batch_images).map(<[usize]>::to_vec).collect()
    }

    /// One optimizer step on the images `ids`.
    pub fn step(&mut self, epoch: usize, batch: usize, ids: &[usize], histogram: &mut [u64]) -> Result<StepReport> {
        let cfg = &self.cfg;
        let frozen = epoch < cfg.freeze_epochs;
        let mut rng = stream_rng(cfg.seed, (epoch as u64) << 32 | batch as u64);
        let model = &self.model;
        let l = model.dims.l();

        let mut g = Graph::new();
        let bound = model.bind(&mut g, frozen);
        let images: Vec<&Image> = ids.iter().map(|&i| &self.data[i].image).collect();
        let raw = model.encode_images(&mut g, &bound, &images)?;
        let encoder_calls = images.len();
        let vt = model.visual_tokens(&mut g, raw, cfg.use_vd, true)?;

        let opts = PretrainOptions {
            mlm_p: cfg.mlm_p,
            m_idx: cfg.m_idx,
            max_len: cfg.max_len,
            trim_padding: true,
        };
        let mut pairs: Vec<PretrainPair> = Vec::with_capacity(4 * ids.len());
        for (slot, &i) in ids.iter().enumerate() {
            let negatives = sample_negatives(&self.data, i, &mut rng)?;
            let local = vt.assignment.as_ref().map(|a| a.slice(slot * l, l));
            let caps = &self.data[i].captions;
            pairs.extend(build_pretrain_batch(
                slot,
                local.as_ref(),
                [&caps[0], &caps[1]],
                [&negatives[0], &negatives[1]],
                &model.vocab,
                &opts,
                &mut rng,
            )?);
        }
        let inputs: Vec<_> = pairs.iter().map(|p| p.input.clone()).collect();
        let (joint, packing) = assemble(&mut g, &bound, &model.emb, vt.inputs, model.position_encoding(), &inputs)?;
        let hidden = model.transformer.forward(&mut g, &bound, joint, &packing.segments)?;
        let losses = pretrain_loss(&mut g, model, &bound, hidden, &packing, &pairs)?;

        let total = g.value(losses.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch,
                detail: format!(
                    "images [{}]",
                    ids.iter().map(|&i| self.data[i].id.as_str()).collect::<Vec<_>>().join(", ")
                ),
            });
        }
        let logits = g.value(losses.itm_logits).data().to_vec();
        let itm_correct = logits
            .iter()
            .zip(&pairs)
            .filter(|(&z, p)| (z > 0.0) == (p.itm > 0.5))
            .count();
        let report = StepReport {
            total,
            mlm: g.value(losses.mlm).item(),
            mvm: g.value(losses.mvm).item(),
            itm: g.value(losses.itm).item(),
            itm_correct,
            pairs: pairs.len(),
            encoder_calls,
            codebook_grad: 0.0,
        };

        g.backward(losses.total)?;
        let codebook_grad = vt.entries.and_then(|e| g.grad(e)).map_or(0.0, Tensor::max_abs);
        let grads: Vec<Option<Tensor>> = model.store.ids().map(|id| g.take_grad(bound.var(id))).collect();
        let features = g.value(vt.raw).clone();
        let assignment = vt.assignment;
        drop(g);

        let decay = cfg.decay_factor(epoch);
        let sgd = Some((cfg.lr_encoder * decay, cfg.wd_encoder, cfg.momentum));
        let adam = (cfg.lr_transformer * decay, cfg.wd_transformer);
        apply_updates(&mut self.model.store, &mut self.state, grads, frozen, sgd, adam)?;
        if let Some(a) = assignment {
            momentum_update(&mut self.model.codebook, &features, &a)?;
            accumulate(histogram, &a);
        }
        self.global_step += 1;
        Ok(StepReport {
            codebook_grad,
            ..report
        })
    }

    /// Runs the next epoch and appends its metrics to `history`.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.next_epoch;
        let batches = self.batches(epoch);
        let mut histogram = vec![0u64; self.cfg.k];
        let (mut total, mut mlm, mut mvm, mut itm) = (0.0, 0.0, 0.0, 0.0);
        let (mut correct, mut pairs) = (0usize, 0usize);
        for (b, ids) in batches.iter().enumerate() {
            let r = self.step(epoch, b, ids, &mut histogram)?;
            total += r.total;
            mlm += r.mlm;
            mvm += r.mvm;
            itm += r.itm;
            correct += r.itm_correct;
            pairs += r.pairs;
        }
        let n = batches.len() as f64;
        let (util, perplexity) = match utilization(&histogram) {
            Ok(u) => (u.fraction, u.perplexity),
            Err(_) => (0.0, 0.0),
        };
        let m = EpochMetrics {
            epoch,
            total: total / n,
            mlm: mlm / n,
            mvm: mvm / n,
            itm: itm / n,
            itm_acc: correct as f64 / pairs as f64,
            util,
            perplexity,
        };
        self.history.push(m.clone());
        self.next_epoch += 1;
        Ok(m)
    }
}

/// Parameters, codebook, config and vocabulary of a model.
pub fn model_checkpoint(model: &Model, cfg: &TrainConfig) -> Checkpoint {
    let mut tensors: Vec<NamedTensor> = model
        .store
        .ids()
        .map(|id| NamedTensor::f64(model.store.name(id), model.store.get(id).clone()))
        .collect();
    tensors.push(NamedTensor::f64("vd.entries", model.codebook.entries().clone()));
    tensors.push(NamedTensor::u64("vd.counts", model.codebook.counts().to_vec()));
    Checkpoint {
        tensors,
        seed: cfg.seed,
        config: cfg.to_text(),
        vocab: model.vocab.to_text(),
        ..Checkpoint::default()
    }
}

/// Rebuilds a model from a checkpoint; extra heads (e.g. `cls.*`) are kept.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let cfg = TrainConfig::parse(&ck.config)?;
    let vocab = Vocabulary::from_text(&ck.vocab)?;
    let mut store = ParamStore::new();
    for t in &ck.tensors {
        if t.name.starts_with("vd.") {
            continue;
        }
        if let crate::checkpoint::Payload::F64(x) = &t.payload {
            let group = if t.name.starts_with("encoder.block.") {
                ParamGroup::EncoderConv
            } else {
                ParamGroup::Adaptive
            };
            store.add(t.name.clone(), x.clone(), group)?;
        }
    }
    let entries = ck
        .tensor("vd.entries")
        .ok_or_else(|| Error::Data("checkpoint has no codebook entries".into()))?
        .clone();
    let counts = ck
        .counts("vd.counts")
        .ok_or_else(|| Error::Data("checkpoint has no codebook counts".into()))?
        .to_vec();
    let codebook = Codebook::new(entries, counts, cfg.gamma)?;
    Model::from_parts(cfg.dims(), store, codebook, vocab)
}

/// Output of a full pre-training run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub history: Vec<EpochMetrics>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains for the configured epochs, writing `metrics.csv`, `vocab.txt`,
/// `config.txt` and `latest.ckpt` (plus `epoch_{e}.ckpt` when configured).
/// With `resume`, training continues from that checkpoint and the CSV keeps
/// the rows of the epochs already done.
pub fn pretrain(
    cfg: TrainConfig,
    data: Vec<CaptionedImage>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = match resume {
        Some(p) => Pretrainer::resume(&Checkpoint::load(p)?, data)?,
        None => Pretrainer::new(cfg, data)?,
    };
    let csv_path = out_dir.join("metrics.csv");
    let mut csv = String::new();
    writeln!(csv, "{CSV_HEADER}").expect("string write");
    if resume.is_some() {
        if let Ok(old) = fs::read_to_string(&csv_path) {
            for line in old.lines().skip(1) {
                let epoch: usize = line.split(',').next().and_then(|e| e.parse().ok()).unwrap_or(usize::MAX);
                if epoch < trainer.next_epoch {
                    writeln!(csv, "{line}").expect("string write");
                }
            }
        }
    }
    write_text(&out_dir.join("vocab.txt"), &trainer.model.vocab.to_text())?;
    write_text(&out_dir.join("config.txt"), &trainer.cfg.to_text())?;
    write_text(&csv_path, &csv)?;

    while trainer.next_epoch < trainer.cfg.epochs {
        let m = match trainer.run_epoch() {
            Ok(m) => m,
            Err(e @ Error::NonFinite { .. }) => {
                let dump = out_dir.join("nonfinite.txt");
                write_text(&dump, &format!("{e}\n"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(csv, "{}", m.csv_row()).expect("string write");
        write_text(&csv_path, &csv)?;
        let ck = trainer.checkpoint();
        ck.save(&out_dir.join("latest.ckpt"))?;
        if trainer.cfg.keep_epoch_checkpoints {
            ck.save(&out_dir.join(format!("epoch_{}.ckpt", m.epoch)))?;
        }
    }
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        history: trainer.history,
    })
}
