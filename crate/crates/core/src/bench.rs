//! Inference latency of the three pipeline stages.

use std::fmt::Write as _;
use std::time::Instant;

use crate::autograd::Graph;
use crate::dictionary::{assign, embed};
use crate::encoder::{grid_dims, joint_length, Image};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Bound;
use crate::text::{CLS, FIRST_WORD, SEP};
use crate::transformer::{assemble, PairInput};

pub const STAGES: [&str; 3] = ["encode", "vd_assign_embed", "transformer_forward"];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub image_h: usize,
    pub image_w: usize,
    pub s: usize,
    pub text_len: usize,
    pub grid: (usize, usize),
    pub seq_len: usize,
    pub runs: usize,
    /// Mean seconds per run for each entry of [`STAGES`].
    pub mean_secs: [f64; 3],
}

impl BenchReport {
    /// Sequence arithmetic only, no timings.
    pub fn layout(image_h: usize, image_w: usize, s: usize, text_len: usize) -> Self {
        BenchReport {
            image_h,
            image_w,
            s,
            text_len,
            grid: grid_dims(image_h, image_w, s),
            seq_len: joint_length(image_h, image_w, s, text_len),
            runs: 0,
            mean_secs: [0.0; 3],
        }
    }

    pub fn stage_count(&self) -> usize {
        STAGES.len()
    }

    /// `key\tvalue` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        let (gh, gw) = self.grid;
        let _ = writeln!(s, "resolution\t{}x{}", self.image_h, self.image_w);
        let _ = writeln!(s, "grid\t{gh}x{gw}");
        let _ = writeln!(s, "seq_len\t{gh}*{gw}+{}={}", self.text_len, self.seq_len);
        let _ = writeln!(s, "stages\t{}", self.stage_count());
        if self.runs > 0 {
            let _ = writeln!(s, "runs\t{}", self.runs);
            for (name, t) in STAGES.iter().zip(self.mean_secs) {
                let _ = writeln!(s, "{name}_ms\t{:.3}", t * 1e3);
            }
        }
        s
    }
}

/// Times the stages on `image` with a full-length text of `model.dims.max_len`
/// tokens, averaging over `runs` runs after one warm-up.
pub fn bench(model: &Model, image: &Image, runs: usize) -> Result<BenchReport> {
    if runs == 0 {
        return Err(Error::config("bench needs at least one run"));
    }
    let t = model.dims.max_len;
    if t < 2 {
        return Err(Error::config("max_len must allow [CLS] and [SEP]"));
    }
    let mut tokens = vec![CLS];
    tokens.extend((0..t - 2).map(|i| FIRST_WORD + i % (model.vocab.len() - FIRST_WORD).max(1)));
    tokens.push(SEP);
    let pair = PairInput {
        image: 0,
        text_mask: vec![true; tokens.len()],
        tokens,
        visual_masked: Vec::new(),
    };

    let mut totals = [0.0; 3];
    for run in 0..=runs {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &model.store, |_| true);

        let t0 = Instant::now();
        let raw = model.encode_images(&mut g, &bound, &[image])?;
        let t1 = Instant::now();
        let a = assign(g.value(raw), &model.codebook)?;
        let entries = model.codebook.bind(&mut g, false);
        let vis = embed(&mut g, raw, &a, entries)?;
        let t2 = Instant::now();
        let (joint, packing) = assemble(&mut g, &bound, &model.emb, vis, model.position_encoding(), &[pair.clone()])?;
        let hidden = model.transformer.forward(&mut g, &bound, joint, &packing.segments)?;
        std::hint::black_box(g.value(hidden));
        let t3 = Instant::now();

        if run > 0 {
            totals[0] += (t1 - t0).as_secs_f64();
            totals[1] += (t2 - t1).as_secs_f64();
            totals[2] += (t3 - t2).as_secs_f64();
        }
    }
    let mut report = BenchReport::layout(image.height(), image.width(), model.dims.s, t);
    report.runs = runs;
    report.mean_secs = totals.map(|x| x / runs as f64);
    Ok(report)
}
