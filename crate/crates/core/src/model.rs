//! The full model: encoder, visual dictionary, embeddings, transformer, heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::dictionary::{assign, embed, init_codebook, Assignment, Codebook};
use crate::encoder::{grid_dims, position_encoding_2d, Encoder, Image};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::transformer::{Embeddings, Heads, Transformer};

/// Architecture sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub c: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Encoder downsample factor.
    pub s: usize,
    pub max_len: usize,
    pub k: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl ModelDims {
    pub fn grid(&self) -> (usize, usize) {
        grid_dims(self.image_h, self.image_w, self.s)
    }

    /// Visual tokens per image.
    pub fn l(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub emb: Embeddings,
    pub transformer: Transformer,
    pub heads: Heads,
    pub codebook: Codebook,
    pub vocab: Vocabulary,
    pe: Tensor,
}

/// Visual transformer inputs for a stacked batch of images.
pub struct VisualTokens {
    /// Raw encoder features `[n·l × c]`.
    pub raw: Var,
    /// What the transformer sees: quantized or raw features.
    pub inputs: Var,
    /// Nearest-entry assignment of `raw`, when quantizing.
    pub assignment: Option<Assignment>,
    /// Codebook leaf, when quantizing.
    pub entries: Option<Var>,
}

impl Model {
    pub fn new(dims: ModelDims, vocab: Vocabulary, gamma: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, dims.c, dims.s, &mut rng)?;
        let emb = Embeddings::new(&mut store, vocab.len(), dims.max_len, dims.c, &mut rng)?;
        let transformer = Transformer::new(
            &mut store,
            dims.c,
            dims.layers,
            dims.heads,
            dims.mlp_ratio,
            false,
            &mut rng,
        )?;
        let heads = Heads::new(&mut store, dims.c, vocab.len(), dims.k, &mut rng)?;
        let codebook = init_codebook(dims.k, dims.c, gamma, seed ^ 0x5eed_c0de)?;
        let pe = Self::pe_for(&dims)?;
        Ok(Model {
            dims,
            store,
            encoder,
            emb,
            transformer,
            heads,
            codebook,
            vocab,
            pe,
        })
    }

    /// Reassembles a model from stored tensors (e.g. a checkpoint).
    pub fn from_parts(dims: ModelDims, store: ParamStore, codebook: Codebook, vocab: Vocabulary) -> Result<Self> {
        let encoder = Encoder::from_store(&store, dims.c, dims.s)?;
        let emb = Embeddings::from_store(&store)?;
        let transformer = Transformer::from_store(&store, dims.c, dims.layers, dims.heads)?;
        let heads = Heads::from_store(&store)?;
        if codebook.k() != dims.k || codebook.c() != dims.c {
            return Err(Error::dim(format!(
                "codebook {}x{} does not match k={} c={}",
                codebook.k(),
                codebook.c(),
                dims.k,
                dims.c
            )));
        }
        let pe = Self::pe_for(&dims)?;
        Ok(Model {
            dims,
            store,
            encoder,
            emb,
            transformer,
            heads,
            codebook,
            vocab,
            pe,
        })
    }

    fn pe_for(dims: &ModelDims) -> Result<Tensor> {
        let (h, w) = dims.grid();
        position_encoding_2d(h, w, dims.c)
    }

    pub fn position_encoding(&self) -> &Tensor {
        &self.pe
    }

    /// Binds all parameters; with `freeze_encoder`, conv blocks become constants.
    pub fn bind(&self, g: &mut Graph, freeze_encoder: bool) -> Bound {
        Bound::new(g, &self.store, |grp| freeze_encoder && grp == ParamGroup::EncoderConv)
    }

    /// Encodes every image once and stacks the features `[n·l × c]`.
    pub fn encode_images(&self, g: &mut Graph, bound: &Bound, images: &[&Image]) -> Result<Var> {
        let l = self.dims.l();
        let mut parts = Vec::with_capacity(images.len());
        for img in images {
            let (v, gh, gw) = self.encoder.forward(g, bound, img)?;
            if gh * gw != l {
                return Err(Error::dim(format!(
                    "image {}x{} gives {} tokens, model expects {l}",
                    img.height(),
                    img.width(),
                    gh * gw
                )));
            }
            parts.push(v);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        g.concat_rows(&parts)
    }

    /// Raw encoder features of `images` without gradients, `[n·l × c]`.
    pub fn raw_features(&self, images: &[&Image]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(images.len() * self.dims.l() * self.dims.c);
        for img in images {
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &self.store, |_| true);
            let v = self.encode_images(&mut g, &bound, &[img])?;
            out.extend_from_slice(g.value(v).data());
        }
        Tensor::new(&[images.len() * self.dims.l(), self.dims.c], out)
    }

    /// Sets the projection bias so the encoder features of `images` have zero
    /// mean. Max pooling commutes with a per-channel shift, so the centring is
    /// exact on these images.
    pub fn center_features(&mut self, images: &[&Image]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Data("no images to centre features on".into()));
        }
        let id = self.encoder.proj_bias();
        let zero = Tensor::zeros(self.store.get(id).shape());
        *self.store.get_mut(id) = zero;
        let f = self.raw_features(images)?;
        let n = f.rows() as f64;
        let mut mean = vec![0.0; f.cols()];
        for i in 0..f.rows() {
            for (m, &x) in mean.iter_mut().zip(f.row(i)) {
                *m += x;
            }
        }
        let bias = Tensor::new(&[f.cols()], mean.into_iter().map(|m| -m / n).collect())?;
        *self.store.get_mut(id) = bias;
        Ok(())
    }

    /// Quantizes `raw` through the codebook when `use_vd`, otherwise passes it on.
    pub fn visual_tokens(&self, g: &mut Graph, raw: Var, use_vd: bool, track_codebook: bool) -> Result<VisualTokens> {
        if !use_vd {
            return Ok(VisualTokens {
                raw,
                inputs: raw,
                assignment: None,
                entries: None,
            });
        }
        let assignment = assign(g.value(raw), &self.codebook)?;
        let entries = self.codebook.bind(g, track_codebook);
        let inputs = embed(g, raw, &assignment, entries)?;
        Ok(VisualTokens {
            raw,
            inputs,
            assignment: Some(assignment),
            entries: Some(entries),
        })
    }
}
