//! Whole-image convolutional encoder and 2-D sinusoidal position codes.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// RGB image with values in `[0, 1]`, stored planar as `[3, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(format!("image of size {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::dim(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Image::new(height, width, vec![0.0; 3 * height * width])
    }

    /// From interleaved 8-bit RGB, as stored in PPM files.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * height * width {
            return Err(Error::dim(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                3 * height * width,
                bytes.len()
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (p, px) in bytes.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                data[ch * plane + p] = f64::from(px[ch]) / 255.0;
            }
        }
        Image::new(height, width, data)
    }

    /// Interleaved 8-bit RGB, rounding to the nearest level.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for ch in 0..3 {
                let v = (self.data[ch * plane + p].clamp(0.0, 1.0) * 255.0).round();
                out.push(v as u8);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let plane = self.height * self.width;
        let p = y * self.width + x;
        [self.data[p], self.data[plane + p], self.data[2 * plane + p]]
    }

    /// Zero-pads bottom and right so both sides become multiples of `s`.
    pub fn pad_to_multiple(&self, s: usize) -> Image {
        let h = self.height.div_ceil(s) * s;
        let w = self.width.div_ceil(s) * s;
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut data = vec![0.0; 3 * h * w];
        for ch in 0..3 {
            for y in 0..self.height {
                let src = &self.data[(ch * self.height + y) * self.width..][..self.width];
                data[(ch * h + y) * w..][..self.width].copy_from_slice(src);
            }
        }
        Image {
            height: h,
            width: w,
            data,
        }
    }

    /// Crop of `size×size` pixels with top-left corner `(y, x)`; pixels outside are zero.
    pub fn crop(&self, y: usize, x: usize, size: usize) -> Image {
        let mut data = vec![0.0; 3 * size * size];
        for ch in 0..3 {
            for dy in 0..size {
                for dx in 0..size {
                    let (sy, sx) = (y + dy, x + dx);
                    if sy < self.height && sx < self.width {
                        data[(ch * size + dy) * size + dx] =
                            self.data[(ch * self.height + sy) * self.width + sx];
                    }
                }
            }
        }
        Image {
            height: size,
            width: size,
            data,
        }
    }

    fn tensor(&self) -> Tensor {
        Tensor::from_parts(vec![3, self.height, self.width], self.data.clone())
    }
}

/// Grid of `l = grid_h · grid_w` feature vectors of width `c`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub features: Tensor,
}

impl VisualFeatureMap {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn c(&self) -> usize {
        self.features.cols()
    }

    /// `(row, col)` of every token in order.
    pub fn coords(&self) -> Vec<(usize, usize)> {
        (0..self.grid_h)
            .flat_map(|r| (0..self.grid_w).map(move |c| (r, c)))
            .collect()
    }
}

/// Output grid size for an input of the given size.
pub fn grid_dims(height: usize, width: usize, s: usize) -> (usize, usize) {
    (height.div_ceil(s), width.div_ceil(s))
}

/// Length of the joint visual+text sequence.
pub fn joint_length(height: usize, width: usize, s: usize, text_len: usize) -> usize {
    let (gh, gw) = grid_dims(height, width, s);
    gh * gw + text_len
}

/// Variance floor of the channel normalisation before the projection.
pub const NORM_EPS: f64 = 1e-5;

/// Init gain of the 1×1 projection.
pub const PROJ_GAIN: f64 = 2.0;

/// Init gain of the conv blocks. The channel normalisation makes the encoder
/// output nearly invariant to this scale, so it only sets how fast SGD moves the
/// conv features relative to their size.
pub const CONV_GAIN: f64 = 12.0 * std::f64::consts::SQRT_2;

/// Stride-2 3×3 conv blocks with ReLU, then a 1×1 projection to `c` and a
/// 2×2 max pool.
#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<(ParamId, ParamId)>,
    proj: (ParamId, ParamId),
    c: usize,
    s: usize,
}

impl Encoder {
    /// Registers encoder parameters in `store`. `s` must be a power of two ≥ 4.
    pub fn new<R: Rng>(store: &mut ParamStore, c: usize, s: usize, rng: &mut R) -> Result<Self> {
        if s < 4 || !s.is_power_of_two() {
            return Err(Error::config(format!(
                "downsample factor must be a power of two >= 4, got {s}"
            )));
        }
        if c == 0 {
            return Err(Error::config("feature width c must be positive"));
        }
        let n_blocks = s.trailing_zeros() as usize - 1;
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut c_in = 3;
        for i in 0..n_blocks {
            let c_out = if i + 1 == n_blocks { c } else { (16 << i).min(c) };
            let w = uniform_fan_in(rng, &[c_out, c_in, 3, 3], c_in * 9, CONV_GAIN);
            let wid = store.add(format!("encoder.block.{i}.weight"), w, ParamGroup::EncoderConv)?;
            let bid = store.add(
                format!("encoder.block.{i}.bias"),
                Tensor::zeros(&[c_out]),
                ParamGroup::EncoderConv,
            )?;
            blocks.push((wid, bid));
            c_in = c_out;
        }
        let w = uniform_fan_in(rng, &[c, c_in, 1, 1], c_in, PROJ_GAIN);
        let pw = store.add("encoder.proj.weight", w, ParamGroup::Adaptive)?;
        let pb = store.add("encoder.proj.bias", Tensor::zeros(&[c]), ParamGroup::Adaptive)?;
        Ok(Encoder {
            blocks,
            proj: (pw, pb),
            c,
            s,
        })
    }

    /// Looks up an encoder already present in `store` (e.g. after loading a checkpoint).
    pub fn from_store(store: &ParamStore, c: usize, s: usize) -> Result<Self> {
        let find = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
        };
        let n_blocks = s.trailing_zeros() as usize - 1;
        let blocks = (0..n_blocks)
            .map(|i| {
                Ok((
                    find(format!("encoder.block.{i}.weight"))?,
                    find(format!("encoder.block.{i}.bias"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let proj = (
            find("encoder.proj.weight".into())?,
            find("encoder.proj.bias".into())?,
        );
        Ok(Encoder { blocks, proj, c, s })
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn downsample(&self) -> usize {
        self.s
    }

    pub fn proj_bias(&self) -> ParamId {
        self.proj.1
    }

    pub fn conv_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.blocks.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Encodes one image into an `[l×c]` node. Returns the node and the grid size.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, image: &Image) -> Result<(Var, usize, usize)> {
        let padded = image.pad_to_multiple(self.s);
        let mut x = g.constant(padded.tensor());
        for &(w, b) in &self.blocks {
            let y = g.conv2d(x, bound.var(w), bound.var(b), 2, 1)?;
            x = g.relu(y);
        }
        let x = self.normalize_channels(g, x)?;
        let y = g.conv2d(x, bound.var(self.proj.0), bound.var(self.proj.1), 1, 0)?;
        let pooled = g.max_pool2(y)?;
        let (gh, gw) = {
            let s = g.shape(pooled);
            (s[1], s[2])
        };
        let flat = g.reshape(pooled, &[self.c, gh * gw])?;
        Ok((g.transpose(flat)?, gh, gw))
    }

    /// Parameter-free normalisation of the channel vector at every position
    /// of a `[C,H,W]` map. Bounds the projection input regardless of how far
    /// the conv blocks drift.
    fn normalize_channels(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (ch, hw) = (shape[0], shape[1] * shape[2]);
        let flat = g.reshape(x, &[ch, hw])?;
        let rows = g.transpose(flat)?;
        let gain = g.constant(Tensor::full(&[ch], 1.0));
        let bias = g.constant(Tensor::zeros(&[ch]));
        let normed = g.layer_norm(rows, gain, bias, NORM_EPS)?;
        let back = g.transpose(normed)?;
        g.reshape(back, &shape)
    }

    /// Encodes one image outside of training. With `frozen`, the conv blocks
    /// are bound as constants.
    pub fn encode(&self, store: &ParamStore, image: &Image, frozen: bool) -> Result<VisualFeatureMap> {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, store, |grp| frozen && grp == ParamGroup::EncoderConv);
        let (v, grid_h, grid_w) = self.forward(&mut g, &bound, image)?;
        Ok(VisualFeatureMap {
            grid_h,
            grid_w,
            features: g.value(v).clone(),
        })
    }
}

/// Sinusoidal codes for a `grid_h × grid_w` grid, `[l×c]` row-major.
///
/// Channels `0..c/2` encode the row and `c/2..c` the column. Within each half,
/// channel `2i` is `sin(p·ω_i)` and `2i+1` is `cos(p·ω_i)` with
/// `ω_i = 10000^(-2i/(c/2))`.
pub fn position_encoding_2d(grid_h: usize, grid_w: usize, c: usize) -> Result<Tensor> {
    if c == 0 || c % 4 != 0 {
        return Err(Error::config(format!(
            "position encoding width must be a positive multiple of 4, got {c}"
        )));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::dim(format!("empty grid {grid_h}x{grid_w}")));
    }
    let half = c / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| 10000f64.powf(-((2 * i) as f64) / half as f64))
        .collect();
    let mut out = Vec::with_capacity(grid_h * grid_w * c);
    for r in 0..grid_h {
        for col in 0..grid_w {
            for pos in [r as f64, col as f64] {
                for &w in &freqs {
                    out.push((pos * w).sin());
                    out.push((pos * w).cos());
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![grid_h * grid_w, c], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(c: usize, s: usize) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut store, c, s, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn grid_arithmetic() {
        assert_eq!(grid_dims(64, 64, 8), (8, 8));
        let (gh, gw) = grid_dims(600, 1000, 64);
        assert_eq!(gh * gw, 160);
        assert_eq!(joint_length(600, 1000, 64, 16), 176);
        assert_eq!(joint_length(64, 64, 16, 16), 32);
    }

    #[test]
    fn block_widths_follow_doubling() {
        let (store, _) = toy(64, 16);
        let widths: Vec<usize> = (0..3)
            .map(|i| store.get(store.id(&format!("encoder.block.{i}.weight")).unwrap()).shape()[0])
            .collect();
        assert_eq!(widths, vec![16, 32, 64]);
        assert!(store.id("encoder.block.3.weight").is_none());
    }

    #[test]
    fn output_matches_grid_formula() {
        for (h, w, s) in [(64, 64, 8), (64, 64, 16), (20, 36, 8), (17, 9, 4), (33, 64, 16)] {
            let (store, enc) = toy(8, s);
            let img = Image::zeros(h, w).unwrap();
            let fm = enc.encode(&store, &img, false).unwrap();
            assert_eq!((fm.grid_h, fm.grid_w), grid_dims(h, w, s), "{h}x{w} s={s}");
            assert_eq!(fm.features.shape(), &[fm.len(), 8]);
            assert_eq!(fm.coords().len(), fm.len());
            assert_eq!(fm.coords()[fm.grid_w], (1, 0));
        }
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let (store, enc) = toy(16, 16);
        let fm = enc.encode(&store, &Image::zeros(64, 64).unwrap(), false).unwrap();
        assert!(fm.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_sized_image_is_rejected() {
        assert!(matches!(Image::zeros(0, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn rejects_non_power_of_two_downsample() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            Encoder::new(&mut store, 8, 12, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rgb8_round_trip() {
        let bytes: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let img = Image::from_rgb8(2, 3, &bytes).unwrap();
        assert_eq!(img.to_rgb8(), bytes);
        assert_eq!(img.pixel(1, 2), [195.0 / 255.0, 208.0 / 255.0, 221.0 / 255.0]);
    }

    #[test]
    fn padding_keeps_content_top_left() {
        let img = Image::new(1, 1, vec![0.25, 0.5, 0.75]).unwrap();
        let p = img.pad_to_multiple(4);
        assert_eq!((p.height(), p.width()), (4, 4));
        assert_eq!(p.pixel(0, 0), [0.25, 0.5, 0.75]);
        assert_eq!(p.pixel(3, 3), [0.0; 3]);
    }

    #[test]
    fn position_origin_is_sin_zero_cos_one() {
        let pe = position_encoding_2d(4, 4, 16).unwrap();
        let row = pe.row(0);
        for (i, &v) in row.iter().enumerate() {
            assert_eq!(v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn position_axes_are_separated() {
        let pe = position_encoding_2d(4, 4, 16).unwrap();
        assert_ne!(pe.row(1), pe.row(4));
        // (0,1) differs from (0,0) only in the column half
        assert_eq!(&pe.row(1)[..8], &pe.row(0)[..8]);
        assert_ne!(&pe.row(1)[8..], &pe.row(0)[8..]);
    }

    #[test]
    fn position_width_must_divide_by_four() {
        assert!(matches!(position_encoding_2d(2, 2, 6), Err(Error::Config(_))));
    }

    #[test]
    fn position_similarity_decays_with_row_offset() {
        let (n, c) = (16, 64);
        let pe = position_encoding_2d(n, n, c).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for col in [0, 7, 15] {
            for r in 0..n - 3 {
                let base = pe.row(r * n + col);
                let sims: Vec<f64> = (0..4).map(|d| dot(base, pe.row((r + d) * n + col))).collect();
                assert!(sims.windows(2).all(|w| w[1] < w[0]), "row {r} col {col}: {sims:?}");
            }
        }
    }
}
