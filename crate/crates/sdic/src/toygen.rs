//! Miniature frozen style-based generator, inversion encoder stand-in, and
//! procedural data synthesis.
//!
//! The generator starts from a learned `128×4×4` constant and runs a fixed
//! block schedule: every block is (optional nearest-neighbor ×2 upsample) →
//! 3×3 convolution → per-channel style modulation → leaky rectifier, followed
//! by a final 1×1 projection to RGB and a tanh squash into `[−1, 1]`. Style
//! row 0 modulates the constant and row `i` modulates block `i−1`; with fewer
//! rows than blocks the last row is reused. Any block output can be tapped as
//! the latent map and replaced by an injected tensor, which is how the
//! compensation network feeds its enhanced map back into synthesis.
//!
//! Synthetic "real" images are generator samples with procedural sprite
//! overlays (rectangles, stripes, discs) composited on top — details the
//! latent code cannot represent, so inversion has something to compensate.

use crate::config::{generator_block_count, generator_channels_at, ModelConfig};
use crate::imageio::Image;
use crate::nn::{lrelu, Binder, BoundConv2d, BoundDense, Conv2d, Dense};
use crate::{shape_err, Result};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::{NodeId, Scalar, Tape};

/// `K×d` matrix of per-layer style rows.
pub type LatentCode<S> = ArrayD<S>;
/// `C_F×H_F×W_F` intermediate generator activation.
pub type LatentMap<S> = ArrayD<S>;

/// Spatial/channel shape of the latent map tapped at 1-based block `layer`.
pub fn latent_map_shape(cfg: &ModelConfig, layer: usize) -> [usize; 3] {
    let n = generator_block_count(cfg.image_size);
    assert!(layer >= 1 && layer <= n, "injection layer out of range");
    let size = (4 << layer).min(cfg.image_size);
    [generator_channels_at(size), size, size]
}

struct GenBlock<S: Scalar> {
    conv: Conv2d<S>,
    style_scale: Dense<S>,
    style_shift: Dense<S>,
    upsample: bool,
}

/// Frozen style-based generator parameters.
pub struct Generator<S: Scalar> {
    pub image_size: usize,
    pub latent_dim: usize,
    pub num_rows: usize,
    map1: Dense<S>,
    map2: Dense<S>,
    constant: ArrayD<S>,
    const_scale: Dense<S>,
    const_shift: Dense<S>,
    blocks: Vec<GenBlock<S>>,
    to_rgb: Conv2d<S>,
}

impl<S: Scalar> Generator<S> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.latent_dim;
        let n = generator_block_count(cfg.image_size);
        let map1 = Dense::new(&mut rng, d, d);
        let map2 = Dense::new(&mut rng, d, d);
        let constant = ArrayD::from_shape_simple_fn(IxDyn(&[128, 4, 4]), || {
            S::lit(rng.gen_range(-1.0..1.0))
        });
        let const_scale = Dense::new(&mut rng, d, 128);
        let const_shift = Dense::new(&mut rng, d, 128);
        let mut blocks = Vec::new();
        let mut size = 4usize;
        for i in 0..n {
            let upsample = i + 1 < n;
            let cin = generator_channels_at(size);
            if upsample {
                size *= 2;
            }
            let cout = generator_channels_at(size);
            blocks.push(GenBlock {
                conv: Conv2d::new(&mut rng, cin, cout, 3, 1),
                style_scale: Dense::new(&mut rng, d, cout),
                style_shift: Dense::new(&mut rng, d, cout),
                upsample,
            });
        }
        let to_rgb = Conv2d::new(&mut rng, generator_channels_at(cfg.image_size), 3, 1, 1);
        Generator {
            image_size: cfg.image_size,
            latent_dim: d,
            num_rows: cfg.num_rows,
            map1,
            map2,
            constant,
            const_scale,
            const_shift,
            blocks,
            to_rgb,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        self.map1.visit("gen.map1", f);
        self.map2.visit("gen.map2", f);
        f("gen.constant", &self.constant);
        self.const_scale.visit("gen.const_scale", f);
        self.const_shift.visit("gen.const_shift", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.visit(&format!("gen.block{i}.conv"), f);
            b.style_scale.visit(&format!("gen.block{i}.scale"), f);
            b.style_shift.visit(&format!("gen.block{i}.shift"), f);
        }
        self.to_rgb.visit("gen.to_rgb", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        self.map1.visit_mut("gen.map1", f);
        self.map2.visit_mut("gen.map2", f);
        f("gen.constant", &mut self.constant);
        self.const_scale.visit_mut("gen.const_scale", f);
        self.const_shift.visit_mut("gen.const_shift", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_mut(&format!("gen.block{i}.conv"), f);
            b.style_scale.visit_mut(&format!("gen.block{i}.scale"), f);
            b.style_shift.visit_mut(&format!("gen.block{i}.shift"), f);
        }
        self.to_rgb.visit_mut("gen.to_rgb", f);
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundGenerator {
        BoundGenerator {
            num_rows: self.num_rows,
            map1: self.map1.bind(b),
            map2: self.map2.bind(b),
            constant: b.leaf(&self.constant),
            const_scale: self.const_scale.bind(b),
            const_shift: self.const_shift.bind(b),
            blocks: self
                .blocks
                .iter()
                .map(|blk| BoundGenBlock {
                    conv: blk.conv.bind(b),
                    style_scale: blk.style_scale.bind(b),
                    style_shift: blk.style_shift.bind(b),
                    upsample: blk.upsample,
                })
                .collect(),
            to_rgb: self.to_rgb.bind(b),
        }
    }

    /// Array-level mapping network: z (length d) → K×d code.
    pub fn map_latent_arrays(&self, z: &ArrayD<S>) -> Result<LatentCode<S>> {
        if z.shape() != [self.latent_dim] {
            return Err(shape_err("map_latent z", [self.latent_dim], z.shape()));
        }
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, false);
        let g = self.bind(&mut b);
        let zi = t.constant(z.clone());
        let w = g.map_latent(&mut t, zi);
        Ok(t.value(w).clone())
    }

    /// Array-level synthesis; returns the image and all block outputs
    /// (entry `L−1` is the latent map used at layer `L`).
    pub fn synthesize_arrays(
        &self,
        w: &LatentCode<S>,
        inject: Option<(usize, &LatentMap<S>)>,
    ) -> Result<(Image<S>, Vec<ArrayD<S>>)> {
        if w.shape() != [self.num_rows, self.latent_dim] {
            return Err(shape_err(
                "synthesize w",
                [self.num_rows, self.latent_dim],
                w.shape(),
            ));
        }
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, false);
        let g = self.bind(&mut b);
        let wi = t.constant(w.clone());
        let inj = match inject {
            Some((layer, m)) => {
                let want = self.map_dims(layer);
                if m.shape() != want {
                    return Err(shape_err("inject map", want, m.shape()));
                }
                Some((layer, t.constant(m.clone())))
            }
            None => None,
        };
        let (img, trace) = g.synthesize(&mut t, wi, inj);
        let image = Image::new(t.value(img).clone())?;
        let maps = trace.iter().map(|id| t.value(*id).clone()).collect();
        Ok((image, maps))
    }

    fn map_dims(&self, layer: usize) -> [usize; 3] {
        let size = (4 << layer).min(self.image_size);
        [generator_channels_at(size), size, size]
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

#[derive(Clone, Copy)]
struct BoundGenBlock {
    conv: BoundConv2d,
    style_scale: BoundDense,
    style_shift: BoundDense,
    upsample: bool,
}

/// Generator bound to a tape; all forwards build graph nodes.
pub struct BoundGenerator {
    num_rows: usize,
    map1: BoundDense,
    map2: BoundDense,
    constant: NodeId,
    const_scale: BoundDense,
    const_shift: BoundDense,
    blocks: Vec<BoundGenBlock>,
    to_rgb: BoundConv2d,
}

impl BoundGenerator {
    /// z (length d) → K×d code with identical rows.
    pub fn map_latent<S: Scalar>(&self, t: &mut Tape<S>, z: NodeId) -> NodeId {
        let h = self.map1.apply(t, z);
        let h = lrelu(t, h);
        let style = self.map2.apply(t, h);
        let d = t.value(style).len();
        let row = t.reshape(style, &[1, d]);
        let rows = vec![row; self.num_rows];
        t.concat(&rows, 0)
    }

    fn modulate<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        x: NodeId,
        row: NodeId,
        scale: BoundDense,
        shift: BoundDense,
    ) -> NodeId {
        let s0 = scale.apply(t, row);
        let s = t.add_scalar(s0, S::one());
        let sh = shift.apply(t, row);
        t.scale_shift_channels(x, s, sh)
    }

    fn style_row<S: Scalar>(&self, t: &mut Tape<S>, w: NodeId, i: usize) -> NodeId {
        t.slice_row(w, i.min(self.num_rows - 1))
    }

    /// Full synthesis from a K×d code node. `inject = (layer, map)` replaces
    /// the output of 1-based block `layer` with `map`. Returns the RGB image
    /// node and the per-block outputs actually used downstream.
    pub fn synthesize<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        w: NodeId,
        inject: Option<(usize, NodeId)>,
    ) -> (NodeId, Vec<NodeId>) {
        let row0 = self.style_row(t, w, 0);
        let mut x = self.modulate(t, self.constant, row0, self.const_scale, self.const_shift);
        let mut trace = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            if blk.upsample {
                x = t.upsample2x(x);
            }
            x = blk.conv.apply(t, x);
            let row = self.style_row(t, w, i + 1);
            x = self.modulate(t, x, row, blk.style_scale, blk.style_shift);
            x = lrelu(t, x);
            if let Some((layer, m)) = inject {
                if layer == i + 1 {
                    x = m;
                }
            }
            trace.push(x);
        }
        let rgb = self.to_rgb.apply(t, x);
        (t.tanh(rgb), trace)
    }

    /// Run synthesis only up to 1-based block `layer` and return its output
    /// (the latent map), skipping the rest of the network.
    pub fn synthesize_to<S: Scalar>(&self, t: &mut Tape<S>, w: NodeId, layer: usize) -> NodeId {
        let row0 = self.style_row(t, w, 0);
        let mut x = self.modulate(t, self.constant, row0, self.const_scale, self.const_shift);
        for (i, blk) in self.blocks.iter().enumerate().take(layer) {
            if blk.upsample {
                x = t.upsample2x(x);
            }
            x = blk.conv.apply(t, x);
            let row = self.style_row(t, w, i + 1);
            x = self.modulate(t, x, row, blk.style_scale, blk.style_shift);
            x = lrelu(t, x);
        }
        x
    }

    /// Resume synthesis from an (already compensated) map at 1-based block
    /// `layer`, running only the remaining blocks.
    pub fn synthesize_from<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        w: NodeId,
        layer: usize,
        map: NodeId,
    ) -> NodeId {
        let mut x = map;
        for (i, blk) in self.blocks.iter().enumerate().skip(layer) {
            if blk.upsample {
                x = t.upsample2x(x);
            }
            x = blk.conv.apply(t, x);
            let row = self.style_row(t, w, i + 1);
            x = self.modulate(t, x, row, blk.style_scale, blk.style_shift);
            x = lrelu(t, x);
        }
        let rgb = self.to_rgb.apply(t, x);
        t.tanh(rgb)
    }
}

// ---------------------------------------------------------------------------
// Inversion encoder stand-in
// ---------------------------------------------------------------------------

/// Convolutional image→code encoder: five stride-2 3×3 convolutions and one
/// affine head per style row.
pub struct Encoder<S: Scalar> {
    pub image_size: usize,
    pub latent_dim: usize,
    pub num_rows: usize,
    convs: Vec<Conv2d<S>>,
    heads: Vec<Dense<S>>,
}

const ENCODER_CHANNELS: [usize; 5] = [16, 32, 64, 96, 128];

impl<S: Scalar> Encoder<S> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut cin = 3;
        let mut side = cfg.image_size;
        for cout in ENCODER_CHANNELS {
            convs.push(Conv2d::new(&mut rng, cin, cout, 3, 2));
            cin = cout;
            side = (side + 1) / 2;
        }
        let flat = 128 * side * side;
        let heads = (0..cfg.num_rows)
            .map(|_| Dense::new(&mut rng, flat, cfg.latent_dim))
            .collect();
        Encoder {
            image_size: cfg.image_size,
            latent_dim: cfg.latent_dim,
            num_rows: cfg.num_rows,
            convs,
            heads,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("enc.conv{i}"), f);
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&format!("enc.head{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("enc.conv{i}"), f);
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&format!("enc.head{i}"), f);
        }
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundEncoder {
        BoundEncoder {
            convs: self.convs.iter().map(|c| c.bind(b)).collect(),
            heads: self.heads.iter().map(|h| h.bind(b)).collect(),
        }
    }

    /// Array-level encoding: Image → K×d code.
    pub fn encode_arrays(&self, image: &Image<S>) -> Result<LatentCode<S>> {
        if image.side() != self.image_size {
            return Err(shape_err(
                "encode image",
                [3, self.image_size, self.image_size],
                image.0.shape(),
            ));
        }
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, false);
        let e = self.bind(&mut b);
        let xi = t.constant(image.0.clone());
        let w = e.encode(&mut t, xi);
        Ok(t.value(w).clone())
    }
}

pub struct BoundEncoder {
    convs: Vec<BoundConv2d>,
    heads: Vec<BoundDense>,
}

impl BoundEncoder {
    pub fn encode<S: Scalar>(&self, t: &mut Tape<S>, image: NodeId) -> NodeId {
        let mut x = image;
        for c in &self.convs {
            x = c.apply(t, x);
            x = lrelu(t, x);
        }
        let n = t.value(x).len();
        let flat = t.reshape(x, &[n]);
        let rows: Vec<NodeId> = self
            .heads
            .iter()
            .map(|h| {
                let r = h.apply(t, flat);
                let d = t.value(r).len();
                t.reshape(r, &[1, d])
            })
            .collect();
        t.concat(&rows, 0)
    }
}

// ---------------------------------------------------------------------------
// Procedural dataset synthesis
// ---------------------------------------------------------------------------

/// Draw one sample: a generator image for a random z, optionally composited
/// with 1–4 sprites (details outside the generator's range). Returns the
/// image and the ground-truth z.
pub fn sample_synthetic<S: Scalar>(
    gen: &Generator<S>,
    seed: u64,
    overlay: bool,
) -> Result<(Image<S>, ArrayD<S>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = ArrayD::from_shape_simple_fn(IxDyn(&[gen.latent_dim]), || {
        S::lit(rng.gen_range(-1.0..1.0))
    });
    let w = gen.map_latent_arrays(&z)?;
    let (mut img, _) = gen.synthesize_arrays(&w, None)?;
    if overlay {
        composite_sprites(&mut img, &mut rng);
        img.clamp();
    }
    Ok((img, z))
}

fn composite_sprites<S: Scalar>(img: &mut Image<S>, rng: &mut ChaCha8Rng) {
    let h = img.side();
    let count = rng.gen_range(1..=4usize);
    for _ in 0..count {
        let color = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let alpha = rng.gen_range(0.5..=1.0);
        let kind = rng.gen_range(0..3usize);
        let mask: Box<dyn Fn(usize, usize) -> bool> = match kind {
            0 => {
                let rw = rng.gen_range(h / 8..=h / 2);
                let rh = rng.gen_range(h / 8..=h / 2);
                let x0 = rng.gen_range(0..h - rw + 1);
                let y0 = rng.gen_range(0..h - rh + 1);
                Box::new(move |y, x| x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh)
            }
            1 => {
                let thick = rng.gen_range(2..=(h / 8).max(2));
                let pos = rng.gen_range(0..h - thick + 1);
                let vertical = rng.gen_bool(0.5);
                Box::new(move |y, x| {
                    let c = if vertical { x } else { y };
                    c >= pos && c < pos + thick
                })
            }
            _ => {
                let r = rng.gen_range((h / 16).max(1)..=h / 4);
                let cx = rng.gen_range(0..h) as isize;
                let cy = rng.gen_range(0..h) as isize;
                let r2 = (r * r) as isize;
                Box::new(move |y, x| {
                    let dx = x as isize - cx;
                    let dy = y as isize - cy;
                    dx * dx + dy * dy <= r2
                })
            }
        };
        let a = S::lit(alpha);
        let one_minus = S::lit(1.0 - alpha);
        for y in 0..h {
            for x in 0..h {
                if mask(y, x) {
                    for c in 0..3 {
                        let v = img.0[[c, y, x]];
                        img.0[[c, y, x]] = one_minus * v + a * S::lit(color[c]);
                    }
                }
            }
        }
    }
}
