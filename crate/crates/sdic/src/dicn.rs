//! Discrepancy information compensation network and the invert/edit
//! pipelines.
//!
//! The compensation network reads the discrepancy map `D` and produces two
//! corrections for the frozen generator's inputs:
//!
//! * **Latent-code compensation.** Two small conv stacks with per-row
//!   projection heads predict a scaling `γ` and displacement `θ` (each `K×d`);
//!   the enhanced code is `w_enh = γ ⊙ w + θ`. The heads are zero-initialized
//!   and `γ = 1 + residual`, so an untrained network is exactly the identity.
//! * **Latent-map compensation.** A four-conv stack `f_c2` maps `D` onto the
//!   latent-map grid as `M`; a two-conv stack `f_c1` plus a sigmoid produces
//!   a gate `A = σ(f_c1(F + M))`, and the enhanced map is `A ⊙ M + F`.
//!   `f_c2`'s last layer is zero-initialized, so `M = 0` at start and the map
//!   passes through unchanged. The `no-att` ablation replaces this gated form
//!   with a per-channel affine `(1+γ_F) ⊙ F + θ_F` predicted from `D`.
//!
//! Editing moves the enhanced code along a unit direction and transplants the
//! map-space difference between the edited and base forwards:
//! `F_enh_E = F_enh_R + F_E − F_R`, which preserves the edit's map delta
//! exactly while keeping the compensation.

use crate::config::{EditBase, ModelConfig, Variant};
use crate::dipn::Dipn;
use crate::editing::EditDirection;
use crate::imageio::Image;
use crate::nn::{lrelu, Binder, BoundConv2d, BoundDense, Conv2d, Dense};
use crate::toygen::{latent_map_shape, Encoder, Generator, LatentCode, LatentMap};
use crate::{shape_err, Error, Result};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tapegrad::{NodeId, Scalar, Tape};

/// Per-row scaling and displacement for a latent code.
pub struct AffineParams<S: Scalar> {
    pub gamma: ArrayD<S>,
    pub theta: ArrayD<S>,
}

/// Conv trunk + per-row zero-initialized projection heads (used twice: one
/// instance for γ, one for θ).
struct CodeHead<S: Scalar> {
    convs: Vec<Conv2d<S>>,
    heads: Vec<Dense<S>>,
}

impl<S: Scalar> CodeHead<S> {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let k = cfg.num_rows;
        let convs = vec![
            Conv2d::new(rng, 3, 8, 3, 2),
            Conv2d::new(rng, 8, k, 3, 2),
        ];
        let spatial = (cfg.image_size / 4) * (cfg.image_size / 4);
        let heads = (0..k).map(|_| Dense::zeroed(spatial, cfg.latent_dim)).collect();
        CodeHead { convs, heads }
    }

    fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{name}.conv{i}"), f);
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&format!("{name}.head{i}"), f);
        }
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{name}.conv{i}"), f);
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{name}.head{i}"), f);
        }
    }

    fn bind(&self, b: &mut Binder<S>) -> BoundCodeHead {
        BoundCodeHead {
            convs: self.convs.iter().map(|c| c.bind(b)).collect(),
            heads: self.heads.iter().map(|h| h.bind(b)).collect(),
        }
    }
}

struct BoundCodeHead {
    convs: Vec<BoundConv2d>,
    heads: Vec<BoundDense>,
}

impl BoundCodeHead {
    /// D → K×d residual matrix.
    fn apply<S: Scalar>(&self, t: &mut Tape<S>, d: NodeId) -> NodeId {
        let mut x = d;
        for c in &self.convs {
            x = c.apply(t, x);
            x = lrelu(t, x);
        }
        let sh = t.value(x).shape().to_vec();
        let rowsized = t.reshape(x, &[sh[0], sh[1] * sh[2]]);
        let rows: Vec<NodeId> = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let field = t.slice_row(rowsized, i);
                let r = h.apply(t, field);
                let dlen = t.value(r).len();
                t.reshape(r, &[1, dlen])
            })
            .collect();
        t.concat(&rows, 0)
    }
}

/// Per-channel affine map compensation used by the `no-att` ablation.
struct MapAffine<S: Scalar> {
    convs: Vec<Conv2d<S>>,
    scale_head: Dense<S>,
    shift_head: Dense<S>,
}

impl<S: Scalar> MapAffine<S> {
    fn new(rng: &mut ChaCha8Rng, map_channels: usize) -> Self {
        MapAffine {
            convs: vec![
                Conv2d::new(rng, 3, 8, 3, 2),
                Conv2d::new(rng, 8, 16, 3, 2),
            ],
            scale_head: Dense::zeroed(16, map_channels),
            shift_head: Dense::zeroed(16, map_channels),
        }
    }

    fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{name}.conv{i}"), f);
        }
        self.scale_head.visit(&format!("{name}.scale"), f);
        self.shift_head.visit(&format!("{name}.shift"), f);
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{name}.conv{i}"), f);
        }
        self.scale_head.visit_mut(&format!("{name}.scale"), f);
        self.shift_head.visit_mut(&format!("{name}.shift"), f);
    }

    fn bind(&self, b: &mut Binder<S>) -> BoundMapAffine {
        BoundMapAffine {
            convs: self.convs.iter().map(|c| c.bind(b)).collect(),
            scale_head: self.scale_head.bind(b),
            shift_head: self.shift_head.bind(b),
        }
    }
}

struct BoundMapAffine {
    convs: Vec<BoundConv2d>,
    scale_head: BoundDense,
    shift_head: BoundDense,
}

impl BoundMapAffine {
    fn apply<S: Scalar>(&self, t: &mut Tape<S>, f: NodeId, d: NodeId) -> NodeId {
        let mut x = d;
        for c in &self.convs {
            x = c.apply(t, x);
            x = lrelu(t, x);
        }
        let pooled = t.mean_per_channel(x);
        let g0 = self.scale_head.apply(t, pooled);
        let gamma = t.add_scalar(g0, S::one());
        let theta = self.shift_head.apply(t, pooled);
        t.scale_shift_channels(f, gamma, theta)
    }
}

/// Spatial stride schedule of `f_c2` that lands `D` (side H) on the latent
/// map grid (side H_F).
fn c2_strides(h: usize, h_f: usize) -> [usize; 4] {
    match h / h_f {
        1 => [1, 1, 1, 1],
        2 => [1, 2, 1, 1],
        4 => [1, 2, 2, 1],
        8 => [2, 2, 2, 1],
        r => panic!("unsupported D/latent-map size ratio {r}"),
    }
}

/// The compensation network.
pub struct Dicn<S: Scalar> {
    pub variant: Variant,
    f_g: CodeHead<S>,
    f_t: CodeHead<S>,
    c2: Vec<Conv2d<S>>,
    c1: Vec<Conv2d<S>>,
    map_affine: Option<MapAffine<S>>,
}

impl<S: Scalar> Dicn<S> {
    pub fn new(cfg: &ModelConfig, variant: Variant, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f_g = CodeHead::new(&mut rng, cfg);
        let f_t = CodeHead::new(&mut rng, cfg);
        let [c_f, h_f, _] = latent_map_shape(cfg, cfg.injection_layer);
        let strides = c2_strides(cfg.image_size, h_f);
        let chans = [16usize, 32, 48, c_f];
        let mut c2 = Vec::new();
        let mut cin = 3;
        for (i, (&cout, &s)) in chans.iter().zip(strides.iter()).enumerate() {
            if i + 1 == chans.len() {
                // zero-initialized output layer: M = 0 before training
                c2.push(Conv2d::zeroed(cin, cout, 3, s));
            } else {
                c2.push(Conv2d::new(&mut rng, cin, cout, 3, s));
            }
            cin = cout;
        }
        let c1 = vec![
            Conv2d::new(&mut rng, c_f, c_f, 3, 1),
            Conv2d::new(&mut rng, c_f, c_f, 3, 1),
        ];
        let map_affine = (variant == Variant::NoAtt).then(|| MapAffine::new(&mut rng, c_f));
        Dicn {
            variant,
            f_g,
            f_t,
            c2,
            c1,
            map_affine,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        self.f_g.visit("dicn.f_g", f);
        self.f_t.visit("dicn.f_t", f);
        for (i, c) in self.c2.iter().enumerate() {
            c.visit(&format!("dicn.c2_{i}"), f);
        }
        for (i, c) in self.c1.iter().enumerate() {
            c.visit(&format!("dicn.c1_{i}"), f);
        }
        if let Some(m) = &self.map_affine {
            m.visit("dicn.map_affine", f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        self.f_g.visit_mut("dicn.f_g", f);
        self.f_t.visit_mut("dicn.f_t", f);
        for (i, c) in self.c2.iter_mut().enumerate() {
            c.visit_mut(&format!("dicn.c2_{i}"), f);
        }
        for (i, c) in self.c1.iter_mut().enumerate() {
            c.visit_mut(&format!("dicn.c1_{i}"), f);
        }
        if let Some(m) = &mut self.map_affine {
            m.visit_mut("dicn.map_affine", f);
        }
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundDicn {
        BoundDicn {
            variant: self.variant,
            f_g: self.f_g.bind(b),
            f_t: self.f_t.bind(b),
            c2: self.c2.iter().map(|c| c.bind(b)).collect(),
            c1: self.c1.iter().map(|c| c.bind(b)).collect(),
            map_affine: self.map_affine.as_ref().map(|m| m.bind(b)),
        }
    }

    /// Array-level affine prediction (inference convenience).
    pub fn predict_affine_arrays(&self, d: &ArrayD<S>) -> Result<AffineParams<S>> {
        if d.shape().len() != 3 || d.shape()[0] != 3 {
            return Err(shape_err("discrepancy map", "[3, H, W]", d.shape()));
        }
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, false);
        let bound = self.bind(&mut b);
        let di = t.constant(d.clone());
        let (g, th) = bound.predict_affine(&mut t, di);
        Ok(AffineParams {
            gamma: t.value(g).clone(),
            theta: t.value(th).clone(),
        })
    }

    /// Array-level map compensation (inference convenience).
    pub fn compensate_latent_map_arrays(
        &self,
        f: &LatentMap<S>,
        d: &ArrayD<S>,
    ) -> Result<LatentMap<S>> {
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, false);
        let bound = self.bind(&mut b);
        let fi = t.constant(f.clone());
        let di = t.constant(d.clone());
        let out = bound.compensate_map(&mut t, fi, di);
        let v = t.value(out).clone();
        if v.shape() != f.shape() {
            return Err(shape_err("compensated map", f.shape(), v.shape()));
        }
        Ok(v)
    }
}

pub struct BoundDicn {
    pub variant: Variant,
    f_g: BoundCodeHead,
    f_t: BoundCodeHead,
    c2: Vec<BoundConv2d>,
    c1: Vec<BoundConv2d>,
    map_affine: Option<BoundMapAffine>,
}

impl BoundDicn {
    /// D → (γ, θ), each K×d, with γ = 1 + residual.
    pub fn predict_affine<S: Scalar>(&self, t: &mut Tape<S>, d: NodeId) -> (NodeId, NodeId) {
        let g0 = self.f_g.apply(t, d);
        let gamma = t.add_scalar(g0, S::one());
        let theta = self.f_t.apply(t, d);
        (gamma, theta)
    }

    /// The map-space projection M = f_c2(D).
    pub fn map_term<S: Scalar>(&self, t: &mut Tape<S>, d: NodeId) -> NodeId {
        let mut x = d;
        for (i, c) in self.c2.iter().enumerate() {
            x = c.apply(t, x);
            if i + 1 < self.c2.len() {
                x = lrelu(t, x);
            }
        }
        x
    }

    /// The gate A = σ(f_c1(F + M)).
    pub fn gate<S: Scalar>(&self, t: &mut Tape<S>, f: NodeId, m: NodeId) -> NodeId {
        let mut x = t.add(f, m);
        x = self.c1[0].apply(t, x);
        x = lrelu(t, x);
        x = self.c1[1].apply(t, x);
        t.sigmoid(x)
    }

    /// Full map compensation for the active variant.
    pub fn compensate_map<S: Scalar>(&self, t: &mut Tape<S>, f: NodeId, d: NodeId) -> NodeId {
        match &self.map_affine {
            Some(aff) => aff.apply(t, f, d),
            None => {
                let m = self.map_term(t, d);
                let a = self.gate(t, f, m);
                compensate_with(t, f, m, a)
            }
        }
    }
}

/// Pure gated compensation: A ⊙ M + F.
pub fn compensate_with<S: Scalar>(t: &mut Tape<S>, f: NodeId, m: NodeId, a: NodeId) -> NodeId {
    let gated = t.mul(a, m);
    t.add(gated, f)
}

/// Array-level pure form of the gated compensation.
pub fn compensate_with_arrays<S: Scalar>(
    f: &ArrayD<S>,
    m: &ArrayD<S>,
    a: &ArrayD<S>,
) -> Result<ArrayD<S>> {
    if f.shape() != m.shape() || f.shape() != a.shape() {
        return Err(shape_err("compensate_with", f.shape(), m.shape()));
    }
    Ok(a * m + f)
}

/// Row-wise affine code compensation: γ ⊙ w + θ.
pub fn affine_compensate<S: Scalar>(w: &LatentCode<S>, a: &AffineParams<S>) -> Result<LatentCode<S>> {
    if a.gamma.shape() != w.shape() || a.theta.shape() != w.shape() {
        return Err(shape_err("affine_compensate", w.shape(), a.gamma.shape()));
    }
    Ok(&a.gamma * w + &a.theta)
}

/// Edited-map composition: transplant the edit delta onto the compensated
/// map, F_enh_E = F_enh_R + F_E − F_R.
pub fn compose_edited_map<S: Scalar>(
    f_enh_r: &LatentMap<S>,
    f_e: &LatentMap<S>,
    f_r: &LatentMap<S>,
) -> Result<LatentMap<S>> {
    if f_enh_r.shape() != f_e.shape() || f_enh_r.shape() != f_r.shape() {
        return Err(shape_err("compose_edited_map", f_enh_r.shape(), f_e.shape()));
    }
    Ok(f_enh_r + &(f_e - f_r))
}

fn compose_edited_map_node<S: Scalar>(
    t: &mut Tape<S>,
    f_enh_r: NodeId,
    f_e: NodeId,
    f_r: NodeId,
) -> NodeId {
    let delta = t.sub(f_e, f_r);
    t.add(f_enh_r, delta)
}

// ---------------------------------------------------------------------------
// End-to-end pipelines
// ---------------------------------------------------------------------------

/// All model parameters of one system instance.
pub struct SdicModels<S: Scalar> {
    pub cfg: ModelConfig,
    pub generator: Generator<S>,
    pub encoder: Encoder<S>,
    pub dipn: Dipn<S>,
    pub dicn: Dicn<S>,
}

impl<S: Scalar> SdicModels<S> {
    pub fn new(cfg: &ModelConfig, variant: Variant) -> Self {
        SdicModels {
            cfg: cfg.clone(),
            generator: Generator::new(cfg, cfg.seed),
            encoder: Encoder::new(cfg, cfg.seed.wrapping_add(1)),
            dipn: Dipn::new(cfg, variant, cfg.seed.wrapping_add(2)),
            dicn: Dicn::new(cfg, variant, cfg.seed.wrapping_add(3)),
        }
    }
}

/// Everything the inversion pipeline computed on the way to `R_f`.
pub struct InversionArtifacts<S: Scalar> {
    pub w: LatentCode<S>,
    pub w_enhanced: LatentCode<S>,
    pub d: ArrayD<S>,
    pub f: LatentMap<S>,
    pub f_enhanced: LatentMap<S>,
    pub r_o: Image<S>,
}

/// Everything bound onto one tape for a pipeline forward.
pub struct BoundModels {
    pub generator: crate::toygen::BoundGenerator,
    pub encoder: crate::toygen::BoundEncoder,
    pub dipn: crate::dipn::BoundDipn,
    pub dicn: BoundDicn,
}

pub fn bind_models<S: Scalar>(models: &SdicModels<S>, b: &mut Binder<S>) -> BoundModels {
    BoundModels {
        generator: models.generator.bind(b),
        encoder: models.encoder.bind(b),
        dipn: models.dipn.bind(b),
        dicn: models.dicn.bind(b),
    }
}

/// Nodes produced by [`invert_on_tape`].
pub struct InversionNodes {
    pub w: NodeId,
    pub w_enhanced: NodeId,
    pub d: NodeId,
    pub f: NodeId,
    pub f_enhanced: NodeId,
    pub r_o: NodeId,
    pub r_f: NodeId,
}

/// Build the full inversion graph on a tape: encode, reconstruct, predict the
/// discrepancy, compensate code and map, and re-render.
pub fn invert_on_tape<S: Scalar>(
    t: &mut Tape<S>,
    bound: &BoundModels,
    layer: usize,
    image: NodeId,
) -> InversionNodes {
    let w = bound.encoder.encode(t, image);
    let (r_o, _) = bound.generator.synthesize(t, w, None);
    let d = bound.dipn.forward(t, image, r_o);
    let (gamma, theta) = bound.dicn.predict_affine(t, d);
    let scaled = t.mul(gamma, w);
    let w_enhanced = t.add(scaled, theta);
    let (_, trace) = bound.generator.synthesize(t, w_enhanced, None);
    let f = trace[layer - 1];
    let f_enhanced = bound.dicn.compensate_map(t, f, d);
    let r_f = bound.generator.synthesize_from(t, w_enhanced, layer, f_enhanced);
    InversionNodes {
        w,
        w_enhanced,
        d,
        f,
        f_enhanced,
        r_o,
        r_f,
    }
}

/// Array-level inversion: image → (refined reconstruction, artifacts).
pub fn invert<S: Scalar>(
    models: &SdicModels<S>,
    image: &Image<S>,
) -> Result<(Image<S>, InversionArtifacts<S>)> {
    if image.side() != models.cfg.image_size {
        return Err(shape_err(
            "invert image",
            [3, models.cfg.image_size, models.cfg.image_size],
            image.0.shape(),
        ));
    }
    let mut t = Tape::new();
    let mut b = Binder::new(&mut t, false);
    let bound = bind_models(models, &mut b);
    let ii = t.constant(image.0.clone());
    let nodes = invert_on_tape(&mut t, &bound, models.cfg.injection_layer, ii);
    Ok((
        Image::new(t.value(nodes.r_f).clone())?,
        InversionArtifacts {
            w: t.value(nodes.w).clone(),
            w_enhanced: t.value(nodes.w_enhanced).clone(),
            d: t.value(nodes.d).clone(),
            f: t.value(nodes.f).clone(),
            f_enhanced: t.value(nodes.f_enhanced).clone(),
            r_o: Image::new(t.value(nodes.r_o).clone())?,
        },
    ))
}

/// Array-level editing: move the enhanced code along `direction` by `alpha`
/// and transplant the resulting map delta onto the compensated map.
pub fn edit<S: Scalar>(
    models: &SdicModels<S>,
    image: &Image<S>,
    direction: &EditDirection<S>,
    alpha: f64,
) -> Result<Image<S>> {
    if !alpha.is_finite() {
        return Err(Error::Degenerate("non-finite edit strength".into()));
    }
    let cfg = &models.cfg;
    if image.side() != cfg.image_size {
        return Err(shape_err(
            "edit image",
            [3, cfg.image_size, cfg.image_size],
            image.0.shape(),
        ));
    }
    let delta = direction.row_delta(cfg.num_rows, S::lit(alpha))?;
    let layer = cfg.injection_layer;
    let mut t = Tape::new();
    let mut b = Binder::new(&mut t, false);
    let bound = bind_models(models, &mut b);
    let ii = t.constant(image.0.clone());
    let w = bound.encoder.encode(&mut t, ii);
    let (r_o, r_o_trace) = bound.generator.synthesize(&mut t, w, None);
    let d = bound.dipn.forward(&mut t, ii, r_o);
    let (gamma, theta) = bound.dicn.predict_affine(&mut t, d);
    let scaled = t.mul(gamma, w);
    let w_enhanced = t.add(scaled, theta);
    let delta_node = t.constant(delta);
    let w_e = t.add(w_enhanced, delta_node);
    let (f_r, f_e) = match cfg.edit_base {
        EditBase::Enhanced => {
            let (_, base_trace) = bound.generator.synthesize(&mut t, w_enhanced, None);
            let (_, edit_trace) = bound.generator.synthesize(&mut t, w_e, None);
            (base_trace[layer - 1], edit_trace[layer - 1])
        }
        EditBase::Initial => {
            let raw_edit = t.add(w, delta_node);
            let (_, edit_trace) = bound.generator.synthesize(&mut t, raw_edit, None);
            (r_o_trace[layer - 1], edit_trace[layer - 1])
        }
    };
    let f_enh_r = bound.dicn.compensate_map(&mut t, f_r, d);
    let f_enh_e = compose_edited_map_node(&mut t, f_enh_r, f_e, f_r);
    let out = bound.generator.synthesize_from(&mut t, w_e, layer, f_enh_e);
    Image::new(t.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::toygen::sample_synthetic;
    use ndarray::IxDyn;
    use rand::Rng;

    fn rand_map(seed: u64, shape: &[usize]) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn affine_prediction_identity_at_init_and_shapes() {
        let cfg = RunConfig::default().model;
        let net: Dicn<f64> = Dicn::new(&cfg, Variant::Full, 3);
        let d = rand_map(1, &[3, 64, 64]);
        let a = net.predict_affine_arrays(&d).unwrap();
        assert_eq!(a.gamma.shape(), &[6, 64]);
        assert_eq!(a.theta.shape(), &[6, 64]);
        // zero-initialized heads: identity scaling, zero displacement
        assert!(a.gamma.iter().all(|v| *v == 1.0));
        assert!(a.theta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn affine_compensate_arithmetic() {
        let w = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![2.0, -1.0]).unwrap();
        let a = AffineParams {
            gamma: ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.5, 3.0]).unwrap(),
            theta: ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, -2.0]).unwrap(),
        };
        let out = affine_compensate(&w, &a).unwrap();
        assert_eq!(out.as_slice().unwrap(), &[2.0, -5.0]);
        // identity parameters
        let id = AffineParams {
            gamma: ArrayD::from_elem(IxDyn(&[1, 2]), 1.0),
            theta: ArrayD::zeros(IxDyn(&[1, 2])),
        };
        assert_eq!(affine_compensate(&w, &id).unwrap(), w);
        // linearity in w for fixed parameters
        let u = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.25, 4.0]).unwrap();
        let lhs = affine_compensate(&(&w + &u), &a).unwrap() - affine_compensate(&w, &a).unwrap();
        assert_eq!(lhs, &a.gamma * &u);
    }

    #[test]
    fn map_compensation_identity_and_shapes() {
        let cfg = RunConfig::default().model;
        let net: Dicn<f64> = Dicn::new(&cfg, Variant::Full, 3);
        let f = rand_map(2, &[64, 16, 16]);
        let d = rand_map(3, &[3, 64, 64]);
        // zero-initialized last conv of f_c2 means M = 0 and F passes through
        let out = net.compensate_latent_map_arrays(&f, &d).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn pure_form_identities() {
        let f = rand_map(4, &[4, 8, 8]);
        let a = rand_map(5, &[4, 8, 8]).mapv(f64::abs);
        let zeros = ArrayD::zeros(IxDyn(&[4, 8, 8]));
        assert_eq!(compensate_with_arrays(&f, &zeros, &a).unwrap(), f);
        let fs = ArrayD::from_elem(IxDyn(&[1]), 1.0);
        let ms = ArrayD::from_elem(IxDyn(&[1]), 2.0);
        let as_ = ArrayD::from_elem(IxDyn(&[1]), 0.5);
        assert_eq!(compensate_with_arrays(&fs, &ms, &as_).unwrap()[[0]], 2.0);
        assert!(compensate_with_arrays(&f, &fs, &a).is_err());
    }

    #[test]
    fn edited_map_composition() {
        let f_enh_r = rand_map(6, &[4, 8, 8]);
        let f_r = rand_map(7, &[4, 8, 8]);
        let f_e = rand_map(8, &[4, 8, 8]);
        let out = compose_edited_map(&f_enh_r, &f_e, &f_r).unwrap();
        // scalar spot check: 5 + 3 − 2 = 6
        let s = compose_edited_map(
            &ArrayD::from_elem(IxDyn(&[1]), 5.0),
            &ArrayD::from_elem(IxDyn(&[1]), 3.0),
            &ArrayD::from_elem(IxDyn(&[1]), 2.0),
        )
        .unwrap();
        assert_eq!(s[[0]], 6.0);
        // zero-edit collapse
        assert_eq!(compose_edited_map(&f_enh_r, &f_r, &f_r).unwrap(), f_enh_r);
        // difference preservation
        let diff_out = &out - &f_enh_r;
        let diff_in = &f_e - &f_r;
        assert_eq!(diff_out, diff_in);
    }

    #[test]
    fn untrained_invert_equals_baseline() {
        let cfg = RunConfig::reduced().model;
        let models: SdicModels<f64> = SdicModels::new(&cfg, Variant::Full);
        let (img, _) = sample_synthetic(&models.generator, 21, true).unwrap();
        let (r_f, art) = invert(&models, &img).unwrap();
        // identity compensations: the refined render equals the plain
        // re-render of the encoder code
        assert_eq!(art.w_enhanced, art.w);
        assert_eq!(art.f_enhanced, art.f);
        let (baseline, _) = models.generator.synthesize_arrays(&art.w, None).unwrap();
        assert_eq!(r_f.0, baseline.0);
        // artifact shapes
        assert_eq!(art.w.shape(), &[2, 8]);
        assert_eq!(art.d.shape(), &[3, 16, 16]);
        assert_eq!(art.f.shape(), latent_map_shape(&cfg, cfg.injection_layer));
    }

    #[test]
    fn zero_alpha_edit_matches_invert() {
        let cfg = RunConfig::reduced().model;
        let models: SdicModels<f64> = SdicModels::new(&cfg, Variant::Full);
        let (img, _) = sample_synthetic(&models.generator, 22, true).unwrap();
        let dir = EditDirection::from_vector(rand_map(9, &[8]), None, "test").unwrap();
        let edited = edit(&models, &img, &dir, 0.0).unwrap();
        let (inverted, _) = invert(&models, &img).unwrap();
        assert_eq!(edited.to_bytes(), inverted.to_bytes());
    }

    #[test]
    fn no_att_variant_is_identity_at_init_too() {
        let cfg = RunConfig::reduced().model;
        let net: Dicn<f64> = Dicn::new(&cfg, Variant::NoAtt, 3);
        let shape = latent_map_shape(&cfg, cfg.injection_layer);
        let f = rand_map(10, &shape);
        let d = rand_map(11, &[3, 16, 16]);
        let out = net.compensate_latent_map_arrays(&f, &d).unwrap();
        assert_eq!(out, f);
    }
}
