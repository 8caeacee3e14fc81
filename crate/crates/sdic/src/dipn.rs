//! Discrepancy information prediction network.
//!
//! Two parallel spatial-contextual hourglass branches turn the original image
//! `I` and its initial reconstruction `R_o` into feature maps; the branch
//! outputs are concatenated into a one-channel 3D feature volume and pushed
//! through a 3D encoder–decoder. On the decoder side each stage fuses a
//! multi-resolution context feature `C_i` (taken from the *original-image*
//! branch only) via spatial attention:
//!
//! ```text
//! W_i = sigmoid(conv5x5x5(G_i + Ĉ_i))        (attention weights in (0,1))
//! G'_i = W_i ⊙ Ĉ_i + G_i                     (gated additive fusion)
//! ```
//!
//! where `Ĉ_i` is `C_i` lifted onto `G_i`'s volume grid. The last volume is
//! flattened back to 2D and projected to the 3-channel discrepancy map `D`.
//!
//! The `no-sc` ablation removes the branches entirely: the two RGB images are
//! concatenated into a depth-6 volume and run through a plain 3D hourglass
//! with no attention stages.

use crate::config::{ModelConfig, Variant};
use crate::imageio::Image;
use crate::nn::{lrelu, Binder, BoundConv2d, BoundConv3d, BoundConvT3d, Conv2d, Conv3d, ConvT3d};
use crate::{shape_err, Error, Result};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tapegrad::{ConvGeom, NodeId, Scalar, Tape};

/// Branch conv-block channel schedule as multiples of the base width C
/// (halves allowed): C, 1.5C, 2C, 3C, 4C with strides 1, 2, 1, 2, 2.
fn branch_channels(c: usize) -> [usize; 5] {
    assert!(c % 2 == 0, "branch width must be even");
    [c, c * 3 / 2, c * 2, c * 3, c * 4]
}

const DOWN_CHANNELS: [usize; 4] = [1, 8, 16, 32];

/// One spatial-contextual hourglass branch.
pub struct ScBranch<S: Scalar> {
    convs: Vec<Conv2d<S>>,
    ups: Vec<Conv2d<S>>,
    merges: Vec<Conv2d<S>>,
}

impl<S: Scalar> ScBranch<S> {
    fn new(rng: &mut ChaCha8Rng, c: usize) -> Self {
        let ch = branch_channels(c);
        let strides = [1usize, 2, 1, 2, 2];
        let mut convs = Vec::new();
        let mut cin = 3;
        for (cout, s) in ch.iter().zip(strides) {
            convs.push(Conv2d::new(rng, cin, *cout, 3, s));
            cin = *cout;
        }
        // decoder: nearest ×2 then a size-preserving 4×4 conv, three times,
        // each followed by a 3×3 conv merging the matching skip connection
        let up_out = [ch[3], ch[2], ch[0]];
        let mut ups = Vec::new();
        let mut merges = Vec::new();
        let mut cur = ch[4];
        for cout in up_out {
            ups.push(Conv2d::with_pads(rng, cur, cout, 4, 1, 1, 2));
            merges.push(Conv2d::new(rng, cout * 2, cout, 3, 1));
            cur = cout;
        }
        ScBranch { convs, ups, merges }
    }

    // visit order must mirror bind order exactly (convs, ups, merges)
    fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{name}.conv{i}"), f);
        }
        for (i, u) in self.ups.iter().enumerate() {
            u.visit(&format!("{name}.up{i}"), f);
        }
        for (i, m) in self.merges.iter().enumerate() {
            m.visit(&format!("{name}.merge{i}"), f);
        }
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{name}.conv{i}"), f);
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.visit_mut(&format!("{name}.up{i}"), f);
        }
        for (i, m) in self.merges.iter_mut().enumerate() {
            m.visit_mut(&format!("{name}.merge{i}"), f);
        }
    }

    fn bind(&self, b: &mut Binder<S>) -> BoundScBranch {
        BoundScBranch {
            convs: self.convs.iter().map(|c| c.bind(b)).collect(),
            ups: self.ups.iter().map(|u| u.bind(b)).collect(),
            merges: self.merges.iter().map(|m| m.bind(b)).collect(),
        }
    }
}

pub struct BoundScBranch {
    convs: Vec<BoundConv2d>,
    ups: Vec<BoundConv2d>,
    merges: Vec<BoundConv2d>,
}

/// Branch outputs: the full-resolution feature plus the 1/8, 1/4, 1/2
/// resolution context features.
pub struct ScOutputs {
    pub feature: NodeId,
    pub c1: NodeId,
    pub c2: NodeId,
    pub c3: NodeId,
}

impl BoundScBranch {
    pub fn extract<S: Scalar>(&self, t: &mut Tape<S>, image: NodeId) -> ScOutputs {
        let mut x = image;
        let mut taps = Vec::new(); // conv outputs at indices 0, 2, 3 feed skips
        for (i, c) in self.convs.iter().enumerate() {
            x = c.apply(t, x);
            x = lrelu(t, x);
            if i == 0 || i == 2 || i == 3 {
                taps.push(x);
            }
        }
        let c1 = x; // bottom feature at 1/8 resolution
        let mut features = Vec::new();
        for (i, (up, merge)) in self.ups.iter().zip(&self.merges).enumerate() {
            x = t.upsample2x(x);
            x = up.apply(t, x);
            x = lrelu(t, x);
            let skip = taps[taps.len() - 1 - i];
            let cat = t.concat(&[skip, x], 0);
            x = merge.apply(t, cat);
            x = lrelu(t, x);
            features.push(x);
        }
        ScOutputs {
            feature: features[2],
            c1,
            c2: features[0],
            c3: features[1],
        }
    }
}

/// The full prediction network (branches + 3D hourglass + projection).
pub struct Dipn<S: Scalar> {
    pub variant: Variant,
    branch_i: Option<ScBranch<S>>,
    branch_r: Option<ScBranch<S>>,
    down: Vec<Conv3d<S>>,
    lifts: Vec<Conv3d<S>>,
    atts: Vec<Conv3d<S>>,
    ups: Vec<ConvT3d<S>>,
    final_conv: Conv2d<S>,
}

impl<S: Scalar> Dipn<S> {
    pub fn new(cfg: &ModelConfig, variant: Variant, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let with_sc = variant != Variant::NoSc;
        let (branch_i, branch_r) = if with_sc {
            (
                Some(ScBranch::new(&mut rng, cfg.branch_channels)),
                Some(ScBranch::new(&mut rng, cfg.branch_channels)),
            )
        } else {
            (None, None)
        };
        // With branches, the volume has depth 2C and every 3D axis strides by
        // 2; without them the depth-6 RGB stack keeps its depth (stride 1).
        let (down_geom, up_geom, down_k, up_k) = if with_sc {
            (
                ConvGeom::isotropic(2, 1),
                ConvGeom::isotropic(2, 1),
                [3usize, 3, 3],
                [4usize, 4, 4],
            )
        } else {
            (
                ConvGeom {
                    stride: [1, 2, 2],
                    pad_lo: [1; 3],
                    pad_hi: [1; 3],
                },
                ConvGeom {
                    stride: [1, 2, 2],
                    pad_lo: [1; 3],
                    pad_hi: [1; 3],
                },
                [3, 3, 3],
                [3, 4, 4],
            )
        };
        let mut down = Vec::new();
        for i in 0..3 {
            down.push(Conv3d::new(
                &mut rng,
                DOWN_CHANNELS[i],
                DOWN_CHANNELS[i + 1],
                down_k,
                down_geom,
            ));
        }
        let (lifts, atts) = if with_sc {
            let stage_ch = [32usize, 16, 8];
            (
                stage_ch
                    .iter()
                    .map(|c| Conv3d::new(&mut rng, 1, *c, [1, 1, 1], ConvGeom::isotropic(1, 0)))
                    .collect(),
                stage_ch
                    .iter()
                    .map(|c| Conv3d::new(&mut rng, *c, *c, [5, 5, 5], ConvGeom::isotropic(1, 2)))
                    .collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let mut ups = Vec::new();
        for i in 0..3 {
            ups.push(ConvT3d::new(
                &mut rng,
                DOWN_CHANNELS[3 - i],
                DOWN_CHANNELS[2 - i],
                up_k,
                up_geom,
            ));
        }
        let final_in = if with_sc { 2 * cfg.branch_channels } else { 6 };
        let final_conv = Conv2d::new(&mut rng, final_in, 3, 3, 1);
        Dipn {
            variant,
            branch_i,
            branch_r,
            down,
            lifts,
            atts,
            ups,
            final_conv,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        if let Some(b) = &self.branch_i {
            b.visit("dipn.branch_i", f);
        }
        if let Some(b) = &self.branch_r {
            b.visit("dipn.branch_r", f);
        }
        for (i, c) in self.down.iter().enumerate() {
            c.visit(&format!("dipn.down{i}"), f);
        }
        for (i, c) in self.lifts.iter().enumerate() {
            c.visit(&format!("dipn.lift{i}"), f);
        }
        for (i, c) in self.atts.iter().enumerate() {
            c.visit(&format!("dipn.att{i}"), f);
        }
        for (i, c) in self.ups.iter().enumerate() {
            c.visit(&format!("dipn.up{i}"), f);
        }
        self.final_conv.visit("dipn.final", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        if let Some(b) = &mut self.branch_i {
            b.visit_mut("dipn.branch_i", f);
        }
        if let Some(b) = &mut self.branch_r {
            b.visit_mut("dipn.branch_r", f);
        }
        for (i, c) in self.down.iter_mut().enumerate() {
            c.visit_mut(&format!("dipn.down{i}"), f);
        }
        for (i, c) in self.lifts.iter_mut().enumerate() {
            c.visit_mut(&format!("dipn.lift{i}"), f);
        }
        for (i, c) in self.atts.iter_mut().enumerate() {
            c.visit_mut(&format!("dipn.att{i}"), f);
        }
        for (i, c) in self.ups.iter_mut().enumerate() {
            c.visit_mut(&format!("dipn.up{i}"), f);
        }
        self.final_conv.visit_mut("dipn.final", f);
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundDipn {
        BoundDipn {
            variant: self.variant,
            branch_i: self.branch_i.as_ref().map(|br| br.bind(b)),
            branch_r: self.branch_r.as_ref().map(|br| br.bind(b)),
            down: self.down.iter().map(|c| c.bind(b)).collect(),
            lifts: self.lifts.iter().map(|c| c.bind(b)).collect(),
            atts: self.atts.iter().map(|c| c.bind(b)).collect(),
            ups: self.ups.iter().map(|c| c.bind(b)).collect(),
            final_conv: self.final_conv.bind(b),
        }
    }

    /// Array-level discrepancy prediction (inference convenience).
    pub fn predict_arrays(&self, i: &Image<S>, r: &Image<S>) -> Result<ArrayD<S>> {
        check_pair(i, r)?;
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, false);
        let bound = self.bind(&mut b);
        let ii = t.constant(i.0.clone());
        let ri = t.constant(r.0.clone());
        let tr = bound.forward_trace(&mut t, ii, ri);
        Ok(t.value(tr.d).clone())
    }

    /// Array-level branch features of the original-image branch.
    pub fn extract_sc_arrays(
        &self,
        image: &Image<S>,
    ) -> Result<(ArrayD<S>, [ArrayD<S>; 3])> {
        let branch = self
            .branch_i
            .as_ref()
            .ok_or_else(|| Error::Config("variant has no spatial-contextual branch".into()))?;
        if image.side() % 8 != 0 {
            return Err(shape_err("branch input", "side divisible by 8", image.0.shape()));
        }
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, false);
        let bound = branch.bind(&mut b);
        let ii = t.constant(image.0.clone());
        let out = bound.extract(&mut t, ii);
        Ok((
            t.value(out.feature).clone(),
            [
                t.value(out.c1).clone(),
                t.value(out.c2).clone(),
                t.value(out.c3).clone(),
            ],
        ))
    }
}

fn check_pair<S: Scalar>(i: &Image<S>, r: &Image<S>) -> Result<()> {
    if i.0.shape() != r.0.shape() {
        return Err(shape_err("image pair", i.0.shape(), r.0.shape()));
    }
    if i.side() % 8 != 0 {
        return Err(shape_err("image pair", "side divisible by 8", i.0.shape()));
    }
    Ok(())
}

/// Gated additive fusion of a lifted context feature into a volume feature.
pub fn attention_fuse<S: Scalar>(
    t: &mut Tape<S>,
    w: NodeId,
    c_hat: NodeId,
    g: NodeId,
) -> NodeId {
    let gated = t.mul(w, c_hat);
    t.add(gated, g)
}

/// Array-level fusion with shape checking (for direct use in tests/tools).
pub fn attention_fuse_arrays<S: Scalar>(
    w: &ArrayD<S>,
    c_hat: &ArrayD<S>,
    g: &ArrayD<S>,
) -> Result<ArrayD<S>> {
    if w.shape() != c_hat.shape() || w.shape() != g.shape() {
        return Err(shape_err("attention_fuse", w.shape(), c_hat.shape()));
    }
    Ok(w * c_hat + g)
}

/// Intermediate nodes of one prediction forward, for tests and dumps.
pub struct DipnTrace {
    pub d: NodeId,
    pub sc_i: Option<ScOutputs>,
    pub sc_r: Option<ScOutputs>,
    /// Attention weight volumes per fusion stage (empty without branches).
    pub attn: Vec<NodeId>,
    /// Lifted context volumes per fusion stage.
    pub lifted: Vec<NodeId>,
    /// Volume features G_1..G_4 (after each stage transition).
    pub volumes: Vec<NodeId>,
}

pub struct BoundDipn {
    pub variant: Variant,
    branch_i: Option<BoundScBranch>,
    branch_r: Option<BoundScBranch>,
    down: Vec<BoundConv3d>,
    lifts: Vec<BoundConv3d>,
    atts: Vec<BoundConv3d>,
    ups: Vec<BoundConvT3d>,
    final_conv: BoundConv2d,
}

impl BoundDipn {
    /// Predict the discrepancy map for (original, initial reconstruction).
    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, i: NodeId, r: NodeId) -> NodeId {
        self.forward_trace(t, i, r).d
    }

    pub fn forward_trace<S: Scalar>(&self, t: &mut Tape<S>, i: NodeId, r: NodeId) -> DipnTrace {
        let ishape = t.value(i).shape().to_vec();
        assert_eq!(ishape.len(), 3, "dipn expects (3,H,W) inputs");
        let (h, w) = (ishape[1], ishape[2]);
        let (volume, sc_i, sc_r) = match (&self.branch_i, &self.branch_r) {
            (Some(bi), Some(br)) => {
                let oi = bi.extract(t, i);
                let or = br.extract(t, r);
                let cat = t.concat(&[oi.feature, or.feature], 0);
                let depth = t.value(cat).shape()[0];
                let vol = t.reshape(cat, &[1, depth, h, w]);
                (vol, Some(oi), Some(or))
            }
            _ => {
                let cat = t.concat(&[i, r], 0);
                let vol = t.reshape(cat, &[1, 6, h, w]);
                (vol, None, None)
            }
        };
        let mut g = volume;
        for c in &self.down {
            g = c.apply(t, g);
            g = lrelu(t, g);
        }
        let mut volumes = vec![g];
        let mut attn = Vec::new();
        let mut lifted = Vec::new();
        for stage in 0..3 {
            if let Some(sc) = &sc_i {
                let ctx = [sc.c1, sc.c2, sc.c3][stage];
                let cs = t.value(ctx).shape().to_vec();
                let gdims = t.value(g).shape().to_vec();
                let ctx_vol = t.reshape(ctx, &[1, cs[0], cs[1], cs[2]]);
                let resized = t.resize_nearest(ctx_vol, [gdims[1], gdims[2], gdims[3]]);
                let mut c_hat = self.lifts[stage].apply(t, resized);
                c_hat = lrelu(t, c_hat);
                let sum = t.add(g, c_hat);
                let pre = self.atts[stage].apply(t, sum);
                let wgt = t.sigmoid(pre);
                attn.push(wgt);
                lifted.push(c_hat);
                g = attention_fuse(t, wgt, c_hat, g);
            }
            g = self.ups[stage].apply(t, g);
            g = lrelu(t, g);
            volumes.push(g);
        }
        let gdims = t.value(g).shape().to_vec();
        debug_assert_eq!(gdims[0], 1);
        let flat = t.reshape(g, &[gdims[1], gdims[2], gdims[3]]);
        let d = self.final_conv.apply(t, flat);
        DipnTrace {
            d,
            sc_i,
            sc_r,
            attn,
            lifted,
            volumes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use ndarray::IxDyn;

    fn image(seed: u64, side: usize) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        Image::new(ArrayD::from_shape_simple_fn(IxDyn(&[3, side, side]), || {
            rng.gen_range(-1.0..1.0)
        }))
        .unwrap()
    }

    #[test]
    fn branch_shapes_toy() {
        let cfg = RunConfig::default().model;
        let net: Dipn<f64> = Dipn::new(&cfg, Variant::Full, 5);
        let (feat, [c1, c2, c3]) = net.extract_sc_arrays(&image(1, 64)).unwrap();
        assert_eq!(feat.shape(), &[16, 64, 64]);
        assert_eq!(c1.shape(), &[64, 8, 8]);
        assert_eq!(c2.shape(), &[48, 16, 16]);
        assert_eq!(c3.shape(), &[32, 32, 32]);
    }

    #[test]
    fn branches_deterministic_but_distinct() {
        let cfg = RunConfig::default().model;
        let net: Dipn<f64> = Dipn::new(&cfg, Variant::Full, 5);
        let img = image(2, 64);
        let (f1, _) = net.extract_sc_arrays(&img).unwrap();
        let (f2, _) = net.extract_sc_arrays(&img).unwrap();
        assert_eq!(f1, f2);
        // the reconstruction branch has different weights: running the same
        // image through the full pair gives different branch features
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, false);
        let bound = net.bind(&mut b);
        let ii = t.constant(img.0.clone());
        let tr = bound.forward_trace(&mut t, ii, ii);
        let fi = t.value(tr.sc_i.as_ref().unwrap().feature).clone();
        let fr = t.value(tr.sc_r.as_ref().unwrap().feature).clone();
        assert_ne!(fi, fr);
    }

    #[test]
    fn zero_image_zero_biases_gives_zero_features() {
        let cfg = RunConfig::default().model;
        let net: Dipn<f64> = Dipn::new(&cfg, Variant::Full, 5);
        let zero = Image::new(ArrayD::zeros(IxDyn(&[3, 64, 64]))).unwrap();
        let (feat, [c1, c2, c3]) = net.extract_sc_arrays(&zero).unwrap();
        for a in [&feat, &c1, &c2, &c3] {
            assert!(a.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn discrepancy_shapes_and_volume_ladder() {
        let cfg = RunConfig::default().model;
        let net: Dipn<f64> = Dipn::new(&cfg, Variant::Full, 5);
        let (i, r) = (image(3, 64), image(4, 64));
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, false);
        let bound = net.bind(&mut b);
        let ii = t.constant(i.0.clone());
        let ri = t.constant(r.0.clone());
        let tr = bound.forward_trace(&mut t, ii, ri);
        assert_eq!(t.value(tr.d).shape(), &[3, 64, 64]);
        assert_eq!(t.value(tr.volumes[0]).shape(), &[32, 4, 8, 8]);
        assert_eq!(t.value(tr.volumes[1]).shape(), &[16, 8, 16, 16]);
        assert_eq!(t.value(tr.volumes[2]).shape(), &[8, 16, 32, 32]);
        assert_eq!(t.value(tr.volumes[3]).shape(), &[1, 32, 64, 64]);
        // attention weights strictly inside (0,1)
        for wid in &tr.attn {
            assert!(t.value(*wid).iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn context_depends_only_on_original_branch() {
        let cfg = RunConfig::reduced().model;
        let net: Dipn<f64> = Dipn::new(&cfg, Variant::Full, 6);
        let i = image(7, 16);
        let (r1, r2) = (image(8, 16), image(9, 16));
        let run = |r: &Image<f64>| {
            let mut t = Tape::new();
            let mut b = Binder::new(&mut t, false);
            let bound = net.bind(&mut b);
            let ii = t.constant(i.0.clone());
            let ri = t.constant(r.0.clone());
            let tr = bound.forward_trace(&mut t, ii, ri);
            let lifted: Vec<ArrayD<f64>> = tr.lifted.iter().map(|n| t.value(*n).clone()).collect();
            let vols: Vec<ArrayD<f64>> = tr.volumes.iter().map(|n| t.value(*n).clone()).collect();
            (lifted, vols)
        };
        let (l1, v1) = run(&r1);
        let (l2, v2) = run(&r2);
        for (a, b) in l1.iter().zip(&l2) {
            assert_eq!(a, b, "lifted context must ignore the reconstruction");
        }
        assert_ne!(v1[0], v2[0], "volume features must see the reconstruction");
    }

    #[test]
    fn fusion_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        use rand::Rng;
        let shape = IxDyn(&[2, 3, 4, 4]);
        let c = ArrayD::from_shape_simple_fn(shape.clone(), || rng.gen_range(-1.0..1.0));
        let g = ArrayD::from_shape_simple_fn(shape.clone(), || rng.gen_range(-1.0..1.0));
        let zeros = ArrayD::zeros(shape.clone());
        let ones = ArrayD::from_elem(shape.clone(), 1.0);
        assert_eq!(attention_fuse_arrays(&zeros, &c, &g).unwrap(), g);
        assert_eq!(attention_fuse_arrays(&ones, &c, &g).unwrap(), &c + &g);
        let half = ArrayD::from_elem(IxDyn(&[1]), 0.5);
        let two = ArrayD::from_elem(IxDyn(&[1]), 2.0);
        let one = ArrayD::from_elem(IxDyn(&[1]), 1.0);
        let out = attention_fuse_arrays(&half, &two, &one).unwrap();
        assert_eq!(out[[0]], 2.0);
        assert!(attention_fuse_arrays(&half, &c, &g).is_err());
    }

    #[test]
    fn no_sc_variant_shapes() {
        let cfg = RunConfig::default().model;
        let net: Dipn<f64> = Dipn::new(&cfg, Variant::NoSc, 5);
        let d = net.predict_arrays(&image(11, 64), &image(12, 64)).unwrap();
        assert_eq!(d.shape(), &[3, 64, 64]);
        assert!(net.extract_sc_arrays(&image(11, 64)).is_err());
    }

    #[test]
    fn reduced_config_shapes() {
        let cfg = RunConfig::reduced().model;
        let net: Dipn<f64> = Dipn::new(&cfg, Variant::Full, 5);
        let d = net.predict_arrays(&image(13, 16), &image(14, 16)).unwrap();
        assert_eq!(d.shape(), &[3, 16, 16]);
    }

    #[test]
    fn pair_shape_mismatch_rejected() {
        let cfg = RunConfig::default().model;
        let net: Dipn<f64> = Dipn::new(&cfg, Variant::Full, 5);
        assert!(net.predict_arrays(&image(1, 64), &image(2, 32)).is_err());
    }
}
