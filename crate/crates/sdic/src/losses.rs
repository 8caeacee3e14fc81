//! Training losses: reconstruction, editability, and their weighted joint.
//!
//! The reconstruction loss combines a pixel term with two feature-space terms
//! computed by a frozen random-seed convolutional extractor (a deterministic,
//! dependency-free stand-in for perceptual/identity networks — explicitly not
//! LPIPS or a face model):
//!
//! ```text
//! L_rec  = L2(I, R_f) + λ_lpips · perceptual(I, R_f) + λ_id · (1 − cos(I, R_f))
//! L_edit = L1(w, w_enh) + L1(F, F_enh)
//! L_joint = L_rec + λ_edit · L_edit
//! ```
//!
//! All reductions are means, so magnitudes are resolution-invariant and the
//! default weights stay meaningful across configurations.

use crate::config::LossConfig;
use crate::imageio::Image;
use crate::nn::{lrelu, Binder, BoundConv2d, Conv2d};
use crate::{shape_err, Error, Result};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tapegrad::{NodeId, Scalar, Tape};

const FEATURE_CHANNELS: [usize; 4] = [8, 16, 24, 32];
const NORM_EPS: f64 = 1e-8;
/// Much smaller guard for the embedding norm, so the cosine of an image with
/// itself is exactly 1 at f64 precision (the array-level entry points reject
/// genuinely zero-norm embeddings before this matters).
const EMB_EPS: f64 = 1e-30;

/// Frozen random feature extractor: four stride-2 3×3 conv blocks; the first
/// three feed channel-normalized perceptual taps, the fourth a pooled
/// unit-norm embedding.
pub struct FeatureNet<S: Scalar> {
    convs: Vec<Conv2d<S>>,
}

impl<S: Scalar> FeatureNet<S> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut cin = 3;
        for cout in FEATURE_CHANNELS {
            convs.push(Conv2d::new(&mut rng, cin, cout, 3, 2));
            cin = cout;
        }
        FeatureNet { convs }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("feat.conv{i}"), f);
        }
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundFeatureNet {
        BoundFeatureNet {
            convs: self.convs.iter().map(|c| c.bind(b)).collect(),
        }
    }

    /// Raw (pre-normalization) tap activations, for oracle recomputation.
    pub fn raw_taps_arrays(&self, image: &Image<S>) -> Vec<ArrayD<S>> {
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, false);
        let bound = self.bind(&mut b);
        let ii = t.constant(image.0.clone());
        let (taps, emb_in) = bound.raw_taps(&mut t, ii);
        let mut out: Vec<ArrayD<S>> = taps.iter().map(|id| t.value(*id).clone()).collect();
        out.push(t.value(emb_in).clone());
        out
    }
}

pub struct BoundFeatureNet {
    convs: Vec<BoundConv2d>,
}

impl BoundFeatureNet {
    /// Returns the three perceptual tap activations and the final block
    /// output feeding the embedding.
    fn raw_taps<S: Scalar>(&self, t: &mut Tape<S>, image: NodeId) -> (Vec<NodeId>, NodeId) {
        let mut x = image;
        let mut taps = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            x = c.apply(t, x);
            x = lrelu(t, x);
            if i < 3 {
                taps.push(x);
            }
        }
        (taps, x)
    }

    /// Channel-unit-normalized perceptual features at three depths.
    pub fn normalized_taps<S: Scalar>(&self, t: &mut Tape<S>, image: NodeId) -> Vec<NodeId> {
        let (taps, _) = self.raw_taps(t, image);
        taps.into_iter()
            .map(|id| t.l2_normalize_axis0(id, S::lit(NORM_EPS)))
            .collect()
    }

    /// Unit-norm pooled embedding.
    pub fn embedding<S: Scalar>(&self, t: &mut Tape<S>, image: NodeId) -> NodeId {
        let (_, last) = self.raw_taps(t, image);
        let pooled = t.mean_per_channel(last);
        t.l2_normalize_axis0(pooled, S::lit(EMB_EPS))
    }
}

/// Mean over taps of the mean-squared difference of normalized features.
pub fn perceptual_on_tape<S: Scalar>(
    t: &mut Tape<S>,
    net: &BoundFeatureNet,
    a: NodeId,
    b: NodeId,
) -> NodeId {
    let ta = net.normalized_taps(t, a);
    let tb = net.normalized_taps(t, b);
    let mut acc: Option<NodeId> = None;
    for (x, y) in ta.iter().zip(&tb) {
        let m = t.mse(*x, *y);
        acc = Some(match acc {
            Some(prev) => t.add(prev, m),
            None => m,
        });
    }
    t.scale(acc.unwrap(), S::lit(1.0 / ta.len() as f64))
}

/// 1 − cosine similarity of the pooled embeddings.
pub fn id_on_tape<S: Scalar>(
    t: &mut Tape<S>,
    net: &BoundFeatureNet,
    a: NodeId,
    b: NodeId,
) -> NodeId {
    let ea = net.embedding(t, a);
    let eb = net.embedding(t, b);
    let cos = t.dot_vec(ea, eb);
    let neg = t.scale(cos, S::lit(-1.0));
    t.add_scalar(neg, S::one())
}

/// All scalar loss components of one sample, as f64 for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub l2: f64,
    pub lpips_proxy: f64,
    pub id: f64,
    pub rec: f64,
    pub edit_w: f64,
    pub edit_f: f64,
    pub edit: f64,
    pub joint: f64,
}

/// The same components as graph nodes (joint is the backward root).
pub struct LossNodes {
    pub l2: NodeId,
    pub lpips_proxy: NodeId,
    pub id: NodeId,
    pub rec: NodeId,
    pub edit_w: NodeId,
    pub edit_f: NodeId,
    pub joint: NodeId,
}

impl LossNodes {
    pub fn breakdown<S: Scalar>(&self, t: &Tape<S>) -> LossBreakdown {
        let edit_w = t.scalar_value(self.edit_w).to_f64_lossy();
        let edit_f = t.scalar_value(self.edit_f).to_f64_lossy();
        LossBreakdown {
            l2: t.scalar_value(self.l2).to_f64_lossy(),
            lpips_proxy: t.scalar_value(self.lpips_proxy).to_f64_lossy(),
            id: t.scalar_value(self.id).to_f64_lossy(),
            rec: t.scalar_value(self.rec).to_f64_lossy(),
            edit_w,
            edit_f,
            edit: edit_w + edit_f,
            joint: t.scalar_value(self.joint).to_f64_lossy(),
        }
    }
}

/// Build the joint loss graph for one sample.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_on_tape<S: Scalar>(
    t: &mut Tape<S>,
    net: &BoundFeatureNet,
    weights: &LossConfig,
    i: NodeId,
    r_f: NodeId,
    w: NodeId,
    w_enh: NodeId,
    f: NodeId,
    f_enh: NodeId,
) -> LossNodes {
    let l2 = t.mse(i, r_f);
    let lpips = perceptual_on_tape(t, net, i, r_f);
    let id = id_on_tape(t, net, i, r_f);
    let wl = t.scale(lpips, S::lit(weights.lambda_lpips));
    let wi = t.scale(id, S::lit(weights.lambda_id));
    let s = t.add(l2, wl);
    let rec = t.add(s, wi);
    let edit_w = mean_abs_diff_recorded(t, w, w_enh);
    let edit_f = mean_abs_diff_recorded(t, f, f_enh);
    let edit = t.add(edit_w, edit_f);
    let we = t.scale(edit, S::lit(weights.lambda_edit));
    let joint = t.add(rec, we);
    LossNodes {
        l2,
        lpips_proxy: lpips,
        id,
        rec,
        edit_w,
        edit_f,
        joint,
    }
}

/// Mean absolute difference, reporting the sign of each element-wise
/// difference to the kink recorder: the absolute value is only piecewise
/// smooth, and the gradient check must reject finite-difference intervals in
/// which any difference crosses zero.
fn mean_abs_diff_recorded<S: Scalar>(t: &mut Tape<S>, a: NodeId, b: NodeId) -> NodeId {
    if crate::nn::kink_signs_active() {
        let bits: Vec<bool> = t
            .value(a)
            .iter()
            .zip(t.value(b).iter())
            .map(|(&x, &y)| (x - y).to_f64_lossy() >= 0.0)
            .collect();
        crate::nn::record_kink_signs(bits.into_iter());
    }
    t.mean_abs_diff(a, b)
}

fn check_same<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<()> {
    if a.0.shape() != b.0.shape() {
        return Err(shape_err("image pair", a.0.shape(), b.0.shape()));
    }
    Ok(())
}

/// Array-level perceptual distance.
pub fn perceptual_distance<S: Scalar>(a: &Image<S>, b: &Image<S>, net: &FeatureNet<S>) -> Result<f64> {
    check_same(a, b)?;
    let mut t = Tape::new();
    let mut bd = Binder::new(&mut t, false);
    let bound = net.bind(&mut bd);
    let ai = t.constant(a.0.clone());
    let bi = t.constant(b.0.clone());
    let p = perceptual_on_tape(&mut t, &bound, ai, bi);
    Ok(t.scalar_value(p).to_f64_lossy())
}

/// Array-level identity loss; flags embeddings with (near-)zero norm.
pub fn id_loss<S: Scalar>(a: &Image<S>, b: &Image<S>, net: &FeatureNet<S>) -> Result<f64> {
    check_same(a, b)?;
    for (name, img) in [("a", a), ("b", b)] {
        let raw = net.raw_taps_arrays(img);
        let last = raw.last().unwrap();
        let c = last.shape()[0];
        let inner = last.len() / c;
        let norm2: f64 = (0..c)
            .map(|ci| {
                let m: f64 = last
                    .index_axis(ndarray::Axis(0), ci)
                    .iter()
                    .map(|v| v.to_f64_lossy())
                    .sum::<f64>()
                    / inner as f64;
                m * m
            })
            .sum();
        if norm2.sqrt() < NORM_EPS {
            return Err(Error::Numerical(format!("zero-norm embedding for image {name}")));
        }
    }
    let mut t = Tape::new();
    let mut bd = Binder::new(&mut t, false);
    let bound = net.bind(&mut bd);
    let ai = t.constant(a.0.clone());
    let bi = t.constant(b.0.clone());
    let idn = id_on_tape(&mut t, &bound, ai, bi);
    Ok(t.scalar_value(idn).to_f64_lossy())
}

/// Array-level reconstruction loss (edit terms zero).
pub fn rec_loss<S: Scalar>(
    i: &Image<S>,
    r_f: &Image<S>,
    net: &FeatureNet<S>,
    weights: &LossConfig,
) -> Result<LossBreakdown> {
    check_same(i, r_f)?;
    let l2 = i
        .0
        .iter()
        .zip(r_f.0.iter())
        .map(|(a, b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / i.0.len() as f64;
    let lpips = perceptual_distance(i, r_f, net)?;
    let id = id_loss(i, r_f, net)?;
    let rec = l2 + weights.lambda_lpips * lpips + weights.lambda_id * id;
    Ok(LossBreakdown {
        l2,
        lpips_proxy: lpips,
        id,
        rec,
        edit_w: 0.0,
        edit_f: 0.0,
        edit: 0.0,
        joint: rec,
    })
}
