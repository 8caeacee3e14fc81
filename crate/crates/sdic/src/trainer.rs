//! Two-stage training and gradient verification.
//!
//! Stage 1 pretrains the inversion encoder on overlay-free samples by
//! minimizing `mse(G(E(I)), I)` through the frozen generator. Stage 2 freezes
//! the encoder too and trains the prediction and compensation networks under
//! the joint loss
//!
//! ```text
//! L_joint = L_rec + λ_edit · (L1(w, w_enh) + L1(F, F_enh))
//! ```
//!
//! averaged over a batch, with the generator, encoder, and loss feature
//! extractor held constant on the tape so no gradients flow into them.
//! Optimization uses an adaptive-moment optimizer with decoupled weight decay
//! (β₁ = 0.9, β₂ = 0.999, ε = 1e−8); a lookahead wrapper would add optimizer
//! state without changing anything observable at this scale, so it is omitted.
//!
//! The gradient checker compares every analytic gradient of the joint loss
//! against central finite differences on a reduced 64-bit configuration.

use crate::checkpoint;
use crate::config::{LossConfig, RunConfig, Variant};
use crate::dataset::{cache_samples, sample_seed, CachedSample, SampleSet};
use crate::dicn::SdicModels;
use crate::losses::{joint_loss_on_tape, FeatureNet, LossBreakdown};
use crate::nn::Binder;
use crate::toygen::{Encoder, Generator};
use crate::{Error, Result};
use ndarray::ArrayD;
use tapegrad::{Grads, NodeId, Scalar, Tape};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;
/// Batch-order scrambling uses its own seed stream id (train/held-out splits
/// use 1 and 2).
const SPLIT_BATCH_ORDER: u64 = 3;

/// Adaptive-moment optimizer with decoupled weight decay. Moment buffers are
/// aligned with the parameter visit order, which by construction equals the
/// tape bind order.
pub struct Adam<S: Scalar> {
    lr: f64,
    weight_decay: f64,
    t: usize,
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. `grads[i]` must correspond to the i-th parameter the
    /// `visit_mut` closure enumerates.
    pub fn step(
        &mut self,
        grads: &[ArrayD<S>],
        visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut ArrayD<S>)),
    ) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
            self.v = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        assert_eq!(self.m.len(), grads.len(), "optimizer/parameter mismatch");
        self.t += 1;
        let c1 = S::lit(1.0 / (1.0 - BETA1.powi(self.t as i32)));
        let c2 = S::lit(1.0 / (1.0 - BETA2.powi(self.t as i32)));
        let (b1, b2) = (S::lit(BETA1), S::lit(BETA2));
        let (nb1, nb2) = (S::lit(1.0 - BETA1), S::lit(1.0 - BETA2));
        let lr = S::lit(self.lr);
        let wd = S::lit(self.weight_decay);
        let eps = S::lit(EPS);
        let mut i = 0usize;
        let m = &mut self.m;
        let v = &mut self.v;
        visit_mut(&mut |_, p| {
            let g = &grads[i];
            assert_eq!(g.shape(), p.shape(), "gradient/parameter shape mismatch");
            ndarray::Zip::from(p)
                .and(&mut m[i])
                .and(&mut v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + nb1 * g;
                    *v = b2 * *v + nb2 * g * g;
                    let mhat = *m * c1;
                    let vhat = *v * c2;
                    *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
            i += 1;
        });
        assert_eq!(i, grads.len(), "optimizer/parameter mismatch");
    }
}

/// Gradients for a list of bound leaves, zeros where a leaf is unused.
fn leaf_grads<S: Scalar>(t: &Tape<S>, ids: &[NodeId], grads: &Grads<S>) -> Vec<ArrayD<S>> {
    ids.iter()
        .map(|id| match grads.get(*id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(t.value(*id).raw_dim()),
        })
        .collect()
}

fn ensure_finite(step: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            step,
            what: what.to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Stage 1: encoder pretraining
// ---------------------------------------------------------------------------

/// Train the encoder against the frozen generator on overlay-free samples.
/// Returns the per-step loss curve.
pub fn pretrain_encoder<S: Scalar>(
    cfg: &RunConfig,
    gen: &Generator<S>,
    enc: &mut Encoder<S>,
) -> Result<Vec<f64>> {
    let frozen = checkpoint::checksum::<S>(|f| gen.visit(f));
    let mut set = SampleSet::train(&cfg.data);
    set.overlay = false;
    let images: Vec<_> = (0..set.len())
        .map(|i| set.materialize(gen, i).map(|(img, _)| img))
        .collect::<Result<_>>()?;
    let bs = cfg.train.batch_size;
    let mut opt = Adam::new(cfg.train.pretrain_lr, cfg.train.weight_decay);
    let mut curve = Vec::with_capacity(cfg.train.pretrain_steps);
    for step in 0..cfg.train.pretrain_steps {
        let mut t = Tape::new();
        let mut frozen_b = Binder::new(&mut t, false);
        let gen_b = gen.bind(&mut frozen_b);
        let mut train_b = Binder::new(&mut t, true);
        let enc_b = enc.bind(&mut train_b);
        let ids = std::mem::take(&mut train_b.ids);
        let mut total: Option<NodeId> = None;
        for i in 0..bs {
            let idx = (step * bs + i) % images.len();
            let img = t.constant(images[idx].0.clone());
            let w = enc_b.encode(&mut t, img);
            let (r, _) = gen_b.synthesize(&mut t, w, None);
            let l = t.mse(img, r);
            total = Some(match total {
                Some(acc) => t.add(acc, l),
                None => l,
            });
        }
        let loss = t.scale(total.unwrap(), S::lit(1.0 / bs as f64));
        let value = ensure_finite(step, "pretrain loss", t.scalar_value(loss).to_f64_lossy())?;
        curve.push(value);
        let grads = t.backward(loss);
        let grads = leaf_grads(&t, &ids, &grads);
        opt.step(&grads, |f| enc.visit_mut(f));
    }
    assert_eq!(
        frozen,
        checkpoint::checksum::<S>(|f| gen.visit(f)),
        "generator changed during pretraining"
    );
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Stage 2: joint training of the prediction + compensation networks
// ---------------------------------------------------------------------------

/// Loss log: `(step, batch-averaged breakdown)` rows at the configured
/// cadence.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<(usize, LossBreakdown)>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,l2,lpips_proxy,id,rec,edit_w,edit_f,joint";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (step, b) in &self.rows {
            out.push_str(&format!(
                "{step},{},{},{},{},{},{},{}\n",
                b.l2, b.lpips_proxy, b.id, b.rec, b.edit_w, b.edit_f, b.joint
            ));
        }
        out
    }
}

fn average_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let mut out = LossBreakdown::default();
    for b in items {
        out.l2 += b.l2 / n;
        out.lpips_proxy += b.lpips_proxy / n;
        out.id += b.id / n;
        out.rec += b.rec / n;
        out.edit_w += b.edit_w / n;
        out.edit_f += b.edit_f / n;
        out.edit += b.edit / n;
        out.joint += b.joint / n;
    }
    out
}

/// Build the full forward + joint loss for one batch on `t`. The trainable
/// networks must already be bound; frozen networks are bound as constants.
/// Returns the batch-mean joint loss node and the averaged breakdown.
#[allow(clippy::too_many_arguments)]
fn batch_loss_graph<S: Scalar>(
    t: &mut Tape<S>,
    gen_b: &crate::toygen::BoundGenerator,
    feat_b: &crate::losses::BoundFeatureNet,
    dipn_b: &crate::dipn::BoundDipn,
    dicn_b: &crate::dicn::BoundDicn,
    layer: usize,
    weights: &LossConfig,
    batch: &[&CachedSample<S>],
) -> (NodeId, LossBreakdown) {
    let mut total: Option<NodeId> = None;
    let mut parts = Vec::with_capacity(batch.len());
    for sample in batch {
        let img = t.constant(sample.image.0.clone());
        let w = t.constant(sample.w.clone());
        let r_o = t.constant(sample.r_o.0.clone());
        let d = dipn_b.forward(t, img, r_o);
        let (gamma, theta) = dicn_b.predict_affine(t, d);
        let scaled = t.mul(gamma, w);
        let w_enh = t.add(scaled, theta);
        let f = gen_b.synthesize_to(t, w_enh, layer);
        let f_enh = dicn_b.compensate_map(t, f, d);
        let r_f = gen_b.synthesize_from(t, w_enh, layer, f_enh);
        let nodes = joint_loss_on_tape(t, feat_b, weights, img, r_f, w, w_enh, f, f_enh);
        parts.push(nodes.breakdown(t));
        total = Some(match total {
            Some(acc) => t.add(acc, nodes.joint),
            None => nodes.joint,
        });
    }
    let mean = t.scale(total.unwrap(), S::lit(1.0 / batch.len() as f64));
    (mean, average_breakdown(&parts))
}

/// Train the prediction + compensation networks with everything else frozen.
pub fn train_sdic<S: Scalar>(
    cfg: &RunConfig,
    models: &mut SdicModels<S>,
    feat: &FeatureNet<S>,
) -> Result<TrainLog> {
    let frozen = checkpoint::checksum::<S>(|f| {
        models.generator.visit(f);
        models.encoder.visit(f);
        feat.visit(f);
    });
    let set = SampleSet::train(&cfg.data);
    let cache = cache_samples(&models.generator, &models.encoder, &set)?;
    let bs = cfg.train.batch_size;
    let layer = models.cfg.injection_layer;
    let mut opt = Adam::new(cfg.train.learning_rate, cfg.train.weight_decay);
    let mut log = TrainLog::default();
    for step in 0..cfg.train.steps {
        let batch: Vec<&CachedSample<S>> = (0..bs)
            .map(|i| {
                let k = sample_seed(cfg.train.seed, SPLIT_BATCH_ORDER, (step * bs + i) as u64);
                &cache[(k % cache.len() as u64) as usize]
            })
            .collect();
        let mut t = Tape::new();
        let mut frozen_b = Binder::new(&mut t, false);
        let gen_b = models.generator.bind(&mut frozen_b);
        let feat_b = feat.bind(&mut frozen_b);
        let mut train_b = Binder::new(&mut t, true);
        let dipn_b = models.dipn.bind(&mut train_b);
        let dicn_b = models.dicn.bind(&mut train_b);
        let ids = std::mem::take(&mut train_b.ids);
        let (loss, breakdown) = batch_loss_graph(
            &mut t,
            &gen_b,
            &feat_b,
            &dipn_b,
            &dicn_b,
            layer,
            &cfg.loss,
            &batch,
        );
        ensure_finite(step, "joint loss", breakdown.joint)?;
        if step % cfg.train.log_every == 0 || step + 1 == cfg.train.steps {
            log.rows.push((step, breakdown));
        }
        let grads = t.backward(loss);
        let grads = leaf_grads(&t, &ids, &grads);
        opt.step(&grads, |f| {
            models.dipn.visit_mut(f);
            models.dicn.visit_mut(f);
        });
    }
    assert_eq!(
        frozen,
        checkpoint::checksum::<S>(|f| {
            models.generator.visit(f);
            models.encoder.visit(f);
            feat.visit(f);
        }),
        "frozen parameters changed during training"
    );
    Ok(log)
}

/// Run both stages on fresh models and return them trained.
pub fn train_pipeline<S: Scalar>(
    cfg: &RunConfig,
    variant: Variant,
) -> Result<(SdicModels<S>, FeatureNet<S>, Vec<f64>, TrainLog)> {
    let mut models = SdicModels::new(&cfg.model, variant);
    let feat = FeatureNet::new(cfg.loss.feature_seed);
    // a second deterministic instance of the same frozen generator, so the
    // encoder can be trained without aliasing the models struct mutably
    let generator = Generator::new(&cfg.model, cfg.model.seed);
    let curve = pretrain_encoder(cfg, &generator, &mut models.encoder)?;
    let log = train_sdic(cfg, &mut models, &feat)?;
    Ok((models, feat, curve, log))
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// Worst finite-difference comparison within one parameter tensor.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Full gradient-check outcome.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub tolerance: f64,
    pub step_size: f64,
    pub groups: Vec<GroupReport>,
    pub pass: bool,
}

impl GradReport {
    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.worst_rel.total_cmp(&b.worst_rel))
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "gradient check: {} groups, tolerance {:.1e}, step {:.1e}\n",
            self.groups.len(),
            self.tolerance,
            self.step_size
        );
        for g in &self.groups {
            let status = if g.worst_rel <= self.tolerance { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{status:4} {:<28} checked {:3} worst {:.3e} (flat index {}, analytic {:.6e}, numeric {:.6e})\n",
                g.name, g.checked, g.worst_rel, g.worst_flat_index, g.analytic, g.numeric
            ));
        }
        match self.worst() {
            Some(w) => out.push_str(&format!(
                "worst overall: {} ({:.3e}) -> {}\n",
                w.name,
                w.worst_rel,
                if self.pass { "PASS" } else { "FAIL" }
            )),
            None => out.push_str("no trainable parameters\n"),
        }
        out
    }
}

/// Internal fixture: how to corrupt the analytic gradients before comparing,
/// used to prove the harness detects wrong gradients.
pub enum Corruption<'a> {
    None,
    /// Negate the checked entry with the largest magnitude in the gradient of
    /// the named group.
    Negate(&'a str),
}

/// Deterministic candidate ordering: tensor coordinates by descending
/// analytic gradient magnitude (ties broken by index). Central differences
/// have an absolute noise floor of roughly one loss ulp divided by the step,
/// so the largest entries are the ones where a relative comparison is
/// meaningful; near-zero entries would only compare rounding noise. The
/// caller walks this list and keeps the first 10 kink-free coordinates.
fn check_coords(analytic_flat: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..analytic_flat.len()).collect();
    idx.sort_by(|&a, &b| {
        analytic_flat[b]
            .abs()
            .total_cmp(&analytic_flat[a].abs())
            .then(a.cmp(&b))
    });
    idx
}

/// Default finite-difference step sizes per floating-point width.
pub const GRAD_STEP_64: f64 = 1e-5;
pub const GRAD_STEP_32: f64 = 1e-3;
/// Default tolerances per floating-point width.
pub const GRAD_TOL_64: f64 = 1e-4;
pub const GRAD_TOL_32: f64 = 1e-2;

/// Verify analytic joint-loss gradients against central differences on the
/// reduced 64-bit configuration.
pub fn grad_check(tolerance: f64) -> Result<GradReport> {
    grad_check_with::<f64>(tolerance, GRAD_STEP_64, Corruption::None)
}

pub fn grad_check_with<S: Scalar>(
    tolerance: f64,
    step: f64,
    corruption: Corruption<'_>,
) -> Result<GradReport> {
    let cfg = RunConfig::reduced();
    let mut models: SdicModels<S> = SdicModels::new(&cfg.model, Variant::Full);
    let feat: FeatureNet<S> = FeatureNet::new(cfg.loss.feature_seed);
    // Warm-up optimization first: the residual heads start at exactly zero,
    // which would make most gradients identically zero and the comparison
    // vacuous at the raw initialization point; a few dozen steps also grow
    // upstream gradients well above the finite-difference noise floor.
    {
        let mut warm = cfg.clone();
        warm.train.steps = 40;
        warm.train.batch_size = 2;
        warm.train.log_every = 1;
        train_sdic(&warm, &mut models, &feat)?;
    }
    let set = SampleSet::train(&cfg.data);
    let cache = cache_samples(&models.generator, &models.encoder, &set)?;
    let batch: Vec<&CachedSample<S>> = vec![&cache[0], &cache[1]];
    let layer = cfg.model.injection_layer;
    let h = step;

    // analytic gradients and the parameter-group name list, in bind order
    let mut names = Vec::new();
    models.dipn.visit(&mut |n, _| names.push(n.to_string()));
    models.dicn.visit(&mut |n, _| names.push(n.to_string()));
    let mut analytic: Vec<ArrayD<S>> = {
        let mut t = Tape::new();
        let mut frozen_b = Binder::new(&mut t, false);
        let gen_b = models.generator.bind(&mut frozen_b);
        let feat_b = feat.bind(&mut frozen_b);
        let mut train_b = Binder::new(&mut t, true);
        let dipn_b = models.dipn.bind(&mut train_b);
        let dicn_b = models.dicn.bind(&mut train_b);
        let ids = std::mem::take(&mut train_b.ids);
        let (loss, _) =
            batch_loss_graph(&mut t, &gen_b, &feat_b, &dipn_b, &dicn_b, layer, &cfg.loss, &batch);
        let grads = t.backward(loss);
        leaf_grads(&t, &ids, &grads)
    };
    assert_eq!(names.len(), analytic.len(), "visit/bind order mismatch");
    if let Corruption::Negate(name) = corruption {
        let idx = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::CheckFailed(format!("no parameter group named {name}")))?;
        let flat: Vec<f64> = analytic[idx].iter().map(|v| v.to_f64_lossy()).collect();
        let target = check_coords(&flat)[0];
        let x = analytic[idx].iter_mut().nth(target).unwrap();
        *x = S::zero() - *x;
    }

    // Loss as a plain function of the current parameter arrays. The second
    // return value hashes the sign pattern of every rectifier input during
    // the forward pass: two evaluations with differing patterns straddle a
    // rectifier kink, where the loss is only piecewise smooth and a central
    // difference is not a valid derivative estimate.
    let eval_loss = |models: &SdicModels<S>| -> (f64, u64) {
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, false);
        let gen_b = models.generator.bind(&mut b);
        let feat_b = feat.bind(&mut b);
        let dipn_b = models.dipn.bind(&mut b);
        let dicn_b = models.dicn.bind(&mut b);
        crate::nn::kink_signs_start();
        let (loss, _) =
            batch_loss_graph(&mut t, &gen_b, &feat_b, &dipn_b, &dicn_b, layer, &cfg.loss, &batch);
        let signs = crate::nn::kink_signs_take().unwrap();
        (t.scalar_value(loss).to_f64_lossy(), signs)
    };

    // Resolution limit of the central-difference estimator: the loss is
    // known only to about one ulp, so a difference quotient carries absolute
    // noise of roughly eps * |L| / (2 h) at the smallest step used. Gradient
    // entries below this scale divided by the tolerance cannot be measured;
    // the relative-error denominator is floored accordingly (with an
    // 8x safety margin for error accumulation in the forward pass).
    let (loss_at_point, _) = eval_loss(&models);
    let scalar_eps = if std::mem::size_of::<S>() == 4 {
        f32::EPSILON as f64
    } else {
        f64::EPSILON
    };
    let denom_floor =
        8.0 * scalar_eps * loss_at_point.abs() / (2.0 * h / 256.0) / tolerance;

    let mut groups = Vec::with_capacity(names.len());
    for (gi, name) in names.iter().enumerate() {
        let flat: Vec<f64> = analytic[gi].iter().map(|v| v.to_f64_lossy()).collect();
        let coords = check_coords(&flat);
        let mut report = GroupReport {
            name: name.clone(),
            checked: 0,
            worst_rel: 0.0,
            worst_flat_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        // Walk candidates until 10 kink-free coordinates are verified; the
        // candidate cap bounds runtime if a group is saturated with kinks.
        for &ci in coords.iter().take(60) {
            if report.checked >= 10 {
                break;
            }
            // set (not accumulate) so ± offsets restore bit-exactly in f32
            let set_coord = |models: &mut SdicModels<S>, value: S| {
                let mut k = 0usize;
                let mut apply = |_: &str, p: &mut ArrayD<S>| {
                    if k == gi {
                        *p.iter_mut().nth(ci).unwrap() = value;
                    }
                    k += 1;
                };
                models.dipn.visit_mut(&mut apply);
                models.dicn.visit_mut(&mut apply);
            };
            let mut orig = S::zero();
            {
                let mut k = 0usize;
                let mut grab = |_: &str, p: &mut ArrayD<S>| {
                    if k == gi {
                        orig = *p.iter().nth(ci).unwrap();
                    }
                    k += 1;
                };
                models.dipn.visit_mut(&mut grab);
                models.dicn.visit_mut(&mut grab);
            }
            // A kink-sign change inside the +-h interval means the loss is
            // only piecewise smooth there and the central difference is
            // invalid; those estimates are discarded. Among the valid step
            // sizes, the best estimate is kept: large steps suffer curvature
            // truncation, small steps rounding noise, and the optimum varies
            // per coordinate. A wrong analytic gradient fails at every step
            // size, since each valid estimate converges on the true
            // derivative.
            let a = analytic[gi].iter().nth(ci).unwrap().to_f64_lossy();
            let mut best: Option<(f64, f64)> = None; // (rel, numeric)
            for hh in [h, h / 16.0, h / 256.0, h / 4096.0, h / 65536.0] {
                let xp = orig + S::lit(hh);
                let xm = orig - S::lit(hh);
                // step actually applied after rounding to S (can differ from
                // 2*hh at 32-bit)
                let applied = xp.to_f64_lossy() - xm.to_f64_lossy();
                if applied <= 0.0 {
                    continue;
                }
                set_coord(&mut models, xp);
                let (plus, signs_plus) = eval_loss(&models);
                set_coord(&mut models, xm);
                let (minus, signs_minus) = eval_loss(&models);
                set_coord(&mut models, orig);
                if signs_plus != signs_minus {
                    continue;
                }
                let numeric = (plus - minus) / applied;
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(denom_floor);
                if best.is_none() || rel < best.unwrap().0 {
                    best = Some((rel, numeric));
                }
                if rel <= tolerance * 0.1 {
                    break; // confirmed well under tolerance
                }
            }
            let Some((rel, numeric)) = best else { continue };
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_flat_index = ci;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        groups.push(report);
    }
    let pass = groups.iter().all(|g| g.worst_rel <= tolerance);
    Ok(GradReport {
        tolerance,
        step_size: h,
        groups,
        pass,
    })
}
