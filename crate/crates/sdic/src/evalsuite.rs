//! Reconstruction metrics and the experiment harnesses.
//!
//! Metric conventions: images live in [−1, 1], so the dynamic range is 2.
//! PSNR is `10·log10(range²/MSE)`, capped at 99 dB for (near-)identical
//! images. SSIM is single-scale over uniform 8×8 windows with stride 4,
//! averaged across channels and windows, with the standard constants
//! `C1 = (0.01·range)²` and `C2 = (0.03·range)²` and population moments.
//!
//! The harnesses evaluate a trained system against its encoder-only baseline
//! on the held-out split, run the variant ablation and injection-layer sweep
//! with ordering assertions, and measure editing sanity as the rank
//! correlation between edit strength and a rendered factor probe.

use crate::checkpoint;
use crate::config::{DataConfig, RunConfig, Variant};
use crate::dataset::SampleSet;
use crate::dicn::{invert, SdicModels};
use crate::editing::{hyperplane_direction, EditDirection};
use crate::imageio::Image;
use crate::losses::{id_loss, perceptual_distance, FeatureNet};
use crate::ntf::NtfScalar;
use crate::toygen::Generator;
use crate::trainer::train_pipeline;
use crate::{shape_err, Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::path::Path;
use std::time::Instant;
use tapegrad::Scalar;

const PSNR_RANGE: f64 = 2.0;
pub const PSNR_CAP_DB: f64 = 99.0;
const PSNR_MSE_FLOOR: f64 = 1e-12;
const SSIM_WINDOW: usize = 8;
const SSIM_STRIDE: usize = 4;

fn check_pair<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<()> {
    if a.0.shape() != b.0.shape() {
        return Err(shape_err("metric image pair", a.0.shape(), b.0.shape()));
    }
    Ok(())
}

/// Mean squared pixel error.
pub fn l2<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.0
        .iter()
        .zip(b.0.iter())
        .map(|(x, y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / a.0.len() as f64)
}

/// Peak signal-to-noise ratio in dB for range-2 images.
pub fn psnr<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<f64> {
    let mse = l2(a, b)?;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (PSNR_RANGE * PSNR_RANGE / mse).log10())
}

/// Single-scale SSIM, mean over channels and sliding windows.
pub fn ssim<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<f64> {
    check_pair(a, b)?;
    let (c, h, w) = (a.0.shape()[0], a.0.shape()[1], a.0.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Degenerate(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let c1 = (0.01 * PSNR_RANGE).powi(2);
    let c2 = (0.03 * PSNR_RANGE).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..c {
        for y0 in (0..=h - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            for x0 in (0..=w - SSIM_WINDOW).step_by(SSIM_STRIDE) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let va = a.0[[ch, y, x]].to_f64_lossy();
                        let vb = b.0[[ch, y, x]].to_f64_lossy();
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (mu_a, mu_b) = (sa / n, sb / n);
                let var_a = saa / n - mu_a * mu_a;
                let var_b = sbb / n - mu_b * mu_b;
                let cov = sab / n - mu_a * mu_b;
                let index = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += index;
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Degenerate(format!(
            "spearman needs two equal-length series of >= 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut num, mut dx, mut dy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::Degenerate("constant series in rank correlation".into()));
    }
    Ok(num / (dx * dy).sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Averaged reconstruction quality of one method over a split.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricRow {
    pub id_cosine: f64,
    pub ssim: f64,
    pub psnr_db: f64,
    pub lpips_proxy: f64,
    pub l2: f64,
    pub wall_time_s: f64,
}

/// All metrics for one original/reconstruction pair.
pub fn metric_pair<S: Scalar>(
    orig: &Image<S>,
    recon: &Image<S>,
    feat: &FeatureNet<S>,
    wall_time_s: f64,
) -> Result<MetricRow> {
    Ok(MetricRow {
        id_cosine: 1.0 - id_loss(orig, recon, feat)?,
        ssim: ssim(orig, recon)?,
        psnr_db: psnr(orig, recon)?,
        lpips_proxy: perceptual_distance(orig, recon, feat)?,
        l2: l2(orig, recon)?,
        wall_time_s,
    })
}

fn accumulate(rows: &[MetricRow]) -> MetricRow {
    let n = rows.len() as f64;
    let mut out = MetricRow::default();
    for r in rows {
        out.id_cosine += r.id_cosine / n;
        out.ssim += r.ssim / n;
        out.psnr_db += r.psnr_db / n;
        out.lpips_proxy += r.lpips_proxy / n;
        out.l2 += r.l2 / n;
        out.wall_time_s += r.wall_time_s / n;
    }
    out
}

/// Held-out evaluation of the refined inversion against the encoder-only
/// baseline.
#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    pub baseline: MetricRow,
    pub sdic: MetricRow,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "which,id_cosine,ssim,psnr_db,lpips_proxy,l2,wall_time_s";

    pub fn to_csv(&self) -> String {
        let row = |name: &str, r: &MetricRow| {
            format!(
                "{name},{},{},{},{},{},{}\n",
                r.id_cosine, r.ssim, r.psnr_db, r.lpips_proxy, r.l2, r.wall_time_s
            )
        };
        format!(
            "{}\n{}{}",
            Self::CSV_HEADER,
            row("baseline", &self.baseline),
            row("sdic", &self.sdic)
        )
    }
}

/// Evaluate a trained system over the held-out split.
pub fn evaluate<S: Scalar>(
    models: &SdicModels<S>,
    feat: &FeatureNet<S>,
    data: &DataConfig,
) -> Result<EvalReport> {
    let set = SampleSet::held_out(data);
    if set.is_empty() {
        return Err(Error::Degenerate("empty held-out split".into()));
    }
    let mut baseline = Vec::with_capacity(set.len());
    let mut sdic = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let (img, _) = set.materialize(&models.generator, i)?;
        let t0 = Instant::now();
        let w = models.encoder.encode_arrays(&img)?;
        let (r_o, _) = models.generator.synthesize_arrays(&w, None)?;
        let t_base = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let (r_f, _) = invert(models, &img)?;
        let t_sdic = t1.elapsed().as_secs_f64();
        baseline.push(metric_pair(&img, &r_o, feat, t_base)?);
        sdic.push(metric_pair(&img, &r_f, feat, t_sdic)?);
    }
    Ok(EvalReport {
        baseline: accumulate(&baseline),
        sdic: accumulate(&sdic),
    })
}

// ---------------------------------------------------------------------------
// Trained-model cache
// ---------------------------------------------------------------------------

fn cache_key(cfg: &RunConfig) -> String {
    // FNV-1a over the canonical config text
    let mut h: u64 = 0xcbf29ce484222325;
    for b in cfg.to_ini().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!(
        "{}-L{}-{h:016x}",
        cfg.train.variant.as_str(),
        cfg.model.injection_layer
    )
}

/// Train both stages, or load an identical previous run from `cache_dir`.
/// A cached checkpoint is only accepted if its config matches exactly.
pub fn train_or_load<S: NtfScalar>(
    cfg: &RunConfig,
    cache_dir: Option<&Path>,
) -> Result<(SdicModels<S>, FeatureNet<S>)> {
    let slot = cache_dir.map(|d| d.join(cache_key(cfg)));
    if let Some(dir) = &slot {
        if dir.join("manifest.tsv").exists() {
            let mut models: SdicModels<S> = SdicModels::new(&cfg.model, cfg.train.variant);
            let (loaded, _) = checkpoint::load_params::<S>(dir, |f| {
                models.generator.visit_mut(f);
                models.encoder.visit_mut(f);
                models.dipn.visit_mut(f);
                models.dicn.visit_mut(f);
            })?;
            if &loaded != cfg {
                return Err(Error::Config(format!(
                    "cached checkpoint at {} was trained under a different config",
                    dir.display()
                )));
            }
            return Ok((models, FeatureNet::new(cfg.loss.feature_seed)));
        }
    }
    let (models, feat, _, _) = train_pipeline::<S>(cfg, cfg.train.variant)?;
    if let Some(dir) = &slot {
        checkpoint::save_params::<S>(dir, cfg, cfg.train.steps, |f| {
            models.generator.visit(f);
            models.encoder.visit(f);
            models.dipn.visit(f);
            models.dicn.visit(f);
        })?;
    }
    Ok((models, feat))
}

// ---------------------------------------------------------------------------
// Ablation + layer sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub kind: &'static str,
    pub name: String,
    pub l2: f64,
    pub lpips_proxy: f64,
    pub id: f64,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub variant_ordering_ok: bool,
    pub layer_ordering_ok: bool,
}

impl AblationOutcome {
    pub fn ok(&self) -> bool {
        self.variant_ordering_ok && self.layer_ordering_ok
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,name,l2,lpips_proxy,id\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.kind, r.name, r.l2, r.lpips_proxy, r.id
            ));
        }
        out
    }
}

/// Slack for calling two ablation variants tied.
const VARIANT_TIE_SLACK: f64 = 1.05;

/// Train (or load) the three architecture variants and the three injection
/// layers, evaluate each on the held-out split, and check both orderings.
pub fn ablation_suite<S: NtfScalar>(
    cfg: &RunConfig,
    cache_dir: Option<&Path>,
) -> Result<AblationOutcome> {
    let mut rows = Vec::new();
    let mut variant_l2 = Vec::new();
    for variant in [Variant::Full, Variant::NoAtt, Variant::NoSc] {
        let mut c = cfg.clone();
        c.train.variant = variant;
        let (models, feat) = train_or_load::<S>(&c, cache_dir)?;
        let report = evaluate(&models, &feat, &c.data)?;
        variant_l2.push(report.sdic.l2);
        rows.push(AblationRow {
            kind: "variant",
            name: variant.as_str().to_string(),
            l2: report.sdic.l2,
            lpips_proxy: report.sdic.lpips_proxy,
            id: 1.0 - report.sdic.id_cosine,
        });
    }
    let mut layer_l2 = Vec::new();
    for layer in [1usize, 2, 3] {
        let mut c = cfg.clone();
        c.train.variant = Variant::Full;
        c.model.injection_layer = layer;
        let (models, feat) = train_or_load::<S>(&c, cache_dir)?;
        let report = evaluate(&models, &feat, &c.data)?;
        layer_l2.push(report.sdic.l2);
        rows.push(AblationRow {
            kind: "layer",
            name: format!("L{layer}"),
            l2: report.sdic.l2,
            lpips_proxy: report.sdic.lpips_proxy,
            id: 1.0 - report.sdic.id_cosine,
        });
    }
    let variant_ordering_ok = variant_l2[0] <= variant_l2[1] * VARIANT_TIE_SLACK
        && variant_l2[1] <= variant_l2[2] * VARIANT_TIE_SLACK;
    let layer_ordering_ok = layer_l2[0] >= layer_l2[1] && layer_l2[1] >= layer_l2[2];
    Ok(AblationOutcome {
        rows,
        variant_ordering_ok,
        layer_ordering_ok,
    })
}

// ---------------------------------------------------------------------------
// Editing sanity
// ---------------------------------------------------------------------------

/// Image-space probe for the first latent factor: the render difference
/// between the factor at +2 and −2 with all other factors at zero.
pub fn factor_probe_template<S: Scalar>(gen: &Generator<S>) -> Result<ArrayD<f64>> {
    let render = |v: f64| -> Result<Image<S>> {
        let mut z = ArrayD::zeros(IxDyn(&[gen.latent_dim]));
        z[[0]] = S::lit(v);
        let w = gen.map_latent_arrays(&z)?;
        Ok(gen.synthesize_arrays(&w, None)?.0)
    };
    let plus = render(2.0)?;
    let minus = render(-2.0)?;
    let t = plus.0.mapv(|x| x.to_f64_lossy()) - minus.0.mapv(|x| x.to_f64_lossy());
    let norm2: f64 = t.iter().map(|v| v * v).sum();
    if norm2 < 1e-12 {
        return Err(Error::Degenerate("factor probe template is zero".into()));
    }
    Ok(t)
}

/// Scalar factor response of an image: its projection onto the probe
/// template, normalized so the template itself scores 1.
pub fn probe_response<S: Scalar>(img: &Image<S>, template: &ArrayD<f64>) -> Result<f64> {
    if img.0.shape() != template.shape() {
        return Err(shape_err("probe response", template.shape(), img.0.shape()));
    }
    let norm2: f64 = template.iter().map(|v| v * v).sum();
    let dot: f64 = img
        .0
        .iter()
        .zip(template.iter())
        .map(|(a, b)| a.to_f64_lossy() * b)
        .sum();
    Ok(dot / norm2)
}

/// Held-out direction-discovery corpus: one row-mean encoder code per image,
/// labeled by the sign of the image's first latent factor.
pub fn heldout_code_corpus<S: Scalar>(
    models: &SdicModels<S>,
    data: &DataConfig,
) -> Result<(ArrayD<S>, Vec<bool>)> {
    let set = SampleSet::held_out(data);
    let d = models.cfg.latent_dim;
    let k = models.cfg.num_rows;
    let mut corpus = ArrayD::zeros(IxDyn(&[set.len(), d]));
    let mut labels = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let (img, z) = set.materialize(&models.generator, i)?;
        let w = models.encoder.encode_arrays(&img)?;
        for j in 0..d {
            let mut s = S::zero();
            for r in 0..k {
                s = s + w[[r, j]];
            }
            corpus[[i, j]] = s * S::lit(1.0 / k as f64);
        }
        labels.push(z[[0]].to_f64_lossy() > 0.0);
    }
    Ok((corpus, labels))
}

/// Hyperplane direction separating held-out codes by the sign of their first
/// latent factor.
pub fn factor_hyperplane<S: Scalar>(
    models: &SdicModels<S>,
    data: &DataConfig,
) -> Result<EditDirection<S>> {
    let (corpus, labels) = heldout_code_corpus(models, data)?;
    hyperplane_direction(&corpus, &labels)
}

/// Mean per-image Spearman correlation between the edit strength α ∈ {−3…3}
/// and the probe response of the edited output, over `count` held-out images.
pub fn editing_sanity<S: Scalar>(
    models: &SdicModels<S>,
    data: &DataConfig,
    count: usize,
) -> Result<f64> {
    let dir = factor_hyperplane(models, data)?;
    let template = factor_probe_template(&models.generator)?;
    let set = SampleSet::held_out(data);
    let n = count.min(set.len());
    if n == 0 {
        return Err(Error::Degenerate("no images for editing sanity".into()));
    }
    let alphas: Vec<f64> = (-3..=3).map(|a| a as f64).collect();
    let mut total = 0.0;
    for i in 0..n {
        let (img, _) = set.materialize(&models.generator, i)?;
        let responses: Vec<f64> = alphas
            .iter()
            .map(|&a| {
                let out = crate::dicn::edit(models, &img, &dir, a)?;
                probe_response(&out, &template)
            })
            .collect::<Result<_>>()?;
        total += spearman(&alphas, &responses)?;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, side: usize) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(ArrayD::from_shape_simple_fn(IxDyn(&[3, side, side]), || {
            rng.gen_range(-1.0..1.0)
        }))
        .unwrap()
    }

    #[test]
    fn psnr_cap_and_arithmetic() {
        let a = Image::new(ArrayD::from_elem(IxDyn(&[3, 8, 8]), 0.25f64)).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        // uniform offset of 0.2 gives MSE 0.04 exactly: 10·log10(4/0.04) = 20 dB
        let c = Image::new(a.0.mapv(|v| v + 0.2)).unwrap();
        assert!((l2(&a, &c).unwrap() - 0.04).abs() < 1e-12);
        assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_direct_formula_on_random_pair() {
        let a = image(2, 8);
        let b = image(3, 8);
        let got = psnr(&a, &b).unwrap();
        let mse: f64 = a
            .0
            .iter()
            .zip(b.0.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 192.0;
        let want = 10.0 * (4.0 / mse).log10();
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let a = image(4, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        // per-window zero-mean pattern against its negation: the covariance
        // term flips sign while the luminance term stays positive
        let zm = Image::new(ArrayD::from_shape_fn(IxDyn(&[3, 16, 16]), |ix| {
            if ix[2] % 2 == 0 {
                0.5
            } else {
                -0.5
            }
        }))
        .unwrap();
        let neg = Image::new(zm.0.mapv(|v: f64| -v)).unwrap();
        assert!(ssim(&zm, &neg).unwrap() < 0.0);
        // too-small image rejected
        let tiny: Image<f64> = Image::new(ArrayD::zeros(IxDyn(&[3, 4, 4]))).unwrap();
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn ssim_matches_per_window_reference() {
        let a = image(5, 8);
        let b = image(6, 8);
        let got = ssim(&a, &b).unwrap();
        // 8x8 image: exactly one window per channel
        let c1 = 0.02f64 * 0.02;
        let c2 = 0.06f64 * 0.06;
        let mut want = 0.0;
        for ch in 0..3 {
            let pa: Vec<f64> = a.0.index_axis(ndarray::Axis(0), ch).iter().copied().collect();
            let pb: Vec<f64> = b.0.index_axis(ndarray::Axis(0), ch).iter().copied().collect();
            let ma = pa.iter().sum::<f64>() / 64.0;
            let mb = pb.iter().sum::<f64>() / 64.0;
            let va = pa.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / 64.0;
            let vb = pb.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / 64.0;
            let cov = pa
                .iter()
                .zip(&pb)
                .map(|(x, y)| (x - ma) * (y - mb))
                .sum::<f64>()
                / 64.0;
            want += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        want /= 3.0;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn spearman_extremes_and_ties() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&xs, &[2.0, 4.0, 5.0, 9.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &[9.0, 5.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
        // monotone despite nonlinearity
        assert!((spearman(&xs, &[0.0, 0.001, 10.0, 11.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(spearman(&xs, &[1.0, 1.0, 1.0, 1.0]).is_err());
        // ties get average ranks
        let r = ranks(&[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn metric_row_perfect_fixture() {
        let feat: FeatureNet<f64> = FeatureNet::new(7);
        let a = image(7, 16);
        let row = metric_pair(&a, &a, &feat, 0.0).unwrap();
        assert_eq!(row.l2, 0.0);
        assert_eq!(row.psnr_db, 99.0);
        assert!((row.ssim - 1.0).abs() < 1e-12);
        assert!((row.id_cosine - 1.0).abs() < 1e-9);
        assert_eq!(row.lpips_proxy, 0.0);
    }

    #[test]
    fn probe_template_scores_itself_one() {
        let cfg = RunConfig::reduced().model;
        let gen: Generator<f64> = Generator::new(&cfg, cfg.seed);
        let template = factor_probe_template(&gen).unwrap();
        let as_img = Image::new(template.mapv(|v| v.clamp(-1.0, 1.0))).unwrap();
        // clamped template still correlates strongly with itself
        let r = probe_response(&as_img, &template).unwrap();
        assert!(r > 0.5, "self response {r}");
    }

    #[test]
    fn evaluate_emits_stable_csv() {
        let cfg = RunConfig::reduced();
        let models: SdicModels<f64> = SdicModels::new(&cfg.model, Variant::Full);
        let feat: FeatureNet<f64> = FeatureNet::new(cfg.loss.feature_seed);
        let r1 = evaluate(&models, &feat, &cfg.data).unwrap();
        let r2 = evaluate(&models, &feat, &cfg.data).unwrap();
        let strip = |csv: String| {
            csv.lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_string())
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip(r1.to_csv()), strip(r2.to_csv()));
        // untrained compensation is the identity, so both rows agree
        assert!((r1.baseline.l2 - r1.sdic.l2).abs() < 1e-12);
    }
}
