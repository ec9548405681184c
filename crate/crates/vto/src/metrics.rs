//! Evaluation: SSIM, FID, KID (×1000 convention), silhouette IoU, a
//! fixed-seed random feature extractor standing in for pretrained
//! perceptual features, and the model evaluation harness.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::UDiT;
use crate::diffusion::{ancestral_sample, DiffusionSchedule};
use crate::error::{Result, VtoError};
use crate::params::randn;
use crate::scalar::Scalar;
use crate::synth::{SampleRecord, BACKGROUND};

pub const FEATURE_DIM: usize = 64;

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *wi = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *wi;
    }
    for wi in &mut w {
        *wi /= sum;
    }
    w
}

/// Standard SSIM with an 11×11 Gaussian window (σ=1.5), averaged over
/// channels and all valid window positions. Inputs are [-1, 1] images,
/// remapped internally to [0, 1].
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(VtoError::RejectedInput(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w, c) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(VtoError::RejectedInput(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = win[dy] * win[dx];
                        let va = (a[[y0 + dy, x0 + dx, ch]] + 1.0) / 2.0;
                        let vb = (b[[y0 + dy, x0 + dx, ch]] + 1.0) / 2.0;
                        mu_a += wgt * va;
                        mu_b += wgt * vb;
                        aa += wgt * va * va;
                        bb += wgt * vb * vb;
                        ab += wgt * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// FID
// ---------------------------------------------------------------------------

fn mean_cov(x: &Array2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mu = x.mean_axis(Axis(0)).unwrap();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in x.outer_iter() {
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in 0..d {
                cov[(i, j)] += di * (row[j] - mu[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

/// Symmetric PSD matrix square root via eigendecomposition; eigenvalues in
/// [-1e-8, 0) are treated as rounding noise and clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    // Symmetrize to guard against asymmetric rounding noise.
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().cloned().fold(1.0f64, f64::max);
    let mut sqrt_vals = eig.eigenvalues.clone();
    for v in sqrt_vals.iter_mut() {
        if !v.is_finite() {
            return Err(VtoError::Numerical("non-finite eigenvalue".into()));
        }
        if *v < -1e-8 * scale {
            return Err(VtoError::Numerical(format!(
                "matrix not PSD: eigenvalue {v}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&sqrt_vals) * q.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// ‖μa−μb‖² + tr(Σa + Σb − 2(Σa Σb)^{1/2}).
pub fn fid(set_a: &Array2<f64>, set_b: &Array2<f64>) -> Result<f64> {
    if set_a.dim().0 < 2 || set_b.dim().0 < 2 {
        return Err(VtoError::RejectedInput(
            "fid needs at least 2 samples per set".into(),
        ));
    }
    if set_a.dim().1 != set_b.dim().1 {
        return Err(VtoError::RejectedInput(format!(
            "feature dims differ: {} vs {}",
            set_a.dim().1,
            set_b.dim().1
        )));
    }
    let (mu_a, cov_a) = mean_cov(set_a);
    let (mu_b, cov_b) = mean_cov(set_b);
    if cov_a.iter().any(|v| !v.is_finite()) || cov_b.iter().any(|v| !v.is_finite()) {
        return Err(VtoError::Numerical("non-finite covariance".into()));
    }
    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    // (Σa Σb)^{1/2} computed in the numerically stable symmetric form
    // A^{1/2} (A^{1/2} B A^{1/2})^{1/2} has the same trace.
    let sa = sqrtm_psd(&cov_a)?;
    let inner = sqrtm_psd(&(&sa * &cov_b * &sa))?;
    let trace_term = cov_a.trace() + cov_b.trace() - 2.0 * inner.trace();
    let v = mean_term + trace_term;
    if !v.is_finite() {
        return Err(VtoError::Numerical("non-finite FID".into()));
    }
    Ok(v.max(0.0))
}

// ---------------------------------------------------------------------------
// KID
// ---------------------------------------------------------------------------

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² with the cubic polynomial kernel k(x,y) = (xᵀy/d + 1)³,
/// multiplied by 1000 following the reporting convention.
pub fn kid(set_a: &Array2<f64>, set_b: &Array2<f64>) -> Result<f64> {
    let (m, d) = set_a.dim();
    let n = set_b.dim().0;
    if m < 2 || n < 2 {
        return Err(VtoError::RejectedInput(
            "kid needs at least 2 samples per set".into(),
        ));
    }
    if set_b.dim().1 != d {
        return Err(VtoError::RejectedInput(format!(
            "feature dims differ: {} vs {}",
            d,
            set_b.dim().1
        )));
    }
    if m != n {
        return Err(VtoError::RejectedInput(format!(
            "kid blocks must be equal-sized, got {m} and {n}"
        )));
    }
    let a: Vec<Vec<f64>> = set_a.outer_iter().map(|r| r.to_vec()).collect();
    let b: Vec<Vec<f64>> = set_b.outer_iter().map(|r| r.to_vec()).collect();
    // Paired unbiased MMD² estimator: all terms exclude matching indices,
    // so identical sets score exactly zero.
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += poly_kernel(&a[i], &a[j]) + poly_kernel(&b[i], &b[j])
                    - poly_kernel(&a[i], &b[j])
                    - poly_kernel(&b[i], &a[j]);
            }
        }
    }
    Ok(acc / (n * (n - 1)) as f64 * 1000.0)
}

// ---------------------------------------------------------------------------
// Silhouette IoU
// ---------------------------------------------------------------------------

/// Foreground = any channel differing from the background constant by more
/// than 0.05.
pub fn foreground_mask(img: &Array3<f64>) -> Array2<bool> {
    let (h, w, c) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c).any(|ch| (img[[y, x, ch]] - BACKGROUND).abs() > 0.05)
    })
}

/// Intersection-over-union of the generated image's foreground against a
/// ground-truth foreground mask; an empty union is defined as 0.
pub fn silhouette_iou(generated: &Array3<f64>, ground_truth: &Array2<bool>) -> Result<f64> {
    let (h, w, _) = generated.dim();
    if ground_truth.dim() != (h, w) {
        return Err(VtoError::RejectedInput(format!(
            "mask {:?} does not match image {:?}",
            ground_truth.dim(),
            (h, w)
        )));
    }
    let gen_mask = foreground_mask(generated);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (g, t) in gen_mask.iter().zip(ground_truth.iter()) {
        if *g && *t {
            inter += 1;
        }
        if *g || *t {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Tight bounding box of the true pixels, or None if the mask is empty.
pub fn bbox_of_mask(mask: &Array2<bool>) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = mask.dim();
    let mut y0 = h;
    let mut y1 = 0;
    let mut x0 = w;
    let mut x1 = 0;
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                any = true;
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    any.then_some((y0, y1, x0, x1))
}

/// SSIM restricted to the bounding box of a region mask (padded to the SSIM
/// window when the region is small).
pub fn region_ssim(a: &Array3<f64>, b: &Array3<f64>, mask: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(VtoError::RejectedInput(format!(
            "region_ssim shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w, _) = a.dim();
    let (mut y0, mut y1, mut x0, mut x1) = bbox_of_mask(mask)
        .ok_or_else(|| VtoError::RejectedInput("empty region mask".into()))?;
    // Grow the box to at least the SSIM window.
    while y1 - y0 < SSIM_WINDOW && (y0 > 0 || y1 < h) {
        if y0 > 0 {
            y0 -= 1;
        }
        if y1 - y0 < SSIM_WINDOW && y1 < h {
            y1 += 1;
        }
    }
    while x1 - x0 < SSIM_WINDOW && (x0 > 0 || x1 < w) {
        if x0 > 0 {
            x0 -= 1;
        }
        if x1 - x0 < SSIM_WINDOW && x1 < w {
            x1 += 1;
        }
    }
    let ca = a.slice(ndarray::s![y0..y1, x0..x1, ..]).to_owned();
    let cb = b.slice(ndarray::s![y0..y1, x0..x1, ..]).to_owned();
    ssim(&ca, &cb)
}

/// Nearest-template classification by mean squared difference; returns the
/// index of the best-matching template.
pub fn classify_by_templates(image: &Array3<f64>, templates: &[Array3<f64>]) -> Result<usize> {
    if templates.is_empty() {
        return Err(VtoError::RejectedInput("no templates".into()));
    }
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (i, t) in templates.iter().enumerate() {
        if t.dim() != image.dim() {
            return Err(VtoError::RejectedInput(format!(
                "template {i} shape {:?} does not match image {:?}",
                t.dim(),
                image.dim()
            )));
        }
        let err: f64 = image
            .iter()
            .zip(t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if err < best_err {
            best_err = err;
            best = i;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Feature extractor
// ---------------------------------------------------------------------------

/// Fixed-seed random convolutional features (3 stride-2 conv levels plus
/// global average pooling, 64 dimensions): a deterministic, pretrained-free
/// stand-in for perceptual FID/KID features. Not comparable to published
/// FID magnitudes.
pub struct FeatureExtractor {
    pub seed: u64,
    weights: Vec<Array4<f64>>, // [kh, kw, c_in, c_out] per level
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> FeatureExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = [3usize, 16, 32, FEATURE_DIM];
        let mut weights = Vec::new();
        for lvl in 0..3 {
            let (ci, co) = (channels[lvl], channels[lvl + 1]);
            let std = (2.0 / (9 * ci) as f64).sqrt();
            let w = randn::<f64>(&[3, 3, ci, co], std, &mut rng)
                .into_dimensionality()
                .unwrap();
            weights.push(w);
        }
        FeatureExtractor { seed, weights }
    }

    fn conv_stride2(x: &Array3<f64>, w: &Array4<f64>) -> Array3<f64> {
        let (h, win, ci) = x.dim();
        let co = w.dim().3;
        let (oh, ow) = (h.div_ceil(2), win.div_ceil(2));
        let mut out = Array3::<f64>::zeros((oh, ow, co));
        for oy in 0..oh {
            for ox in 0..ow {
                for dy in 0..3 {
                    let y = (2 * oy + dy) as isize - 1;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let xx = (2 * ox + dx) as isize - 1;
                        if xx < 0 || xx >= win as isize {
                            continue;
                        }
                        for c_in in 0..ci {
                            let v = x[[y as usize, xx as usize, c_in]];
                            for c_out in 0..co {
                                out[[oy, ox, c_out]] += v * w[[dy, dx, c_in, c_out]];
                            }
                        }
                    }
                }
            }
        }
        out.mapv_inplace(|v| if v > 0.0 { v } else { 0.01 * v });
        out
    }

    pub fn features(&self, image: &Array3<f64>) -> Array1<f64> {
        let mut x = image.clone();
        for w in &self.weights {
            x = Self::conv_stride2(&x, w);
        }
        let (h, w, c) = x.dim();
        let mut out = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x[[y, xx, ch]];
                }
            }
            out[ch] = s / (h * w) as f64;
        }
        out
    }

    pub fn features_batch(&self, images: &[Array3<f64>]) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((images.len(), FEATURE_DIM));
        for (i, img) in images.iter().enumerate() {
            out.row_mut(i).assign(&self.features(img));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Evaluation harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub fid: f64,
    pub kid: f64,
    pub ssim: f64,
    pub silhouette_iou: f64,
    pub n: usize,
}

pub fn report_to_text(r: &EvalReport) -> String {
    format!(
        "n={}\nfid={}\nkid={}\nssim={}\nsilhouette_iou={}\n",
        r.n, r.fid, r.kid, r.ssim, r.silhouette_iou
    )
}

/// Samples the model over an eval set and scores the outputs against the
/// paired ground-truth renders: FID/KID on extractor features, mean SSIM
/// and mean silhouette IoU on the pairs. Returns the report together with
/// the generated batch for grid export.
pub fn evaluate_model<F: Scalar>(
    model: &UDiT<F>,
    eval: &[SampleRecord],
    guidance: f64,
    sample_steps: usize,
    seed: u64,
) -> Result<(EvalReport, Array4<F>)> {
    if eval.len() < 2 {
        return Err(VtoError::RejectedInput(
            "evaluation needs at least 2 records".into(),
        ));
    }
    let h = model.config.input_height;
    let mut real = Vec::with_capacity(eval.len());
    let mut conds = Vec::with_capacity(eval.len());
    for rec in eval {
        let at = rec.at_resolution(h)?;
        let (x0, cond) = at.conditioning::<F>()?;
        real.push(x0.mapv(|v| v.as_f64()));
        conds.push(cond);
    }
    // Batch the sampler to bound memory.
    let chunk = 8usize;
    let mut generated: Option<Array4<F>> = None;
    for (i, block) in conds.chunks(chunk).enumerate() {
        let out = ancestral_sample(
            &model.sampler(),
            block,
            guidance,
            sample_steps,
            seed.wrapping_add(i as u64),
            &DiffusionSchedule::default(),
        )?;
        generated = Some(match generated {
            None => out,
            Some(acc) => ndarray::concatenate(Axis(0), &[acc.view(), out.view()]).unwrap(),
        });
    }
    let generated = generated.unwrap();
    let gen_f64: Vec<Array3<f64>> = (0..eval.len())
        .map(|i| generated.index_axis(Axis(0), i).mapv(|v| v.as_f64()))
        .collect();
    let extractor = FeatureExtractor::new(0xFEA7);
    let feats_gen = extractor.features_batch(&gen_f64);
    let feats_real = extractor.features_batch(&real);
    let fid_v = fid(&feats_gen, &feats_real)?;
    let kid_v = kid(&feats_gen, &feats_real)?;
    let mut ssim_sum = 0.0;
    let mut iou_sum = 0.0;
    for i in 0..eval.len() {
        ssim_sum += ssim(&gen_f64[i], &real[i])?;
        iou_sum += silhouette_iou(&gen_f64[i], &foreground_mask(&real[i]))?;
    }
    let report = EvalReport {
        fid: fid_v,
        kid: kid_v,
        ssim: ssim_sum / eval.len() as f64,
        silhouette_iou: iou_sum / eval.len() as f64,
        n: eval.len(),
    };
    Ok((report, generated))
}
