//! Diffusion process mathematics: the variance-preserving cosine schedule,
//! forward corruption, v/eps/x0 conversions, the eps-space training loss,
//! classifier-free guidance, and the ancestral sampler.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cond::{null_conditioning, CondBatch, TryOnConditioning};
use crate::error::{Result, VtoError};
use crate::scalar::Scalar;

/// Continuous-time cosine schedule with endpoint clamping:
/// alpha(t) = cos(pi t / 2), sigma(t) = sin(pi t / 2).
#[derive(Debug, Clone, Copy)]
pub struct DiffusionSchedule {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule {
            t_min: 1e-4,
            t_max: 1.0 - 1e-4,
        }
    }
}

impl DiffusionSchedule {
    /// (alpha, sigma) at clamped time t. alpha^2 + sigma^2 = 1.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        if !t.is_finite() {
            return Err(VtoError::RejectedInput(format!("non-finite time t={t}")));
        }
        let t = t.clamp(self.t_min, self.t_max);
        let half_pi_t = std::f64::consts::FRAC_PI_2 * t;
        Ok((half_pi_t.cos(), half_pi_t.sin()))
    }
}

fn check_same_shape<F: Scalar>(a: &Array4<F>, b: &Array4<F>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(VtoError::RejectedInput(format!(
            "{what}: shape {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn per_sample_combine<F: Scalar>(
    a: &Array4<F>,
    b: &Array4<F>,
    t: &[f64],
    schedule: &DiffusionSchedule,
    f: impl Fn(f64, f64) -> (f64, f64),
) -> Result<Array4<F>> {
    check_same_shape(a, b, "per-sample combine")?;
    if a.dim().0 != t.len() {
        return Err(VtoError::RejectedInput(format!(
            "batch {} vs {} time values",
            a.dim().0,
            t.len()
        )));
    }
    let mut out = a.clone();
    for (bi, &ti) in t.iter().enumerate() {
        let (alpha, sigma) = schedule.coefficients(ti)?;
        let (ca, cb) = f(alpha, sigma);
        let (caf, cbf) = (F::cast(ca), F::cast(cb));
        let bs = b.index_axis(ndarray::Axis(0), bi);
        let mut os = out.index_axis_mut(ndarray::Axis(0), bi);
        ndarray::Zip::from(&mut os).and(&bs).for_each(|oe, &be| {
            *oe = *oe * caf + be * cbf;
        });
    }
    Ok(out)
}

/// z_t = alpha(t) x0 + sigma(t) eps
pub fn corrupt<F: Scalar>(
    x0: &Array4<F>,
    eps: &Array4<F>,
    t: &[f64],
    schedule: &DiffusionSchedule,
) -> Result<Array4<F>> {
    per_sample_combine(x0, eps, t, schedule, |a, s| (a, s))
}

/// x0 = alpha(t) z_t - sigma(t) v
pub fn x0_from_v<F: Scalar>(
    z_t: &Array4<F>,
    v: &Array4<F>,
    t: &[f64],
    schedule: &DiffusionSchedule,
) -> Result<Array4<F>> {
    per_sample_combine(z_t, v, t, schedule, |a, s| (a, -s))
}

/// v = alpha(t) eps - sigma(t) x0, the v-target consistent with `x0_from_v`.
pub fn v_from<F: Scalar>(
    x0: &Array4<F>,
    eps: &Array4<F>,
    t: &[f64],
    schedule: &DiffusionSchedule,
) -> Result<Array4<F>> {
    per_sample_combine(eps, x0, t, schedule, |a, s| (a, -s))
}

/// eps = sigma(t) z_t + alpha(t) v
pub fn eps_from_v<F: Scalar>(
    z_t: &Array4<F>,
    v: &Array4<F>,
    t: &[f64],
    schedule: &DiffusionSchedule,
) -> Result<Array4<F>> {
    per_sample_combine(z_t, v, t, schedule, |a, s| (s, a))
}

/// v_uncond + w (v_cond - v_uncond)
pub fn cfg_combine<F: Scalar>(
    v_cond: &Array4<F>,
    v_uncond: &Array4<F>,
    w: f64,
) -> Result<Array4<F>> {
    check_same_shape(v_cond, v_uncond, "cfg_combine")?;
    if !(w >= 0.0) {
        return Err(VtoError::RejectedInput(format!(
            "guidance weight must be >= 0, got {w}"
        )));
    }
    let wf = F::cast(w);
    let mut out = v_uncond.clone();
    ndarray::Zip::from(&mut out).and(v_cond).for_each(|ue, &ce| {
        *ue = *ue + wf * (ce - *ue);
    });
    Ok(out)
}

/// A model that predicts v given the noisy image, per-sample time and
/// conditioning. Implemented by the UDiT network and by test oracles.
pub trait Denoiser<F: Scalar> {
    fn predict_v(&self, z_t: &Array4<F>, t: &[f64], cond: &CondBatch<F>) -> Result<Array4<F>>;
}

/// Draws the per-sample times and the noise tensor used by `training_loss`
/// for a given seed; exposed so the trainer and tests reproduce the exact
/// same draw.
pub fn draw_t_eps<F: Scalar>(
    seed: u64,
    shape: (usize, usize, usize, usize),
    schedule: &DiffusionSchedule,
) -> (Vec<f64>, Array4<F>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = shape.0;
    let t: Vec<f64> = (0..b)
        .map(|_| {
            use rand::Rng;
            rng.gen_range(schedule.t_min..schedule.t_max)
        })
        .collect();
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<F> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            F::cast(z)
        })
        .collect();
    let eps = Array4::from_shape_vec(shape, v).unwrap();
    (t, eps)
}

/// L2 loss in eps-space: corrupts x0 with seeded (t, eps), asks the model
/// for v, converts to eps and returns the mean squared error. Deterministic
/// for a fixed seed.
pub fn training_loss<F: Scalar>(
    model: &dyn Denoiser<F>,
    x0: &Array4<F>,
    cond: &CondBatch<F>,
    rng_seed: u64,
    schedule: &DiffusionSchedule,
) -> Result<f64> {
    let (t, eps) = draw_t_eps::<F>(rng_seed, x0.dim(), schedule);
    let z_t = corrupt(x0, &eps, &t, schedule)?;
    let v_hat = model.predict_v(&z_t, &t, cond)?;
    let eps_hat = eps_from_v(&z_t, &v_hat, &t, schedule)?;
    let n = eps.len() as f64;
    let loss = eps_hat
        .iter()
        .zip(eps.iter())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if !loss.is_finite() {
        return Err(VtoError::Numerical(format!(
            "non-finite training loss at t={t:?}"
        )));
    }
    Ok(loss)
}

fn randn4<F: Scalar>(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<F> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<F> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::cast(z)
        })
        .collect();
    Array4::from_shape_vec(shape, v).unwrap()
}

fn clip_unit<F: Scalar>(x: &mut Array4<F>) {
    let lo = F::cast(-1.0);
    let hi = F::cast(1.0);
    x.mapv_inplace(|e| e.max(lo).min(hi));
}

/// DDPM ancestral sampling over a uniform descending time grid with
/// classifier-free guidance. The model is evaluated twice per step
/// (conditional and null-conditioned). Deterministic for a fixed seed.
pub fn ancestral_sample<F: Scalar>(
    model: &dyn Denoiser<F>,
    cond_samples: &[TryOnConditioning<F>],
    guidance_weight: f64,
    num_steps: usize,
    rng_seed: u64,
    schedule: &DiffusionSchedule,
) -> Result<Array4<F>> {
    if num_steps < 1 {
        return Err(VtoError::RejectedInput("num_steps must be >= 1".into()));
    }
    let cond = CondBatch::from_samples(cond_samples)?;
    let null_samples: Vec<TryOnConditioning<F>> =
        cond_samples.iter().map(null_conditioning).collect();
    let null_cond = CondBatch::from_samples(&null_samples)?;

    let b = cond_samples.len();
    let (h, w) = (cond_samples[0].height(), cond_samples[0].width());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut z = randn4::<F>((b, h, w, 3), &mut rng);

    let grid: Vec<f64> = (0..=num_steps)
        .map(|i| {
            schedule.t_max + (schedule.t_min - schedule.t_max) * i as f64 / num_steps as f64
        })
        .collect();

    for i in 0..num_steps {
        let t = grid[i];
        let s = grid[i + 1];
        let t_vec = vec![t; b];
        let v_c = model.predict_v(&z, &t_vec, &cond)?;
        let v_u = model.predict_v(&z, &t_vec, &null_cond)?;
        let v = cfg_combine(&v_c, &v_u, guidance_weight)?;
        let mut x0 = x0_from_v(&z, &v, &t_vec, schedule)?;
        clip_unit(&mut x0);

        if i == num_steps - 1 {
            z = x0;
            break;
        }

        let (alpha_t, sigma_t) = schedule.coefficients(t)?;
        let (alpha_s, sigma_s) = schedule.coefficients(s)?;
        // posterior q(z_s | z_t, x0) of the variance-preserving process
        let alpha_ts = alpha_t / alpha_s;
        let sigma2_ts = sigma_t * sigma_t - alpha_ts * alpha_ts * sigma_s * sigma_s;
        let sigma_t2 = sigma_t * sigma_t;
        let cz = alpha_ts * sigma_s * sigma_s / sigma_t2;
        let cx = alpha_s * sigma2_ts / sigma_t2;
        let var = (sigma2_ts * sigma_s * sigma_s / sigma_t2).max(0.0);
        let std = var.sqrt();

        let noise = randn4::<F>((b, h, w, 3), &mut rng);
        let (czf, cxf, stdf) = (F::cast(cz), F::cast(cx), F::cast(std));
        ndarray::Zip::from(&mut z)
            .and(&x0)
            .and(&noise)
            .for_each(|ze, &xe, &ne| {
                *ze = *ze * czf + xe * cxf + ne * stdf;
            });
        if z.iter().any(|e| !e.as_f64().is_finite()) {
            return Err(VtoError::Numerical(format!(
                "non-finite sampler state at step {i}"
            )));
        }
    }
    Ok(z)
}

/// Test oracle: always predicts the exact v that reconstructs a fixed
/// target image.
pub struct OracleDenoiser<F: Scalar> {
    pub target: Array4<F>,
    pub schedule: DiffusionSchedule,
    /// Constant added to the oracle's v output.
    pub bias: f64,
}

impl<F: Scalar> Denoiser<F> for OracleDenoiser<F> {
    fn predict_v(&self, z_t: &Array4<F>, t: &[f64], _cond: &CondBatch<F>) -> Result<Array4<F>> {
        // From z = alpha x0 + sigma eps: eps = (z - alpha x0) / sigma,
        // then v = alpha eps - sigma x0.
        check_same_shape(z_t, &self.target, "oracle target")?;
        let mut out = z_t.clone();
        for (bi, &ti) in t.iter().enumerate() {
            let (alpha, sigma) = self.schedule.coefficients(ti)?;
            let xs = self.target.index_axis(ndarray::Axis(0), bi);
            let mut os = out.index_axis_mut(ndarray::Axis(0), bi);
            let (af, sf) = (F::cast(alpha), F::cast(sigma));
            let bf = F::cast(self.bias);
            ndarray::Zip::from(&mut os).and(&xs).for_each(|ze, &xe| {
                let eps = (*ze - af * xe) / sf;
                *ze = af * eps - sf * xe + bf;
            });
        }
        Ok(out)
    }
}
