//! Cosine noise schedule, forward noising, and DDIM / ancestral sampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    /// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine rule `ᾱ_t = f(t)/f(0)`, `f(t) = cos²(((t/T)+s)/(1+s)·π/2)`, with
    /// per-step β clipped at 0.999.
    pub fn cosine(t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for t in 1..=t_max {
            let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha_bar })
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        let ok = alpha_bar.len() >= 2
            && alpha_bar[0] == 1.0
            && alpha_bar.windows(2).all(|w| w[1] < w[0])
            && alpha_bar[1..].iter().all(|&a| a > 0.0);
        if !ok {
            return Err(Error::Config(
                "ᾱ must start at 1, stay positive, and strictly decrease".into(),
            ));
        }
        Ok(Self { alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::contract(format!(
                "timestep {t} outside 1..={}",
                self.t_max()
            )));
        }
        Ok(())
    }

    /// `steps` uniformly strided timesteps, descending from `T`.
    pub fn sub_schedule(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.t_max();
        if steps == 0 || steps > t_max {
            return Err(Error::contract(format!(
                "{steps} sampling steps with T = {t_max}"
            )));
        }
        Ok((1..=steps).rev().map(|k| k * t_max / steps).collect())
    }
}

/// `√ᾱ_t·z + √(1−ᾱ_t)·ε`.
pub fn add_noise(z: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    noise_with(z, schedule.alpha_bar(t), eps)
}

/// Forward noising at an explicit signal level.
pub fn noise_with(z: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if z.shape() != eps.shape() {
        return Err(Error::dim(
            "add_noise",
            format!("{:?} vs {:?}", z.shape(), eps.shape()),
        ));
    }
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (a * x as f64 + s * e as f64) as f32)
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z as f32
    })
}

/// Noise prediction for a batch of noisy latents `[B, L, d]`.
pub trait NoisePredictor {
    /// `conditional = false` requests the null-condition branch.
    fn predict(&mut self, z_t: &Tensor, ts: &[usize], conditional: bool) -> Result<Tensor>;

    /// Map a clean-latent estimate into the data range; used when
    /// `SamplerConfig::clip` is set.
    fn project(&self, x0: &Tensor) -> Result<Tensor> {
        Ok(x0.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    /// 0 gives deterministic DDIM; 1 gives ancestral sampling.
    pub eta: f64,
    /// Project each ẑ₀ into the data range and re-derive the noise estimate.
    pub clip: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 28,
            guidance: 1.0,
            eta: 0.0,
            clip: false,
        }
    }
}

/// Guided noise estimate; with unit guidance only the conditional branch runs.
pub fn guided_noise(
    pred: &mut dyn NoisePredictor,
    z: &Tensor,
    ts: &[usize],
    guidance: f64,
) -> Result<Tensor> {
    let cond = pred.predict(z, ts, true)?;
    if guidance == 1.0 {
        return Ok(cond);
    }
    let uncond = pred.predict(z, ts, false)?;
    let data = uncond
        .data()
        .iter()
        .zip(cond.data())
        .map(|(&u, &c)| (u as f64 + guidance * (c as f64 - u as f64)) as f32)
        .collect();
    Tensor::new(cond.shape().to_vec(), data)
}

/// Clean-latent estimate `ẑ₀` implied by a noise estimate.
pub fn estimate_clean(z_t: &Tensor, eps: &Tensor, ab_t: f64) -> Tensor {
    let (sa, sn) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let data: Vec<f32> = z_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| ((z as f64 - sn * e as f64) / sa) as f32)
        .collect();
    Tensor::from_fn(z_t.shape(), |i| data[i])
}

/// Noise estimate consistent with `z_t` and a clean-latent estimate.
pub fn implied_noise(z_t: &Tensor, x0: &Tensor, ab_t: f64) -> Tensor {
    let (sa, sn) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let data: Vec<f32> = z_t
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&z, &x)| ((z as f64 - sa * x as f64) / sn) as f32)
        .collect();
    Tensor::from_fn(z_t.shape(), |i| data[i])
}

/// Re-noise `ẑ₀` to `ᾱ_prev` along `eps`, adding fresh noise when `eta > 0`.
pub fn renoise(
    x0: &Tensor,
    eps: &Tensor,
    ab_t: f64,
    ab_prev: f64,
    eta: f64,
    rng: &mut impl Rng,
) -> Tensor {
    let sigma = if eta > 0.0 && ab_prev < 1.0 {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))
            .max(0.0)
            .sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let data: Vec<f32> = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| {
            let mut v = ab_prev.sqrt() * x as f64 + dir * e as f64;
            if sigma > 0.0 {
                let n: f64 = StandardNormal.sample(rng);
                v += sigma * n;
            }
            v as f32
        })
        .collect();
    Tensor::from_fn(x0.shape(), |i| data[i])
}

/// One update from `ᾱ_t` to `ᾱ_prev` given the noise estimate.
/// Returns `(z_prev, ẑ₀)`.
pub fn ddim_update(
    z_t: &Tensor,
    eps: &Tensor,
    ab_t: f64,
    ab_prev: f64,
    eta: f64,
    rng: &mut impl Rng,
) -> (Tensor, Tensor) {
    let x0 = estimate_clean(z_t, eps, ab_t);
    (renoise(&x0, eps, ab_t, ab_prev, eta, rng), x0)
}

/// Run the reverse process from pure noise `[B, L, d]`; returns final tokens.
pub fn sample_latents(
    pred: &mut dyn NoisePredictor,
    schedule: &NoiseSchedule,
    shape: &[usize],
    cfg: SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let ts = schedule.sub_schedule(cfg.steps)?;
    let mut z = gaussian(shape, rng);
    let b = shape[0];
    for (i, &t) in ts.iter().enumerate() {
        let (ab_t, ab_prev) = (
            schedule.alpha_bar(t),
            schedule.alpha_bar(ts.get(i + 1).copied().unwrap_or(0)),
        );
        let mut eps = guided_noise(pred, &z, &vec![t; b], cfg.guidance)?;
        let mut x0 = estimate_clean(&z, &eps, ab_t);
        if cfg.clip {
            x0 = pred.project(&x0)?;
            eps = implied_noise(&z, &x0, ab_t);
        }
        z = renoise(&x0, &eps, ab_t, ab_prev, cfg.eta, rng);
    }
    Ok(z)
}
