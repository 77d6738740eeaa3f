//! Parameterised layers shared by the denoiser and the expert mixture.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const SINUSOID_DIM: usize = 32;

/// Weight initialisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    /// Gaussian with the given standard deviation.
    Normal(f32),
    /// Gaussian with standard deviation `1/sqrt(fan_in)`.
    FanIn,
}

pub fn init_tensor(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor {
    let std = match init {
        Init::Zero => return Tensor::zeros(shape),
        Init::Normal(s) => s,
        Init::FanIn => 1.0 / (shape[0] as f32).sqrt(),
    };
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z as f32
    })
}

/// Low-rank update `x ↦ (alpha/rank)·(x·down)·up` added to a frozen map.
#[derive(Clone, Debug)]
pub struct LoraIds {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub alpha: f32,
}

/// Affine map `x·W + b` over the last axis, with an optional low-rank adapter.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<LoraIds>,
    pub d_in: usize,
    pub d_out: usize,
    name: String,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[d_in, d_out], init, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            lora: None,
            d_in,
            d_out,
            name: name.to_string(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Adds `down` (small random) and `up` (zero) factors, so the adapted map
    /// equals the original one until `up` is trained.
    pub fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f32,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::contract(format!(
                "{} already has an adapter",
                self.name
            )));
        }
        if rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        let down = store.add(
            format!("{}.lora_down", self.name),
            init_tensor(&[self.d_in, rank], Init::FanIn, rng),
        )?;
        let up = store.add(
            format!("{}.lora_up", self.name),
            Tensor::zeros(&[rank, self.d_out]),
        )?;
        self.lora = Some(LoraIds {
            down,
            up,
            rank,
            alpha,
        });
        Ok(())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight];
        ids.extend(self.bias);
        ids
    }

    pub fn lora_ids(&self) -> Vec<ParamId> {
        self.lora.iter().flat_map(|l| [l.down, l.up]).collect()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let last = *g.shape(x).last().unwrap_or(&0);
        if last != self.d_in {
            return Err(Error::dim(
                "linear",
                format!(
                    "{} expects last axis {}, got {:?}",
                    self.name,
                    self.d_in,
                    g.shape(x)
                ),
            ));
        }
        let w = g.param(store, self.weight);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = g.param(store, b);
            y = g.add(y, b)?;
        }
        if let Some(l) = &self.lora {
            let (down, up) = (g.param(store, l.down), g.param(store, l.up));
            let h = g.matmul(x, down)?;
            let h = g.matmul(h, up)?;
            let h = g.scale(h, l.alpha as f64 / l.rank as f64);
            y = g.add(y, h)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Sinusoidal features of a timestep: `[sin(t·f_k), cos(t·f_k)]` with
/// geometric frequencies `f_k = 10000^(-k/(dim/2))`.
pub fn sinusoidal(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = 10000f64.powf(-(k as f64) / half as f64);
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    out
}

/// Sinusoidal basis followed by a learned linear map to the model width.
#[derive(Clone, Debug)]
pub struct TimeEmbedder {
    pub proj: Linear,
    pub max_t: usize,
}

impl TimeEmbedder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        max_t: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, name, SINUSOID_DIM, dim, true, Init::FanIn, rng)?,
            max_t,
        })
    }

    pub fn features<T: Real>(&self, ts: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(ts.len() * SINUSOID_DIM);
        for &t in ts {
            if t == 0 || t > self.max_t {
                return Err(Error::contract(format!(
                    "timestep {t} outside 1..={}",
                    self.max_t
                )));
            }
            data.extend(sinusoidal(t, SINUSOID_DIM).into_iter().map(T::of));
        }
        Tensor::new(vec![ts.len(), SINUSOID_DIM], data)
    }

    /// `[B, dim]` embeddings, one row per timestep.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ts: &[usize],
    ) -> Result<Var> {
        let f = g.constant(self.features(ts)?);
        self.proj.forward(g, store, f)
    }
}
