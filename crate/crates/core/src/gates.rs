//! Per-token gate weight maps across denoising timesteps.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::diffusion::{add_noise, gaussian};
use crate::error::{Error, Result};
use crate::imageio::write_pgm;
use crate::model::Model;
use crate::numerics::Tensor;

#[derive(Clone, Debug)]
pub struct GateMaps {
    pub timesteps: Vec<usize>,
    /// Expert index (into `0..=n`) of each weight column.
    pub experts: Vec<usize>,
    /// One `[L, E]` weight matrix per timestep.
    pub weights: Vec<Tensor>,
    pub grid: (usize, usize),
}

/// Gate weights for one sample's noised latents at each timestep; the same
/// noise draw is reused across timesteps.
pub fn gate_maps(
    model: &Model,
    sample: &Sample,
    timesteps: &[usize],
    seed: u64,
) -> Result<GateMaps> {
    if timesteps.is_empty() {
        return Err(Error::contract("no timesteps requested"));
    }
    let z = model.latents(&sample.image)?;
    let eps = gaussian(z.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
    let tokens = model.mask_tokens(&sample.mask)?;
    let tokens =
        tokens
            .clone()
            .reshaped(&[1, tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]])?;
    let (l, d) = (z.shape()[0], z.shape()[1]);
    let mut weights = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        let zt = add_noise(&z, t, &eps, &model.schedule)?.reshaped(&[1, l, d])?;
        let w = model
            .gate_weights(&zt, &[t], &tokens)?
            .ok_or_else(|| Error::Config("this configuration has no gate".into()))?;
        let e = w.shape()[2];
        weights.push(w.reshaped(&[l, e])?);
    }
    Ok(GateMaps {
        timesteps: timesteps.to_vec(),
        experts: model
            .mogle
            .cfg
            .composition
            .experts(model.mogle.n_classes)
            .collect(),
        weights,
        grid: model.codec.grid(),
    })
}

fn variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    v.map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

impl GateMaps {
    pub fn column(&self, step: usize, e: usize) -> Vec<f64> {
        let w = &self.weights[step];
        let ne = w.shape()[1];
        w.data()
            .iter()
            .skip(e)
            .step_by(ne)
            .map(|&v| v as f64)
            .collect()
    }

    /// Largest across-token variance of any expert's map at any timestep.
    pub fn token_variance(&self) -> f64 {
        let ne = self.experts.len();
        (0..self.timesteps.len())
            .flat_map(|s| (0..ne).map(move |e| (s, e)))
            .map(|(s, e)| variance(self.column(s, e).into_iter()))
            .fold(0.0, f64::max)
    }

    /// Largest across-timestep variance of any single weight.
    pub fn time_variance(&self) -> f64 {
        let n = self.weights[0].numel();
        (0..n)
            .map(|i| variance(self.weights.iter().map(move |w| w.data()[i] as f64)))
            .fold(0.0, f64::max)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("t,expert,token,weight\n");
        for (k, &t) in self.timesteps.iter().enumerate() {
            for (j, &e) in self.experts.iter().enumerate() {
                for (tok, w) in self.column(k, j).into_iter().enumerate() {
                    let _ = writeln!(s, "{t},{e},{tok},{w:.8}");
                }
            }
        }
        s
    }

    /// One PGM per (timestep, expert), weights scaled to 0..=255, plus
    /// `gates.csv`. Returns the written grid paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let (gh, gw) = self.grid;
        let mut paths = Vec::new();
        for (k, &t) in self.timesteps.iter().enumerate() {
            for (j, &e) in self.experts.iter().enumerate() {
                let bytes: Vec<u8> = self
                    .column(k, j)
                    .into_iter()
                    .map(|w| (w.clamp(0.0, 1.0) * 255.0).round() as u8)
                    .collect();
                let p = dir.join(format!("gate_t{t:04}_expert{e}.pgm"));
                write_pgm(&p, gh, gw, &bytes)?;
                paths.push(p);
            }
        }
        std::fs::write(dir.join("gates.csv"), self.csv())?;
        Ok(paths)
    }
}
