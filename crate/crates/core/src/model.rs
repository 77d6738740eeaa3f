//! The full conditional generator: codec, denoiser and expert mixture sharing
//! one parameter store, plus training and sampling loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::PatchCodec;
use crate::config::RunConfig;
use crate::data::{PromptTokens, Sample};
use crate::diffusion::{
    gaussian, noise_with, sample_latents, NoisePredictor, NoiseSchedule, SamplerConfig,
};
use crate::dit::{Denoiser, Phase};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::mask::{decouple, empty_mask, to_token_inputs, SemanticMask};
use crate::mogle::Mogle;
use crate::numerics::{
    adam_step, AdamConfig, Graph, OptimizerState, ParamId, ParamStore, Real, Tensor, Var,
};

/// The codec is frozen and shared by every run, whatever its seed.
pub const CODEC_SEED: u64 = 42;

/// Seed offsets separating the independent random streams of a run.
pub mod streams {
    pub const PARAMS: u64 = 0x1000;
    pub const LORA: u64 = 0x2000;
    pub const PRETRAIN: u64 = 0x4000;
    pub const FINETUNE: u64 = 0x5000;
    pub const SAMPLE: u64 = 0x6000;
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub phase: Phase,
    pub store: ParamStore,
    pub codec: PatchCodec,
    pub denoiser: Denoiser,
    pub mogle: Mogle,
    pub schedule: NoiseSchedule,
}

impl Model {
    /// Fresh parameters for `cfg`; finetune models carry zero-initialised
    /// adapters.
    pub fn new(cfg: &RunConfig, phase: Phase) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ streams::PARAMS);
        let mut store = ParamStore::new();
        let dcfg = cfg.denoiser();
        let denoiser = Denoiser::new(&mut store, dcfg, &mut rng)?;
        let mogle = Mogle::new(
            &mut store,
            cfg.mogle(),
            cfg.n_classes,
            cfg.token_dim,
            cfg.schedule.t_max,
            &mut rng,
        )?;
        let codec = PatchCodec::new(cfg.image_size, cfg.image_size, cfg.patch_size, CODEC_SEED)?;
        let mut model = Self {
            cfg: cfg.clone(),
            phase: Phase::Pretrain,
            store,
            codec,
            denoiser,
            mogle,
            schedule: NoiseSchedule::cosine(cfg.schedule.t_max)?,
        };
        if phase == Phase::Finetune {
            model.enter_finetune()?;
        }
        model.partition();
        Ok(model)
    }

    /// Attach adapters and switch the trainable partition to finetuning.
    pub fn enter_finetune(&mut self) -> Result<()> {
        if self.phase == Phase::Finetune {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ streams::LORA);
        self.denoiser.attach_lora(
            &mut self.store,
            self.cfg.lora.rank,
            self.cfg.lora.alpha,
            &mut rng,
        )?;
        self.phase = Phase::Finetune;
        self.partition();
        Ok(())
    }

    /// Pretrain: backbone, time embedder and prompt table. Finetune: adapters
    /// plus the experts and gate the configuration actually uses.
    pub fn partition(&mut self) {
        self.store.set_all_trainable(false);
        let ids = self.trainable_set();
        for id in ids {
            self.store.set_trainable(id, true);
        }
    }

    pub fn trainable_set(&self) -> Vec<ParamId> {
        match self.phase {
            Phase::Pretrain => self.denoiser.backbone_ids(),
            Phase::Finetune => {
                let mut ids = self.denoiser.lora_ids();
                ids.extend(self.mogle.trainable_ids());
                ids
            }
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.codec.tokens()
    }

    /// Latent tokens of an image, with pixel values mapped to [-1, 1].
    pub fn latents(&self, img: &Image) -> Result<Tensor> {
        let scaled = Image::new(
            img.height(),
            img.width(),
            img.data().iter().map(|v| 2.0 * v - 1.0).collect(),
        )?;
        self.codec.encode(&scaled)
    }

    pub fn decode_latents(&self, tokens: &Tensor) -> Result<Image> {
        let raw = self.codec.decode_raw(tokens)?;
        Image::new(
            raw.height(),
            raw.width(),
            raw.data()
                .iter()
                .map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
                .collect(),
        )
    }

    /// Project `[B, L, d]` latents onto those of images within [-1, 1].
    pub fn clamp_latents(&self, z: &Tensor) -> Result<Tensor> {
        let shape = z.shape();
        let rows = (0..shape[0])
            .map(|i| {
                let raw = self
                    .codec
                    .decode_raw(&z.rows(i, i + 1).reshaped(&shape[1..])?)?;
                let clamped = Image::new(
                    raw.height(),
                    raw.width(),
                    raw.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
                )?;
                self.codec.encode(&clamped)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&rows)
    }

    /// `[n+1, L, d]` component tokens of a mask.
    pub fn mask_tokens(&self, mask: &SemanticMask) -> Result<Tensor> {
        to_token_inputs(&decouple(mask)?, &self.codec)
    }

    pub fn null_mask_tokens(&self) -> Result<Tensor> {
        self.mask_tokens(&empty_mask(
            self.cfg.image_size,
            self.cfg.image_size,
            self.cfg.mask_palette.clone(),
        ))
    }

    /// Mask condition `[B, L, d]`: zero while pretraining, the expert mixture
    /// afterwards.
    pub fn mask_condition<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Option<Var>,
        z_t: Var,
        ts: &[usize],
    ) -> Result<(Var, Option<Var>)> {
        match (self.phase, tokens) {
            (Phase::Finetune, Some(tok)) => {
                let out = self.mogle.forward(g, store, tok, z_t, ts)?;
                Ok((out.cond, out.weights))
            }
            (Phase::Finetune, None) => Err(Error::contract("finetuned model needs mask tokens")),
            (Phase::Pretrain, _) => {
                let shape = g.shape(z_t).to_vec();
                Ok((g.constant(Tensor::zeros(&shape)), None))
            }
        }
    }

    /// Noise prediction `[B, L, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_t: Var,
        ts: &[usize],
        prompts: &[PromptTokens],
        mask_tokens: Option<Var>,
    ) -> Result<Var> {
        let (cond, _) = self.mask_condition(g, store, mask_tokens, z_t, ts)?;
        let prompt = self.denoiser.embed_prompt(g, store, prompts)?;
        self.denoiser.predict_noise(g, store, z_t, ts, prompt, cond)
    }

    /// Gate weights `[B, L, E]` at the given inputs, if the configuration gates.
    pub fn gate_weights(
        &self,
        z_t: &Tensor,
        ts: &[usize],
        mask_tokens: &Tensor,
    ) -> Result<Option<Tensor>> {
        let mut g = Graph::inference();
        let (z, m) = (g.constant(z_t.clone()), g.constant(mask_tokens.clone()));
        let out = self.mogle.forward(&mut g, &self.store, m, z, ts)?;
        Ok(out.weights.map(|w| g.value(w).clone()))
    }
}

/// Precomputed training tensors for a data split.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub latents: Vec<Tensor>,
    pub mask_tokens: Vec<Tensor>,
    pub prompts: Vec<PromptTokens>,
}

impl TrainSet {
    pub fn new(model: &Model, samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("empty training set"));
        }
        Ok(Self {
            latents: samples
                .iter()
                .map(|s| model.latents(&s.image))
                .collect::<Result<_>>()?,
            mask_tokens: samples
                .iter()
                .map(|s| model.mask_tokens(&s.mask))
                .collect::<Result<_>>()?,
            prompts: samples.iter().map(|s| s.prompt).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// One assembled minibatch after timestep, noise and dropout draws.
#[derive(Clone, Debug)]
pub struct Batch {
    pub latents: Tensor,
    pub noise: Tensor,
    pub noisy: Tensor,
    pub ts: Vec<usize>,
    pub prompts: Vec<PromptTokens>,
    pub mask_tokens: Tensor,
    pub prompt_dropped: Vec<bool>,
    pub mask_dropped: Vec<bool>,
}

/// Draw a batch: per sample a uniform timestep, Gaussian noise, and
/// independent drops of the prompt and of the local mask components (the
/// global mask is always kept).
pub fn draw_batch(
    set: &TrainSet,
    indices: &[usize],
    schedule: &NoiseSchedule,
    drop_prob: f64,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut lat = Vec::with_capacity(indices.len());
    let mut eps = Vec::with_capacity(indices.len());
    let mut noisy = Vec::with_capacity(indices.len());
    let mut toks = Vec::with_capacity(indices.len());
    let (mut ts, mut prompts, mut pd, mut md) = (vec![], vec![], vec![], vec![]);
    for &i in indices {
        let t = rng.random_range(1..=schedule.t_max());
        let z = &set.latents[i];
        let e = gaussian(z.shape(), rng);
        noisy.push(noise_with(z, schedule.alpha_bar(t), &e)?);
        let drop_prompt = rng.random_bool(drop_prob);
        let drop_mask = rng.random_bool(drop_prob);
        let mut m = set.mask_tokens[i].clone();
        if drop_mask {
            let per = m.numel() / m.shape()[0];
            m.data_mut()[per..].fill(0.0);
        }
        prompts.push(if drop_prompt {
            PromptTokens::NULL
        } else {
            set.prompts[i]
        });
        lat.push(z.clone());
        eps.push(e);
        toks.push(m);
        ts.push(t);
        pd.push(drop_prompt);
        md.push(drop_mask);
    }
    Ok(Batch {
        latents: Tensor::stack(&lat)?,
        noise: Tensor::stack(&eps)?,
        noisy: Tensor::stack(&noisy)?,
        ts,
        prompts,
        mask_tokens: Tensor::stack(&toks)?,
        prompt_dropped: pd,
        mask_dropped: md,
    })
}

/// Loss of one batch without updating anything.
pub fn batch_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let mut g = Graph::inference();
    let loss = record_loss(model, &mut g, batch)?;
    Ok(g.value(loss).item() as f64)
}

fn record_loss(model: &Model, g: &mut Graph, batch: &Batch) -> Result<Var> {
    let z = g.constant(batch.noisy.clone());
    let m = g.constant(batch.mask_tokens.clone());
    let pred = model.forward(g, &model.store, z, &batch.ts, &batch.prompts, Some(m))?;
    let target = g.constant(batch.noise.clone());
    g.mse(pred, target)
}

/// Forward, backward and one optimiser update on the trainable partition.
pub fn training_step(
    model: &mut Model,
    opt: &mut OptimizerState<f32>,
    batch: &Batch,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = record_loss(model, &mut g, batch)?;
    let grads = g.backward(loss)?;
    model.store.zero_grads();
    model.store.accumulate_grads(&g, &grads);
    adam_step(&mut model.store, opt)?;
    Ok(g.value(loss).item() as f64)
}

pub fn optimizer(cfg: &RunConfig) -> OptimizerState<f32> {
    OptimizerState::new(AdamConfig {
        lr: cfg.train.lr,
        weight_decay: cfg.train.wd,
        ..AdamConfig::default()
    })
}

/// Train for `steps` steps in the model's current phase. `on_step` sees the
/// 1-based step and the loss.
pub fn train(
    model: &mut Model,
    set: &TrainSet,
    steps: usize,
    mut on_step: impl FnMut(&Model, usize, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    let stream = match model.phase {
        Phase::Pretrain => streams::PRETRAIN,
        Phase::Finetune => streams::FINETUNE,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed ^ stream);
    let mut opt = optimizer(&model.cfg);
    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        let idx: Vec<usize> = (0..model.cfg.train.batch)
            .map(|_| rng.random_range(0..set.len()))
            .collect();
        let batch = draw_batch(
            set,
            &idx,
            &model.schedule,
            model.cfg.train.drop_prob,
            &mut rng,
        )?;
        let loss = training_step(model, &mut opt, &batch)?;
        losses.push(loss);
        on_step(model, step, loss)?;
    }
    Ok(losses)
}

/// Conditions for a batch of generations.
#[derive(Clone, Debug)]
pub struct Conditions {
    pub prompts: Vec<PromptTokens>,
    /// `[B, n+1, L, d]`.
    pub mask_tokens: Tensor,
}

impl Conditions {
    pub fn new(
        model: &Model,
        prompts: &[Option<PromptTokens>],
        masks: &[Option<&SemanticMask>],
    ) -> Result<Self> {
        if prompts.len() != masks.len() || prompts.is_empty() {
            return Err(Error::contract("one prompt and one mask per generation"));
        }
        let null = model.null_mask_tokens()?;
        let toks = masks
            .iter()
            .map(|m| m.map_or_else(|| Ok(null.clone()), |m| model.mask_tokens(m)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompts: prompts
                .iter()
                .map(|p| p.unwrap_or(PromptTokens::NULL))
                .collect(),
            mask_tokens: Tensor::stack(&toks)?,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Adapter exposing a model and fixed conditions to the sampler.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub cond: &'a Conditions,
    null: Conditions,
    pub calls: [usize; 2],
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a Model, cond: &'a Conditions) -> Result<Self> {
        let b = cond.len();
        let null = Conditions::new(model, &vec![None; b], &vec![None; b])?;
        Ok(Self {
            model,
            cond,
            null,
            calls: [0; 2],
        })
    }
}

impl NoisePredictor for ModelPredictor<'_> {
    fn predict(&mut self, z_t: &Tensor, ts: &[usize], conditional: bool) -> Result<Tensor> {
        self.calls[conditional as usize] += 1;
        let c = if conditional { self.cond } else { &self.null };
        let mut g = Graph::inference();
        let z = g.constant(z_t.clone());
        let m = g.constant(c.mask_tokens.clone());
        let out = self
            .model
            .forward(&mut g, &self.model.store, z, ts, &c.prompts, Some(m))?;
        Ok(g.value(out).clone())
    }

    fn project(&self, x0: &Tensor) -> Result<Tensor> {
        self.model.clamp_latents(x0)
    }
}

/// Generate one image per condition; `seed` fixes the initial noise.
pub fn generate(
    model: &Model,
    cond: &Conditions,
    sampler: SamplerConfig,
    seed: u64,
) -> Result<Vec<Image>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ streams::SAMPLE);
    let mut pred = ModelPredictor::new(model, cond)?;
    let shape = [cond.len(), model.n_tokens(), model.cfg.token_dim];
    let z = sample_latents(&mut pred, &model.schedule, &shape, sampler, &mut rng)?;
    (0..cond.len())
        .map(|i| model.decode_latents(&z.rows(i, i + 1).reshaped(&shape[1..])?))
        .collect()
}

/// Generate in chunks of `chunk` conditions to bound memory.
pub fn generate_many(
    model: &Model,
    prompts: &[Option<PromptTokens>],
    masks: &[Option<&SemanticMask>],
    sampler: SamplerConfig,
    seed: u64,
    chunk: usize,
) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(prompts.len());
    for (k, start) in (0..prompts.len()).step_by(chunk.max(1)).enumerate() {
        let end = (start + chunk.max(1)).min(prompts.len());
        let cond = Conditions::new(model, &prompts[start..end], &masks[start..end])?;
        out.extend(generate(
            model,
            &cond,
            sampler,
            seed.wrapping_add(k as u64),
        )?);
    }
    Ok(out)
}

pub fn sampler_config(cfg: &RunConfig) -> SamplerConfig {
    SamplerConfig {
        steps: cfg.sample.steps,
        guidance: cfg.sample.guidance,
        eta: 0.0,
        clip: true,
    }
}
