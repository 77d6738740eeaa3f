//! Diffusion transformer over the joint sequence `[image ∥ mask ∥ prompt]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PromptTokens, PROMPT_LEN, VOCAB_SIZE};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{init_tensor, Init, LayerNorm, Linear, TimeEmbedder};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Segment ids added to every token of the joint sequence.
const SEG_IMAGE: usize = 0;
const SEG_MASK: usize = 1;
const SEG_PROMPT: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub image_tokens: usize,
    pub prompt_tokens: usize,
    pub vocab: usize,
    pub mlp_ratio: usize,
    pub max_t: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            dim: 48,
            heads: 4,
            image_tokens: 64,
            prompt_tokens: PROMPT_LEN,
            vocab: VOCAB_SIZE,
            mlp_ratio: 4,
            max_t: 1000,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.blocks == 0
            || self.image_tokens == 0
            || self.prompt_tokens == 0
            || self.mlp_ratio == 0
        {
            return Err(Error::Config("denoiser extents must be positive".into()));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        2 * self.image_tokens + self.prompt_tokens
    }
}

/// Training phase; selects which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    /// Time modulation: shift, scale and gate for each sub-layer.
    pub ada: Linear,
}

impl Block {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &DenoiserConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.dim;
        let h = d * cfg.mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            q: Linear::new(
                store,
                &format!("{name}.attn.q"),
                d,
                d,
                true,
                Init::FanIn,
                rng,
            )?,
            k: Linear::new(
                store,
                &format!("{name}.attn.k"),
                d,
                d,
                true,
                Init::FanIn,
                rng,
            )?,
            v: Linear::new(
                store,
                &format!("{name}.attn.v"),
                d,
                d,
                true,
                Init::FanIn,
                rng,
            )?,
            o: Linear::new(
                store,
                &format!("{name}.attn.o"),
                d,
                d,
                true,
                Init::FanIn,
                rng,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            fc1: Linear::new(
                store,
                &format!("{name}.mlp.fc1"),
                d,
                h,
                true,
                Init::FanIn,
                rng,
            )?,
            fc2: Linear::new(
                store,
                &format!("{name}.mlp.fc2"),
                h,
                d,
                true,
                Init::FanIn,
                rng,
            )?,
            ada: Linear::new(store, &format!("{name}.ada"), d, 6 * d, true, Init::Zero, rng)?,
        })
    }

    fn attention_maps(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    fn attention_maps_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm1.param_ids();
        ids.extend(self.norm2.param_ids());
        for l in [&self.q, &self.k, &self.v, &self.o, &self.fc1, &self.fc2, &self.ada] {
            ids.extend(l.param_ids());
        }
        ids
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Var,
        heads: usize,
    ) -> Result<Var> {
        let (b, s, d) = match *g.shape(x) {
            [b, s, d] => (b, s, d),
            _ => {
                return Err(Error::dim(
                    "block",
                    format!("expected [B, S, d], got {:?}", g.shape(x)),
                ))
            }
        };
        let dh = d / heads;
        let m = self.ada.forward(g, store, cond)?;
        let mut parts = Vec::with_capacity(6);
        for i in 0..6 {
            parts.push(g.slice(m, 2, i * d, (i + 1) * d)?);
        }
        let h = self.norm1.forward(g, store, x)?;
        let h = modulate(g, h, parts[0], parts[1])?;
        let split = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, s, heads, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[b * heads, s, dh])
        };
        let q = self.q.forward(g, store, h)?;
        let q = split(g, q)?;
        let k = self.k.forward(g, store, h)?;
        let k = split(g, k)?;
        let v = self.v.forward(g, store, h)?;
        let v = split(g, v)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.reshape(ctx, &[b, heads, s, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, s, d])?;
        let a = self.o.forward(g, store, ctx)?;
        let a = g.mul(a, parts[2])?;
        let x = g.add(x, a)?;

        let h = self.norm2.forward(g, store, x)?;
        let h = modulate(g, h, parts[3], parts[4])?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        let h = g.mul(h, parts[5])?;
        g.add(x, h)
    }
}

/// `h·(1 + scale) + shift`.
fn modulate<T: Real>(g: &mut Graph<T>, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let scaled = g.mul(h, scale)?;
    let h = g.add(h, scaled)?;
    g.add(h, shift)
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub input: Linear,
    pub time: TimeEmbedder,
    pub prompt_table: ParamId,
    pub positions: ParamId,
    pub segments: ParamId,
    pub blocks: Vec<Block>,
    pub norm_out: LayerNorm,
    /// Time modulation (shift, scale) of the output norm.
    pub ada_out: Linear,
    pub output: Linear,
    /// Supplies `ᾱ_t` for the output mixing.
    pub schedule: NoiseSchedule,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, cfg: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let input = Linear::new(store, "dit.input", d, d, true, Init::FanIn, rng)?;
        let time = TimeEmbedder::new(store, "dit.time", d, cfg.max_t, rng)?;
        let prompt_table = store.add(
            "dit.prompt_table",
            init_tensor(&[cfg.vocab, d], Init::Normal(0.5), rng),
        )?;
        let positions = store.add(
            "dit.positions",
            init_tensor(
                &[cfg.image_tokens + cfg.prompt_tokens, d],
                Init::Normal(0.1),
                rng,
            ),
        )?;
        let segments = store.add("dit.segments", init_tensor(&[3, d], Init::Normal(0.1), rng))?;
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(store, &format!("dit.block{i}"), &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm_out = LayerNorm::new(store, "dit.norm_out", d)?;
        let ada_out = Linear::new(store, "dit.ada_out", d, 2 * d, true, Init::Zero, rng)?;
        let output = Linear::new(store, "dit.output", d, d, true, Init::FanIn, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            input,
            time,
            prompt_table,
            positions,
            segments,
            blocks,
            norm_out,
            ada_out,
            output,
            schedule: NoiseSchedule::cosine(cfg.max_t)?,
        })
    }

    /// Adapters on the Q, K, V and O maps of every block.
    pub fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f32,
        rng: &mut impl Rng,
    ) -> Result<()> {
        for b in &mut self.blocks {
            for l in b.attention_maps_mut() {
                l.attach_lora(store, rank, alpha, rng)?;
            }
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.q.lora.is_some())
    }

    pub fn lora_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.attention_maps().into_iter().flat_map(|l| l.lora_ids()))
            .collect()
    }

    /// Σ over adapted maps of `rank·(d_in + d_out)`.
    pub fn lora_numel(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.attention_maps())
            .filter_map(|l| l.lora.as_ref().map(|a| a.rank * (l.d_in + l.d_out)))
            .sum()
    }

    /// Backbone weights plus the denoiser's time embedder and prompt table.
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = self.input.param_ids();
        ids.extend(self.time.proj.param_ids());
        ids.extend([self.prompt_table, self.positions, self.segments]);
        for b in &self.blocks {
            ids.extend(b.backbone_ids());
        }
        ids.extend(self.norm_out.param_ids());
        ids.extend(self.ada_out.param_ids());
        ids.extend(self.output.param_ids());
        ids
    }

    /// `[B, L′, d]` prompt embeddings.
    pub fn embed_prompt<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prompts: &[PromptTokens],
    ) -> Result<Var> {
        let ids: Vec<usize> = prompts.iter().flat_map(|p| p.ids()).collect();
        if let Some(bad) = ids.iter().find(|&&i| i >= self.cfg.vocab) {
            return Err(Error::contract(format!("token {bad} outside vocabulary")));
        }
        let table = g.param(store, self.prompt_table);
        let e = g.gather(table, &ids)?;
        g.reshape(e, &[prompts.len(), self.cfg.prompt_tokens, self.cfg.dim])
    }

    /// Predicted noise `[B, L, d]` for noisy tokens `z_t` at timesteps `ts`,
    /// given prompt embeddings `[B, L′, d]` and mask condition `[B, L, d]`.
    pub fn predict_noise<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_t: Var,
        ts: &[usize],
        prompt: Var,
        mask_cond: Var,
    ) -> Result<Var> {
        let c = &self.cfg;
        let (l, lp, d) = (c.image_tokens, c.prompt_tokens, c.dim);
        let b = ts.len();
        for (what, v, want) in [
            ("noisy tokens", z_t, [b, l, d]),
            ("mask condition", mask_cond, [b, l, d]),
            ("prompt", prompt, [b, lp, d]),
        ] {
            if g.shape(v) != want {
                return Err(Error::contract(format!(
                    "{what} has shape {:?}, expected {want:?}",
                    g.shape(v)
                )));
            }
        }
        let x = self.input.forward(g, store, z_t)?;
        let temb = self.time.forward(g, store, ts)?;
        let temb = g.reshape(temb, &[b, 1, d])?;
        let cond = g.gelu(temb);
        let seq = g.concat(&[x, mask_cond, prompt], 1)?;

        let pos_ids: Vec<usize> = (0..l).chain(0..l).chain(l..l + lp).collect();
        let seg_ids: Vec<usize> = [(SEG_IMAGE, l), (SEG_MASK, l), (SEG_PROMPT, lp)]
            .iter()
            .flat_map(|&(s, n)| std::iter::repeat(s).take(n))
            .collect();
        let pos_table = g.param(store, self.positions);
        let pos = g.gather(pos_table, &pos_ids)?;
        let seg_table = g.param(store, self.segments);
        let seg = g.gather(seg_table, &seg_ids)?;
        let extra = g.add(pos, seg)?;
        let mut h = g.add(seq, extra)?;

        for blk in &self.blocks {
            h = blk.forward(g, store, h, cond, c.heads)?;
        }
        let h = g.slice(h, 1, 0, l)?;
        let h = self.norm_out.forward(g, store, h)?;
        let m = self.ada_out.forward(g, store, cond)?;
        let (shift, scale) = (g.slice(m, 2, 0, d)?, g.slice(m, 2, d, 2 * d)?);
        let h = modulate(g, h, shift, scale)?;
        let head = self.output.forward(g, store, h)?;

        // ε̂ = √ᾱ·head + √(1−ᾱ)·z_t
        let ab: Vec<f64> = ts.iter().map(|&t| self.schedule.alpha_bar(t)).collect();
        let coef = |f: fn(f64) -> f64| Tensor::from_fn(&[b, 1, 1], |i| T::of(f(ab[i])));
        let (head_coef, skip_coef) = (g.constant(coef(|a| a.sqrt())), g.constant(coef(|a| (1.0 - a).sqrt())));
        let head = g.mul(head, head_coef)?;
        let skip = g.mul(z_t, skip_coef)?;
        g.add(head, skip)
    }
}

/// Convenience wrapper for one un-recorded forward pass.
pub fn predict_noise_eval(
    model: &Denoiser,
    store: &ParamStore,
    z_t: &Tensor,
    ts: &[usize],
    prompts: &[PromptTokens],
    mask_cond: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::inference();
    let z = g.constant(z_t.clone());
    let m = g.constant(mask_cond.clone());
    let p = model.embed_prompt(&mut g, store, prompts)?;
    let out = model.predict_noise(&mut g, store, z, ts, p, m)?;
    Ok(g.value(out).clone())
}
