//! Mixture of global and local experts: per-component expert MLPs, a
//! timestep-aware gating network, and gate-weighted fusion into the mask
//! condition embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_tensor, Init, Linear, TimeEmbedder};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingMode {
    /// One weight per expert per token.
    Matrix,
    /// One weight per expert, shared by all tokens.
    Scalar,
    /// Free learned weights, independent of the input and the timestep.
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    Global,
    Local,
    Both,
}

impl Composition {
    /// Indices of the active experts among `0..=n`.
    pub fn experts(self, n: usize) -> std::ops::Range<usize> {
        match self {
            Composition::Global => 0..1,
            Composition::Local => 1..n + 1,
            Composition::Both => 0..n + 1,
        }
    }
}

/// Residual token-wise MLP `x + W2·gelu(W1·x)` with `W2` zero at init.
#[derive(Clone, Debug)]
pub struct Expert {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Expert {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fc1.param_ids();
        ids.extend(self.fc2.param_ids());
        ids
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Expert 0 sees the global mask; expert `i` sees binary component `i`.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub experts: Vec<Expert>,
}

impl ExpertBank {
    pub fn new(
        store: &mut ParamStore,
        n_classes: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let experts = (0..=n_classes)
            .map(|i| {
                let name = format!("mogle.expert{i}");
                Ok(Expert {
                    fc1: Linear::new(
                        store,
                        &format!("{name}.fc1"),
                        dim,
                        2 * dim,
                        true,
                        Init::FanIn,
                        rng,
                    )?,
                    fc2: Linear::new(
                        store,
                        &format!("{name}.fc2"),
                        2 * dim,
                        dim,
                        true,
                        Init::Zero,
                        rng,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Apply experts `which` to the matching sequences of `seqs` `[B, n+1, L, d]`;
    /// returns `[B, which.len(), L, d]`.
    pub fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seqs: Var,
        which: std::ops::Range<usize>,
    ) -> Result<Var> {
        let s = g.shape(seqs).to_vec();
        if s.len() != 4 || s[1] != self.len() || which.end > self.len() || which.is_empty() {
            return Err(Error::dim(
                "apply_experts",
                format!(
                    "{} experts, sequences {s:?}, selection {which:?}",
                    self.len()
                ),
            ));
        }
        let mut outs = Vec::with_capacity(which.len());
        for i in which {
            let x = g.slice(seqs, 1, i, i + 1)?;
            outs.push(self.experts[i].forward(g, store, x)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat(&outs, 1)
        }
    }
}

#[derive(Clone, Debug)]
pub struct GatingNet {
    pub mode: GatingMode,
    pub time: TimeEmbedder,
    pub fc1: Linear,
    pub fc2: Linear,
    pub static_logits: ParamId,
    pub n_experts: usize,
}

impl GatingNet {
    pub fn new(
        store: &mut ParamStore,
        mode: GatingMode,
        n_classes: usize,
        dim: usize,
        max_t: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let e = n_classes + 1;
        Ok(Self {
            mode,
            time: TimeEmbedder::new(store, "mogle.gate.time", dim, max_t, rng)?,
            fc1: Linear::new(
                store,
                "mogle.gate.fc1",
                3 * dim,
                dim,
                true,
                Init::FanIn,
                rng,
            )?,
            fc2: Linear::new(store, "mogle.gate.fc2", dim, e, true, Init::Zero, rng)?,
            static_logits: store.add("mogle.gate.static_logits", Tensor::zeros(&[e]))?,
            n_experts: e,
        })
    }

    /// Parameters the current mode actually reads.
    pub fn active_ids(&self) -> Vec<ParamId> {
        match self.mode {
            GatingMode::Static => vec![self.static_logits],
            _ => {
                let mut ids = self.time.proj.param_ids();
                ids.extend(self.fc1.param_ids());
                ids.extend(self.fc2.param_ids());
                ids
            }
        }
    }

    /// Unnormalised scores `[B, L, n+1]` (constant along L for scalar and
    /// static modes).
    pub fn logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_t: Var,
        ts: &[usize],
        global: Var,
    ) -> Result<Var> {
        let s = g.shape(z_t).to_vec();
        let (b, l, d) = match s[..] {
            [b, l, d] => (b, l, d),
            _ => return Err(Error::dim("compute_gates", format!("noisy tokens {s:?}"))),
        };
        if g.shape(global) != s.as_slice() || ts.len() != b {
            return Err(Error::dim(
                "compute_gates",
                format!(
                    "noisy {s:?}, global {:?}, {} timesteps",
                    g.shape(global),
                    ts.len()
                ),
            ));
        }
        let e = self.n_experts;
        let zeros = g.constant(Tensor::zeros(&[b, l, e]));
        match self.mode {
            GatingMode::Static => {
                let p = g.param(store, self.static_logits);
                g.add(zeros, p)
            }
            GatingMode::Matrix | GatingMode::Scalar => {
                let temb = self.time.forward(g, store, ts)?;
                let temb = g.reshape(temb, &[b, 1, d])?;
                let base = g.constant(Tensor::zeros(&[b, l, d]));
                let temb = g.add(base, temb)?;
                let feats = g.concat(&[z_t, global, temb], 2)?;
                let h = self.fc1.forward(g, store, feats)?;
                let h = g.gelu(h);
                let logits = self.fc2.forward(g, store, h)?;
                if self.mode == GatingMode::Matrix {
                    return Ok(logits);
                }
                let pooled = g.mean(logits, Some(1))?;
                let pooled = g.reshape(pooled, &[b, 1, e])?;
                g.add(zeros, pooled)
            }
        }
    }

    /// Per-token simplex weights `[B, L, n+1]`.
    pub fn compute_gates<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_t: Var,
        ts: &[usize],
        global: Var,
    ) -> Result<Var> {
        let logits = self.logits(g, store, z_t, ts, global)?;
        g.softmax(logits, 2)
    }
}

/// `C[b, ℓ] = Σ_i w[b, ℓ, i] · outputs[b, i, ℓ]` for weights `[B, L, E]` and
/// outputs `[B, E, L, d]`.
pub fn fuse<T: Real>(g: &mut Graph<T>, weights: Var, outputs: Var) -> Result<Var> {
    let (ws, os) = (g.shape(weights).to_vec(), g.shape(outputs).to_vec());
    let ok = ws.len() == 3 && os.len() == 4 && ws[0] == os[0] && ws[1] == os[2] && ws[2] == os[1];
    if !ok {
        return Err(Error::dim(
            "fuse",
            format!("weights {ws:?} vs outputs {os:?}"),
        ));
    }
    let (b, l, e) = (ws[0], ws[1], ws[2]);
    let w = g.reshape(weights, &[b, l, e, 1])?;
    let o = g.permute(outputs, &[0, 2, 1, 3])?;
    let prod = g.mul(o, w)?;
    g.sum(prod, Some(2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MogleConfig {
    pub composition: Composition,
    pub gating: GatingMode,
    /// When false every expert is the identity map.
    pub experts: bool,
}

impl Default for MogleConfig {
    fn default() -> Self {
        Self {
            composition: Composition::Both,
            gating: GatingMode::Matrix,
            experts: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mogle {
    pub cfg: MogleConfig,
    pub bank: ExpertBank,
    pub gate: GatingNet,
    pub n_classes: usize,
}

/// Forward products kept for inspection.
pub struct MogleOutput {
    pub cond: Var,
    /// `[B, L, E]` over the active experts, or `None` for global-only.
    pub weights: Option<Var>,
}

impl Mogle {
    pub fn new(
        store: &mut ParamStore,
        cfg: MogleConfig,
        n_classes: usize,
        dim: usize,
        max_t: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            bank: ExpertBank::new(store, n_classes, dim, rng)?,
            gate: GatingNet::new(store, cfg.gating, n_classes, dim, max_t, rng)?,
            cfg,
            n_classes,
        })
    }

    pub fn set_config(&mut self, cfg: MogleConfig) {
        self.gate.mode = cfg.gating;
        self.cfg = cfg;
    }

    /// Parameters that receive gradients under the current configuration.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if self.cfg.experts {
            for i in self.cfg.composition.experts(self.n_classes) {
                ids.extend(self.bank.experts[i].param_ids());
            }
        }
        if self.cfg.composition != Composition::Global {
            ids.extend(self.gate.active_ids());
        }
        ids
    }

    /// Mask condition `[B, L, d]` from component tokens `[B, n+1, L, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
        z_t: Var,
        ts: &[usize],
    ) -> Result<MogleOutput> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 4 || s[1] != self.n_classes + 1 {
            return Err(Error::dim(
                "mogle",
                format!(
                    "expected [B, {}, L, d] component tokens, got {s:?}",
                    self.n_classes + 1
                ),
            ));
        }
        let (b, l, d) = (s[0], s[2], s[3]);
        let which = self.cfg.composition.experts(self.n_classes);
        let outs = if self.cfg.experts {
            self.bank.apply(g, store, tokens, which.clone())?
        } else {
            g.slice(tokens, 1, which.start, which.end)?
        };
        if self.cfg.composition == Composition::Global {
            let cond = g.reshape(outs, &[b, l, d])?;
            return Ok(MogleOutput {
                cond,
                weights: None,
            });
        }
        let global = g.slice(tokens, 1, 0, 1)?;
        let global = g.reshape(global, &[b, l, d])?;
        let logits = self.gate.logits(g, store, z_t, ts, global)?;
        let logits = if which.len() == self.n_classes + 1 {
            logits
        } else {
            g.slice(logits, 2, which.start, which.end)?
        };
        let weights = g.softmax(logits, 2)?;
        let cond = fuse(g, weights, outs)?;
        Ok(MogleOutput {
            cond,
            weights: Some(weights),
        })
    }
}

/// Randomise every parameter in `ids` (test and audit helper).
pub fn randomize(store: &mut ParamStore, ids: &[ParamId], std: f32, rng: &mut impl Rng) {
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = init_tensor(&shape, Init::Normal(std), rng);
    }
}
