//! Ablation grids over expert composition, gating mode and expert presence,
//! finetuned from one shared pretrained backbone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_split, Sample, Split};
use crate::dit::Phase;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, FeatureExtractor};
use crate::model::{generate_many, sampler_config, train, Model, TrainSet};
use crate::mogle::{Composition, GatingMode, MogleConfig};

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub table: String,
    pub row: String,
    pub mogle: MogleConfig,
}

fn row(
    table: &str,
    name: &str,
    composition: Composition,
    gating: GatingMode,
    experts: bool,
) -> GridRow {
    GridRow {
        table: table.into(),
        row: name.into(),
        mogle: MogleConfig {
            composition,
            gating,
            experts,
        },
    }
}

/// Expert composition (3 rows), gating variant (3 rows) and the 2×2
/// expert × gating grid, where a disabled gate means static weights.
pub fn grid() -> Vec<GridRow> {
    use Composition::*;
    use GatingMode::*;
    vec![
        row("composition", "Only Global", Global, Matrix, true),
        row("composition", "Only Local", Local, Matrix, true),
        row("composition", "Global & Local", Both, Matrix, true),
        row("gating", "w/o Diffusion", Both, Static, true),
        row("gating", "Scalar Gating", Both, Scalar, true),
        row("gating", "Matrix Gating", Both, Matrix, true),
        row(
            "expert_x_gating",
            "Expert ✗ / Gating ✗",
            Both,
            Static,
            false,
        ),
        row("expert_x_gating", "Expert ✓ / Gating ✗", Both, Static, true),
        row(
            "expert_x_gating",
            "Expert ✗ / Gating ✓",
            Both,
            Matrix,
            false,
        ),
        row("expert_x_gating", "Expert ✓ / Gating ✓", Both, Matrix, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub seeds: Vec<u64>,
    pub finetune_steps: usize,
    pub eval_samples: usize,
    pub sample_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub seed: u64,
    pub table: String,
    pub row: String,
    pub mogle: MogleConfig,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub plan: AblationPlan,
    pub rows: Vec<AblationResult>,
    /// Per seed: whether both experts with matrix gating had the lowest
    /// desk-FID among the composition and gating rows.
    pub full_model_best: BTreeMap<u64, bool>,
}

impl AblationSummary {
    pub fn wins(&self) -> usize {
        self.full_model_best.values().filter(|&&b| b).count()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(
            "seed,table,row,composition,gating,experts,desk_fid,desk_kid_x1000,mask_iou,mask_color_err,attr_acc\n",
        );
        for r in &self.rows {
            let m = &r.mogle;
            let _ = writeln!(
                s,
                "{},{},{},{:?},{:?},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.seed,
                r.table,
                r.row,
                m.composition,
                m.gating,
                m.experts,
                r.report.desk_fid,
                r.report.desk_kid_x1000,
                r.report.mask_iou,
                r.report.mask_color_err,
                r.report.attr_acc
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), self.csv())?;
        std::fs::write(
            dir.join("ablation.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

/// Finetuning starting point: fresh adapters, experts and gate seeded by
/// `cfg`, with the backbone copied from a pretraining checkpoint.
pub fn model_from_pretrained(cfg: &RunConfig, pretrained: &Checkpoint) -> Result<Model> {
    if pretrained.phase != Phase::Pretrain {
        return Err(Error::Format("expected a pretraining checkpoint".into()));
    }
    let mut model = Model::new(cfg, Phase::Finetune)?;
    let backbone: Vec<_> = pretrained
        .tensors
        .iter()
        .filter(|(name, _)| name.starts_with("dit."))
        .cloned()
        .collect();
    let want = model.denoiser.backbone_ids().len();
    if backbone.len() != want {
        return Err(Error::Format(format!(
            "pretrained backbone has {} tensors, model expects {want}",
            backbone.len()
        )));
    }
    crate::checkpoint::restore_into(&mut model, &backbone)?;
    Ok(model)
}

/// Finetune and evaluate one configuration.
pub fn run_cell(
    base: &RunConfig,
    pretrained: &Checkpoint,
    mogle: &MogleConfig,
    seed: u64,
    plan: &AblationPlan,
    train_samples: &[Sample],
    test_samples: &[Sample],
) -> Result<EvalReport> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.expert_composition = mogle.composition;
    cfg.gating_mode = mogle.gating;
    cfg.experts = mogle.experts;
    cfg.sample.steps = plan.sample_steps;
    let mut model = model_from_pretrained(&cfg, pretrained)?;
    let set = TrainSet::new(&model, train_samples)?;
    train(&mut model, &set, plan.finetune_steps, |_, _, _| Ok(()))?;
    let n = plan.eval_samples.min(test_samples.len());
    let evals = &test_samples[..n];
    let prompts: Vec<_> = evals.iter().map(|s| Some(s.prompt)).collect();
    let masks: Vec<_> = evals.iter().map(|s| Some(&s.mask)).collect();
    let imgs = generate_many(&model, &prompts, &masks, sampler_config(&cfg), seed, 32)?;
    let refs: Vec<_> = test_samples.iter().map(|s| s.image.clone()).collect();
    let mask_refs: Vec<_> = evals.iter().map(|s| &s.mask).collect();
    let prompt_refs: Vec<_> = evals.iter().map(|s| s.prompt).collect();
    evaluate(
        &imgs,
        &refs,
        &mask_refs,
        &prompt_refs,
        &FeatureExtractor::new(cfg.eval.feature_seed),
        seed,
        &cfg.config_hash(),
    )
}

/// Every grid row for every seed; identical configurations are trained once
/// per seed and reported under each row that names them.
pub fn run_ablation(
    base: &RunConfig,
    pretrained: &Checkpoint,
    plan: &AblationPlan,
    mut progress: impl FnMut(&AblationResult),
) -> Result<AblationSummary> {
    let train_s = generate_split(base.seed, Split::Train, base.data.n_train, base.data.n_test);
    let test_s = generate_split(base.seed, Split::Test, base.data.n_train, base.data.n_test);
    let mut rows = Vec::new();
    let mut full_model_best = BTreeMap::new();
    for &seed in &plan.seeds {
        let mut cache: Vec<(MogleConfig, EvalReport)> = Vec::new();
        for r in grid() {
            let report = match cache.iter().find(|(m, _)| *m == r.mogle) {
                Some((_, rep)) => rep.clone(),
                None => {
                    let rep = run_cell(base, pretrained, &r.mogle, seed, plan, &train_s, &test_s)?;
                    cache.push((r.mogle.clone(), rep.clone()));
                    rep
                }
            };
            let res = AblationResult {
                seed,
                table: r.table,
                row: r.row,
                mogle: r.mogle,
                report,
            };
            progress(&res);
            rows.push(res);
        }
        let contenders: Vec<&AblationResult> = rows
            .iter()
            .filter(|r| r.seed == seed && r.table != "expert_x_gating")
            .collect();
        let full = MogleConfig::default();
        let best = contenders
            .iter()
            .min_by(|a, b| a.report.desk_fid.total_cmp(&b.report.desk_fid))
            .expect("non-empty grid");
        full_model_best.insert(seed, best.mogle == full);
    }
    Ok(AblationSummary {
        plan: plan.clone(),
        rows,
        full_model_best,
    })
}
