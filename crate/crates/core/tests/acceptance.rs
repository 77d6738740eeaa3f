//! Acceptance runner: one line per criterion, non-zero exit if any fails.
//!
//! Criteria 8, 9 and 11 train full-size models and take tens of minutes on
//! one core.

mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use mogle::ablation::{run_ablation, AblationPlan};
use mogle::checkpoint::{self, load_model, save_model};
use mogle::codec::PatchCodec;
use mogle::config::RunConfig;
use mogle::data::{generate_split, PromptTokens, Split, PROMPT_LEN, VOCAB_SIZE};
use mogle::diffusion::{add_noise, gaussian, noise_with, NoiseSchedule};
use mogle::dit::{predict_noise_eval, Phase};
use mogle::imageio::Image;
use mogle::mask::{decouple, Palette, SemanticMask};
use mogle::metrics::{evaluate, frechet_distance, kid, kid_bootstrap_se, EvalReport, FeatureExtractor, GaussianSummary};
use mogle::model::{generate_many, sampler_config, train, Model, TrainSet};
use mogle::mogle::{randomize, GatingMode};
use mogle::numerics::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use support::{composed_denoiser_error, frechet_oracle, kid_oracle, normal, op_gradient_error, rng, GRAD_TOLERANCE, GRAPH_OPS};

type Outcome = Result<(bool, String), String>;

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Scratch space shared by the long-running criteria.
struct Workspace {
    dir: PathBuf,
    pretrained: Option<PathBuf>,
    finetuned: Option<PathBuf>,
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for (k, op) in GRAPH_OPS.iter().enumerate() {
        let err = op_gradient_error(op, 20, 100 + k as u64).map_err(fail)?;
        if err > worst.0 {
            worst = (err, op.to_string());
        }
    }
    for seed in 0..20 {
        let err = composed_denoiser_error(seed).map_err(fail)?;
        if err > worst.0 {
            worst = (err, format!("composed denoiser (seed {seed})"));
        }
    }
    let elapsed = start.elapsed();
    Ok((
        worst.0 < GRAD_TOLERANCE && elapsed < Duration::from_secs(120),
        format!(
            "{} ops + composed model, worst relative error {:.2e} ({}), {:.1}s",
            GRAPH_OPS.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    ))
}

fn random_mask(r: &mut impl Rng) -> SemanticMask {
    let classes = (0..32 * 32).map(|_| r.random_range(0..=4u8)).collect();
    SemanticMask::new(32, 32, classes, Palette::face()).expect("valid classes")
}

fn gating_simplex() -> Outcome {
    let mut worst_sum = 0.0f64;
    let mut scalar_ok = true;
    let mut static_ok = true;
    for (k, mode) in [GatingMode::Matrix, GatingMode::Scalar, GatingMode::Static].into_iter().enumerate() {
        let mut cfg = RunConfig::default();
        cfg.gating_mode = mode;
        let mut model = Model::new(&cfg, Phase::Finetune).map_err(fail)?;
        let mut r = rng(200 + k as u64);
        let ids = model.mogle.trainable_ids();
        randomize(&mut model.store, &ids, 0.5, &mut r);
        let (l, d) = (model.n_tokens(), cfg.token_dim);
        let mut reference: Option<Tensor> = None;
        for _ in 0..1000 {
            let mask = random_mask(&mut r);
            let tokens = model.mask_tokens(&mask).map_err(fail)?;
            let tokens = tokens.clone().reshaped(&[1, 5, l, d]).map_err(fail)?;
            let z = normal(&[1, l, d], 1.0, &mut r).cast::<f32>();
            let t = r.random_range(1..=cfg.schedule.t_max);
            let w = model.gate_weights(&z, &[t], &tokens).map_err(fail)?.ok_or("no gate")?;
            let e = w.shape()[2];
            for row in w.data().chunks(e) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
                if row.iter().any(|&v| v < 0.0) {
                    worst_sum = f64::INFINITY;
                }
            }
            match mode {
                GatingMode::Scalar => scalar_ok &= w.data().chunks(e).all(|row| row == &w.data()[..e]),
                GatingMode::Static => {
                    // fixed mask, fresh Z_t and t
                    let first = model.mask_tokens(&random_mask(&mut rng(1))).map_err(fail)?;
                    let first = first.reshaped(&[1, 5, l, d]).map_err(fail)?;
                    let w = model.gate_weights(&z, &[t], &first).map_err(fail)?.ok_or("no gate")?;
                    match &reference {
                        None => reference = Some(w),
                        Some(r0) => static_ok &= r0.data() == w.data(),
                    }
                }
                GatingMode::Matrix => {}
            }
        }
    }
    Ok((
        worst_sum < 1e-5 && scalar_ok && static_ok,
        format!(
            "3000 draws, max |Σw − 1| = {worst_sum:.2e}, scalar constant: {scalar_ok}, static invariant: {static_ok}"
        ),
    ))
}

fn lora_identity() -> Outcome {
    let cfg = RunConfig::default();
    let mut model = Model::new(&cfg, Phase::Pretrain).map_err(fail)?;
    let mut r = rng(300);
    let ids = model.denoiser.backbone_ids();
    randomize(&mut model.store, &ids, 0.2, &mut r);
    let (l, d) = (model.n_tokens(), cfg.token_dim);
    let inputs: Vec<(Tensor, usize, PromptTokens, Tensor)> = (0..100)
        .map(|_| {
            let mut tokens = [0u32; PROMPT_LEN];
            for t in &mut tokens {
                *t = r.random_range(0..VOCAB_SIZE as u32);
            }
            (
                normal(&[1, l, d], 1.0, &mut r).cast::<f32>(),
                r.random_range(1..=cfg.schedule.t_max),
                PromptTokens(tokens),
                normal(&[1, l, d], 1.0, &mut r).cast::<f32>(),
            )
        })
        .collect();
    let run = |m: &Model| -> Result<Vec<Tensor>, String> {
        inputs
            .iter()
            .map(|(z, t, p, c)| predict_noise_eval(&m.denoiser, &m.store, z, &[*t], &[*p], c).map_err(fail))
            .collect()
    };
    let before = run(&model)?;
    model.enter_finetune().map_err(fail)?;
    if !model.denoiser.has_lora() {
        return Err("no adapters attached".into());
    }
    let after = run(&model)?;
    let same = before.iter().zip(&after).filter(|(a, b)| a.data() == b.data()).count();
    Ok((same == 100, format!("{same}/100 outputs bitwise identical after attaching adapters")))
}

fn codec_roundtrip() -> Outcome {
    let codec = PatchCodec::new(32, 32, 4, 42).map_err(fail)?;
    let mut r = rng(400);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let img = Image::new(32, 32, (0..32 * 32 * 3).map(|_| r.random::<f32>()).collect()).map_err(fail)?;
        let back = codec.decode(&codec.encode(&img).map_err(fail)?).map_err(fail)?;
        for (a, b) in img.data().iter().zip(back.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst < 1e-5, format!("100 images, max abs error {worst:.2e}")))
}

fn noising_endpoints() -> Outcome {
    let mut r = rng(500);
    let z = gaussian(&[4096], &mut r);
    let e = gaussian(&[4096], &mut r);
    let clean = noise_with(&z, 1.0, &e).map_err(fail)?;
    let pure = noise_with(&z, 0.0, &e).map_err(fail)?;
    let mid = noise_with(&z, 0.25, &e).map_err(fail)?;
    let want_mid: Vec<f32> = z
        .data()
        .iter()
        .zip(e.data())
        .map(|(&x, &n)| (0.5 * x as f64 + 0.75f64.sqrt() * n as f64) as f32)
        .collect();
    let schedule = NoiseSchedule::cosine(1000).map_err(fail)?;
    let endpoints = clean.data() == z.data()
        && pure.data() == e.data()
        && mid.data() == want_mid.as_slice()
        && schedule.alpha_bar(0) == 1.0
        && schedule.alpha_bar(1000) <= 1e-4;

    let mut worst = (1.0f64, 0usize);
    for t in [1, 250, 500, 750, 1000] {
        let z = gaussian(&[10_000], &mut r);
        let e = gaussian(&[10_000], &mut r);
        let zt = add_noise(&z, t, &e, &schedule).map_err(fail)?;
        let n = zt.numel() as f64;
        let mean = zt.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = zt.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        if (var - 1.0).abs() > (worst.0 - 1.0).abs() {
            worst = (var, t);
        }
    }
    Ok((
        endpoints && (0.9..=1.1).contains(&worst.0),
        format!(
            "endpoints exact: {endpoints}, variance over 10000 draws furthest from 1: {:.4} at t = {}",
            worst.0, worst.1
        ),
    ))
}

fn summary(mean: &[f64], cov: &[Vec<f64>]) -> Result<GaussianSummary, String> {
    let n = mean.len();
    GaussianSummary::new(DVector::from_column_slice(mean), DMatrix::from_fn(n, n, |i, j| cov[i][j])).map_err(fail)
}

fn metric_oracles() -> Outcome {
    let one_d = frechet_distance(&summary(&[0.0], &[vec![1.0]])?, &summary(&[1.0], &[vec![1.0]])?).map_err(fail)?;
    let mut r = rng(600);
    let psd = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
        let a = normal(&[3, 3], 1.0, r);
        let a = a.data();
        (0..3)
            .map(|i| (0..3).map(|j| (0..3).map(|k| a[i * 3 + k] * a[j * 3 + k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 }).collect())
            .collect()
    };
    let mut fd_err = 0.0f64;
    for _ in 0..20 {
        let (ca, cb) = (psd(&mut r), psd(&mut r));
        let ma: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let mb: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = frechet_distance(&summary(&ma, &ca)?, &summary(&mb, &cb)?).map_err(fail)?;
        fd_err = fd_err.max((got - frechet_oracle(&ma, &ca, &mb, &cb)).abs());
    }
    let mut kid_err = 0.0f64;
    for (m, n, d) in [(5, 7, 3), (20, 20, 8), (40, 30, 16)] {
        let x: Vec<Vec<f64>> = (0..m).map(|_| normal(&[d], 1.0, &mut r).data().to_vec()).collect();
        let y: Vec<Vec<f64>> = (0..n).map(|_| normal(&[d], 1.5, &mut r).data().to_vec()).collect();
        kid_err = kid_err.max((kid(&x, &y).map_err(fail)? - kid_oracle(&x, &y)).abs());
    }
    let draw = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> { (0..500).map(|_| normal(&[8], 1.0, r).data().to_vec()).collect() };
    let (x, y) = (draw(&mut r), draw(&mut r));
    let same = kid(&x, &y).map_err(fail)?;
    let se = kid_bootstrap_se(&x, &y, 50, 1).map_err(fail)?;
    let pass = (one_d - 1.0).abs() < 1e-9 && fd_err < 1e-6 && kid_err < 1e-9 && same.abs() < 3.0 * se;
    Ok((
        pass,
        format!(
            "1-D Fréchet {one_d:.12}, 3-D max error {fd_err:.2e}, KID max error {kid_err:.2e}, identical-distribution KID {same:.3e} vs 3·SE {:.3e}",
            3.0 * se
        ),
    ))
}

fn decoupling() -> Outcome {
    let mut r = rng(700);
    let mut exact = 0;
    for _ in 0..1000 {
        let mask = random_mask(&mut r);
        if decouple(&mask).map_err(fail)?.reconstruct() == mask.classes() {
            exact += 1;
        }
    }
    Ok((exact == 1000, format!("{exact}/1000 masks reconstructed exactly")))
}

fn mogle(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mogle"))
        .args(args)
        .env_remove("MGLE_SEED")
        .output()
        .map_err(fail)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("mogle {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).expect("readable file");
                out.push((p.strip_prefix(dir).expect("under dir").to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

const TINY: &str = r#"{"blocks": 1, "heads": 2, "data": {"n_train": 16, "n_test": 8}, "train": {"batch": 2}, "sample": {"steps": 4}, "eval": {"n_samples": 4}}"#;

fn determinism(ws: &Workspace) -> Outcome {
    let root = ws.dir.join("determinism");
    std::fs::create_dir_all(&root).map_err(fail)?;
    let cfg = root.join("tiny.json");
    std::fs::write(&cfg, TINY).map_err(fail)?;
    let c = cfg.to_str().ok_or("path")?;
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(run);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).map_err(fail)?;
        let p = |name: &str| dir.join(name).to_str().expect("utf-8 path").to_string();
        mogle(&["gen-data", "--config", c, "--out", &p("data")])?;
        mogle(&["pretrain", "--config", c, "--out", &p("pre.ckpt"), "--steps", "3"])?;
        mogle(&["finetune", "--config", c, "--init", &p("pre.ckpt"), "--out", &p("fine.ckpt"), "--steps", "3"])?;
        mogle(&["sample", "--ckpt", &p("fine.ckpt"), "--out", &p("samples"), "--n", "3", "--seed", "1"])?;
        mogle(&["eval", "--ckpt", &p("fine.ckpt"), "--out", &p("report.json")])?;
        trees.push(tree(&dir));
    }
    let identical = trees[0] == trees[1];
    let files = trees[0].len();

    let fine = root.join("a/fine.ckpt");
    let bytes = std::fs::read(&fine).map_err(fail)?;
    let (model, step) = load_model(&fine).map_err(fail)?;
    let again = root.join("again.ckpt");
    save_model(&model, step, &again).map_err(fail)?;
    let roundtrip = std::fs::read(&again).map_err(fail)? == bytes;

    let mut r = rng(1000);
    let bad = root.join("bad.ckpt");
    let mut accepted = 0;
    let mut trials = 0;
    let mut positions: Vec<usize> = (0..16).collect();
    positions.extend((0..300).map(|_| r.random_range(0..bytes.len())));
    for pos in positions {
        let mut b = bytes.clone();
        b[pos] ^= 0x5a;
        std::fs::write(&bad, &b).map_err(fail)?;
        trials += 1;
        if load_model(&bad).is_ok() {
            accepted += 1;
        }
    }
    for len in [0, 3, 16, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&bad, &bytes[..len]).map_err(fail)?;
        trials += 1;
        if load_model(&bad).is_ok() {
            accepted += 1;
        }
    }
    Ok((
        identical && files > 0 && roundtrip && accepted == 0,
        format!(
            "two runs byte-identical over {files} files: {identical}, save/load roundtrip bitwise: {roundtrip}, corrupted files accepted: {accepted}/{trials}"
        ),
    ))
}

fn report(model: &Model, cfg: &RunConfig, conditional: bool, test: &[mogle::data::Sample]) -> Result<EvalReport, String> {
    let (prompts, masks): (Vec<_>, Vec<_>) = test
        .iter()
        .map(|s| if conditional { (Some(s.prompt), Some(&s.mask)) } else { (None, None) })
        .unzip();
    let imgs = generate_many(model, &prompts, &masks, sampler_config(cfg), cfg.seed, 32).map_err(fail)?;
    let refs: Vec<Image> = test.iter().map(|s| s.image.clone()).collect();
    let mask_refs: Vec<&SemanticMask> = test.iter().map(|s| &s.mask).collect();
    let prompt_refs: Vec<PromptTokens> = test.iter().map(|s| s.prompt).collect();
    evaluate(&imgs, &refs, &mask_refs, &prompt_refs, &FeatureExtractor::new(cfg.eval.feature_seed), cfg.seed, &cfg.config_hash())
        .map_err(fail)
}

fn end_to_end(ws: &mut Workspace) -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let train_s = generate_split(cfg.seed, Split::Train, cfg.data.n_train, cfg.data.n_test);
    let test = generate_split(cfg.seed, Split::Test, cfg.data.n_train, cfg.data.n_test);
    let test = &test[..256.min(test.len())];

    let untrained = Model::new(&cfg, Phase::Finetune).map_err(fail)?;
    let mut model = Model::new(&cfg, Phase::Pretrain).map_err(fail)?;
    let set = TrainSet::new(&model, &train_s).map_err(fail)?;
    train(&mut model, &set, cfg.train.pretrain_steps, |_, _, _| Ok(())).map_err(fail)?;
    let pre = ws.dir.join("pretrained.ckpt");
    save_model(&model, cfg.train.pretrain_steps, &pre).map_err(fail)?;
    ws.pretrained = Some(pre.clone());

    let mut model = mogle::ablation::model_from_pretrained(&cfg, &checkpoint::load(&pre).map_err(fail)?).map_err(fail)?;
    train(&mut model, &set, cfg.train.steps, |_, _, _| Ok(())).map_err(fail)?;
    let fine = ws.dir.join("finetuned.ckpt");
    save_model(&model, cfg.train.steps, &fine).map_err(fail)?;
    ws.finetuned = Some(fine);
    let trained_at = start.elapsed();

    let cond = report(&model, &cfg, true, test)?;
    let uncond = report(&model, &cfg, false, test)?;
    let base = report(&untrained, &cfg, true, test)?;
    let elapsed = start.elapsed();

    let iou_gap = cond.mask_iou - uncond.mask_iou;
    let a = iou_gap >= 0.2;
    let b = cond.attr_acc >= 0.6 && uncond.attr_acc <= 0.3;
    let c = cond.desk_fid < 0.5 * base.desk_fid;
    let fast = elapsed <= Duration::from_secs(45 * 60);
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    Ok((
        a && b && c && fast,
        format!(
            "(a) IoU {:.3} vs unconditional {:.3}, gap {iou_gap:.3} [{}]; (b) attribute accuracy {:.3} vs unconditional {:.3} [{}]; (c) desk-FID {:.4} vs untrained {:.4} [{}]; {:.0}s ({:.0}s training) [{}]",
            cond.mask_iou,
            uncond.mask_iou,
            mark(a),
            cond.attr_acc,
            uncond.attr_acc,
            mark(b),
            cond.desk_fid,
            base.desk_fid,
            mark(c),
            elapsed.as_secs_f64(),
            trained_at.as_secs_f64(),
            mark(fast)
        ),
    ))
}

fn ablation_direction(ws: &Workspace) -> Outcome {
    let pre = ws.pretrained.as_ref().ok_or("needs the pretrained checkpoint from criterion 8")?;
    let pre = checkpoint::load(pre).map_err(fail)?;
    let cfg = RunConfig::default();
    let plan = AblationPlan {
        seeds: vec![42, 43, 44],
        finetune_steps: 500,
        eval_samples: 128,
        sample_steps: cfg.sample.steps,
    };
    let summary = run_ablation(&cfg, &pre, &plan, |_| {}).map_err(fail)?;
    let out = ws.dir.join("ablation");
    summary.write(&out).map_err(fail)?;
    let wins = summary.wins();
    Ok((
        wins >= 2,
        format!(
            "full model best in {wins}/3 seeds ({} finetune steps, {} samples per cell); table at {}",
            plan.finetune_steps,
            plan.eval_samples,
            out.join("ablation.csv").display()
        ),
    ))
}

fn gate_maps(ws: &Workspace) -> Outcome {
    let fine = ws.finetuned.as_ref().ok_or("needs the finetuned checkpoint from criterion 8")?;
    let out = ws.dir.join("gates");
    let _ = std::fs::remove_dir_all(&out);
    let timesteps = [1000usize, 750, 500, 250, 1];
    let list = timesteps.map(|t| t.to_string()).join(",");
    mogle(&["gates", "--ckpt", fine.to_str().ok_or("path")?, "--out", out.to_str().ok_or("path")?, "--timesteps", &list])?;
    let n_experts = RunConfig::default().n_classes + 1;
    let mut grids = 0;
    for t in timesteps {
        for e in 0..n_experts {
            if out.join(format!("gate_t{t:04}_expert{e}.pgm")).is_file() {
                grids += 1;
            }
        }
    }
    // t -> expert -> per-token weights
    let csv = std::fs::read_to_string(out.join("gates.csv")).map_err(fail)?;
    let mut w = vec![vec![Vec::new(); n_experts]; timesteps.len()];
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let t: usize = f[0].parse().map_err(fail)?;
        let e: usize = f[1].parse().map_err(fail)?;
        let v: f64 = f[3].parse().map_err(fail)?;
        let k = timesteps.iter().position(|&x| x == t).ok_or("unexpected timestep")?;
        w[k][e].push(v);
    }
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let token_var = w.iter().flatten().map(|col| var(col)).fold(0.0, f64::max);
    let n_tokens = w[0][0].len();
    let time_var = (0..n_experts)
        .flat_map(|e| (0..n_tokens).map(move |i| (e, i)))
        .map(|(e, i)| var(&w.iter().map(|step| step[e][i]).collect::<Vec<_>>()))
        .fold(0.0, f64::max);
    let want = timesteps.len() * n_experts;
    Ok((
        grids == want && token_var > 1e-6 && time_var > 1e-6,
        format!(
            "{grids}/{want} grids over {} timesteps, max variance across tokens {token_var:.2e}, across timesteps {time_var:.2e}",
            timesteps.len()
        ),
    ))
}

fn main() {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("scratch dir");
    let mut ws = Workspace {
        dir,
        pretrained: None,
        finetuned: None,
    };
    let mut failed = 0;
    let mut run = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (pass, detail) = match outcome {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    };
    run(1, "gradient suite", &mut gradient_suite);
    run(2, "gating simplex", &mut gating_simplex);
    run(3, "adapter identity", &mut lora_identity);
    run(4, "codec roundtrip", &mut codec_roundtrip);
    run(5, "noising endpoints and variance", &mut noising_endpoints);
    run(6, "metric oracles", &mut metric_oracles);
    run(7, "decoupling losslessness", &mut decoupling);
    run(10, "determinism and persistence", &mut || determinism(&ws));
    run(8, "end-to-end trend", &mut || end_to_end(&mut ws));
    run(11, "gate-map artifact", &mut || gate_maps(&ws));
    run(9, "ablation direction", &mut || ablation_direction(&ws));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
