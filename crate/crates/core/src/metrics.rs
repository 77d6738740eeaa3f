//! Distribution distances in a fixed random-feature space, plus mask and
//! prompt alignment scores computed from rendered colours.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{image_palette, PromptTokens, ATTRIBUTE_COLORS};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::mask::SemanticMask;

pub const FEATURE_DIM: usize = 64;
const CHANNELS: [usize; 4] = [3, 16, 32, 64];
const JITTER: f64 = 1e-6;

/// Frozen, seeded stack of three stride-2 3×3 convolutions with ReLU,
/// followed by global average pooling.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    /// Per layer: weights `[c_out][c_in][3][3]` flattened, and biases.
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = CHANNELS
            .windows(2)
            .map(|w| {
                let (ci, co) = (w[0], w[1]);
                let std = (2.0 / (9 * ci) as f64).sqrt();
                let wts = (0..co * ci * 9)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                    .collect();
                let bias = (0..co)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        0.1 * z
                    })
                    .collect();
                (wts, bias)
            })
            .collect();
        Self { layers }
    }

    pub fn dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn features(&self, img: &Image) -> Vec<f64> {
        let (mut h, mut w) = (img.height(), img.width());
        // channel-major planes, centred pixel values
        let mut x: Vec<f64> = (0..3)
            .flat_map(|c| {
                img.data()
                    .iter()
                    .skip(c)
                    .step_by(3)
                    .map(|&v| v as f64 - 0.5)
            })
            .collect();
        for (li, (wts, bias)) in self.layers.iter().enumerate() {
            let (ci, co) = (CHANNELS[li], CHANNELS[li + 1]);
            let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
            let mut y = vec![0.0; co * oh * ow];
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[o];
                        for c in 0..ci {
                            for ky in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = (2 * ox + kx) as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wts[((o * ci + c) * 3 + ky) * 3 + kx]
                                        * x[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        y[(o * oh + oy) * ow + ox] = acc.max(0.0);
                    }
                }
            }
            x = y;
            h = oh;
            w = ow;
        }
        let area = (h * w) as f64;
        x.chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / area)
            .collect()
    }

    pub fn batch(&self, imgs: &[Image]) -> Vec<Vec<f64>> {
        imgs.iter().map(|i| self.features(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSummary {
    /// Sample mean and unbiased covariance with diagonal jitter.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::contract(
                "a Gaussian summary needs at least two samples",
            ));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::dim("gaussian_summary", "ragged feature rows"));
        }
        let mut mean = DVector::zeros(d);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        for i in 0..d {
            cov[(i, i)] += JITTER;
        }
        Ok(Self { mean, cov })
    }

    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || cov.nrows() != mean.len() {
            return Err(Error::dim(
                "gaussian_summary",
                format!("mean {} vs cov {:?}", mean.len(), cov.shape()),
            ));
        }
        Ok(Self { mean, cov })
    }
}

/// Principal square root of a symmetric matrix, negative eigenvalues clamped.
pub fn sqrtm_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::dim(
            "frechet_distance",
            format!("{} vs {} dimensions", a.mean.len(), b.mean.len()),
        ));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = sqrtm_sym(&a.cov);
    let cross = sqrtm_sym(&(&ra * &b.cov * &ra));
    Ok(diff + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace())
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD with the cubic polynomial kernel, times 1000.
pub fn kid(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return Err(Error::contract(format!(
            "kid needs at least 2 samples per set, got {m} and {n}"
        )));
    }
    let d = x[0].len();
    if x.iter().chain(y).any(|r| r.len() != d) {
        return Err(Error::dim("kid", "feature dimensions differ"));
    }
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += poly_kernel(&s[i], &s[j]);
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += poly_kernel(a, b);
        }
    }
    Ok(1000.0 * (within(x) + within(y) - 2.0 * cross / (m * n) as f64))
}

/// Bootstrap standard error of [`kid`] over `rounds` with-replacement
/// resamples of both sets.
pub fn kid_bootstrap_se(x: &[Vec<f64>], y: &[Vec<f64>], rounds: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let xs: Vec<Vec<f64>> = (0..x.len())
            .map(|_| x[rng.random_range(0..x.len())].clone())
            .collect();
        let ys: Vec<Vec<f64>> = (0..y.len())
            .map(|_| y[rng.random_range(0..y.len())].clone())
            .collect();
        vals.push(kid(&xs, &ys)?);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1).max(1) as f64;
    Ok(var.sqrt())
}

fn sq_dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(colors: &[[f32; 3]], p: [f32; 3]) -> usize {
    let mut best = 0;
    for (i, c) in colors.iter().enumerate() {
        if sq_dist(*c, p) < sq_dist(colors[best], p) {
            best = i;
        }
    }
    best
}

/// Nearest-colour label per pixel: 0 = background, `k + 1` = attribute
/// colour `k`.
pub fn classify_pixels(img: &Image) -> Vec<u8> {
    let pal = image_palette();
    (0..img.height() * img.width())
        .map(|p| nearest(&pal, img.pixel(p / img.width(), p % img.width())) as u8)
        .collect()
}

fn region_mean(img: &Image, mask: &SemanticMask, class: u8) -> Option<[f32; 3]> {
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for (p, &c) in mask.classes().iter().enumerate() {
        if c == class {
            let px = img.pixel(p / img.width(), p % img.width());
            for k in 0..3 {
                acc[k] += px[k] as f64;
            }
            n += 1;
        }
    }
    (n > 0).then(|| acc.map(|v| (v / n as f64) as f32))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskScore {
    pub iou: f64,
    pub color_err: f64,
}

/// Per foreground class present in the mask: the generated colour of the
/// region is the majority non-background label inside it, and the predicted
/// region is every pixel carrying that label. Returns the mean IoU against
/// the mask and the mean absolute gap between each region's mean colour and
/// its nearest attribute colour.
pub fn mask_consistency(img: &Image, mask: &SemanticMask) -> Result<MaskScore> {
    if img.height() != mask.height() || img.width() != mask.width() {
        return Err(Error::dim(
            "mask_consistency",
            format!(
                "image {}x{} vs mask {}x{}",
                img.height(),
                img.width(),
                mask.height(),
                mask.width()
            ),
        ));
    }
    let labels = classify_pixels(img);
    let n_labels = ATTRIBUTE_COLORS.len() + 1;
    let (mut iou_sum, mut err_sum, mut k) = (0.0, 0.0, 0usize);
    for class in 1..=mask.n_classes() as u8 {
        let Some(mean) = region_mean(img, mask, class) else {
            continue;
        };
        k += 1;
        let mut votes = vec![0usize; n_labels];
        for (p, &c) in mask.classes().iter().enumerate() {
            if c == class && labels[p] != 0 {
                votes[labels[p] as usize] += 1;
            }
        }
        let label = (1..n_labels)
            .max_by_key(|&l| (votes[l], std::cmp::Reverse(l)))
            .unwrap();
        if votes[label] > 0 {
            let (mut inter, mut union) = (0usize, 0usize);
            for (p, &c) in mask.classes().iter().enumerate() {
                let (t, g) = (c == class, labels[p] == label as u8);
                inter += (t && g) as usize;
                union += (t || g) as usize;
            }
            iou_sum += inter as f64 / union as f64;
        }
        let target = ATTRIBUTE_COLORS[nearest(&ATTRIBUTE_COLORS, mean)];
        err_sum += mean
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / 3.0;
    }
    if k == 0 {
        return Ok(MaskScore {
            iou: 0.0,
            color_err: 0.0,
        });
    }
    Ok(MaskScore {
        iou: iou_sum / k as f64,
        color_err: err_sum / k as f64,
    })
}

/// Fraction of prompted colour attributes whose region mean colour is
/// nearest (background included) to the prompted colour. `None` when no
/// prompted attribute has a region in the mask.
pub fn attribute_accuracy(img: &Image, prompt: &PromptTokens, mask: &SemanticMask) -> Option<f64> {
    let pal = image_palette();
    let (mut hits, mut k) = (0usize, 0usize);
    for (i, want) in prompt.prompted_colors().into_iter().enumerate() {
        let Some(want) = want else { continue };
        let Some(mean) = region_mean(img, mask, i as u8 + 1) else {
            continue;
        };
        k += 1;
        hits += (nearest(&pal, mean) == want + 1) as usize;
    }
    (k > 0).then(|| hits as f64 / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub desk_fid: f64,
    pub desk_kid_x1000: f64,
    pub mask_iou: f64,
    pub mask_color_err: f64,
    pub attr_acc: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Score generated images against reference images and their conditions.
pub fn evaluate(
    generated: &[Image],
    reference: &[Image],
    masks: &[&SemanticMask],
    prompts: &[PromptTokens],
    extractor: &FeatureExtractor,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    if generated.len() != masks.len() || generated.len() != prompts.len() {
        return Err(Error::contract("one mask and prompt per generated image"));
    }
    let fg = extractor.batch(generated);
    let fr = extractor.batch(reference);
    let fid = frechet_distance(&GaussianSummary::fit(&fg)?, &GaussianSummary::fit(&fr)?)?;
    let kid = kid(&fg, &fr)?;
    let (mut iou, mut err) = (0.0, 0.0);
    let mut accs = Vec::new();
    for ((img, m), p) in generated.iter().zip(masks).zip(prompts) {
        let s = mask_consistency(img, m)?;
        iou += s.iou;
        err += s.color_err;
        accs.extend(attribute_accuracy(img, p, m));
    }
    let n = generated.len() as f64;
    Ok(EvalReport {
        desk_fid: fid,
        desk_kid_x1000: kid,
        mask_iou: iou / n,
        mask_color_err: err / n,
        attr_acc: if accs.is_empty() {
            0.0
        } else {
            accs.iter().sum::<f64>() / accs.len() as f64
        },
        n_samples: generated.len(),
        seed,
        config_hash: config_hash.to_string(),
    })
}
