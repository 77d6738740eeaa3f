//! Procedural "blob-face" dataset: image, semantic mask, and attribute prompt
//! triples whose mask and text alignment hold by construction.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{write_pgm, write_ppm, Image};
use crate::mask::{Palette, SemanticMask};

pub const CANVAS: usize = 32;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_FACE: u8 = 1;
pub const CLASS_EYE: u8 = 2;
pub const CLASS_MOUTH: u8 = 3;
pub const CLASS_HAIR: u8 = 4;

/// Colours selectable by prompts.
pub const ATTRIBUTE_COLORS: [[f32; 3]; 6] = [
    [0.85, 0.20, 0.20], // red
    [0.20, 0.75, 0.25], // green
    [0.20, 0.30, 0.85], // blue
    [0.90, 0.85, 0.25], // yellow
    [0.60, 0.25, 0.75], // purple
    [0.20, 0.80, 0.85], // cyan
];

/// Rendered background; never a prompt colour.
pub const IMAGE_BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

pub const SHADING_AMPLITUDE: f32 = 0.04;

/// Candidate colours for classifying generated pixels: background first,
/// then the attribute colours in index order.
pub fn image_palette() -> Vec<[f32; 3]> {
    std::iter::once(IMAGE_BACKGROUND)
        .chain(ATTRIBUTE_COLORS)
        .collect()
}

// Prompt vocabulary.
pub const TOKEN_NULL: u32 = 0;
pub const TOKEN_FACE_BASE: u32 = 1;
pub const TOKEN_EYE_BASE: u32 = 7;
pub const TOKEN_MOUTH_BASE: u32 = 13;
pub const TOKEN_HAIR: u32 = 19;
pub const TOKEN_NO_HAIR: u32 = 20;
pub const TOKEN_HAIR_COLOR_BASE: u32 = 21;
pub const TOKEN_END: u32 = 27;
pub const VOCAB_SIZE: usize = 28;
pub const PROMPT_LEN: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTokens(pub [u32; PROMPT_LEN]);

impl PromptTokens {
    /// The dropped-text condition.
    pub const NULL: PromptTokens = PromptTokens([TOKEN_NULL; PROMPT_LEN]);

    pub fn new(tokens: [u32; PROMPT_LEN]) -> Result<Self> {
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::contract(format!(
                "token {t} outside vocabulary of {VOCAB_SIZE}"
            )));
        }
        Ok(Self(tokens))
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|&t| t as usize)
    }

    /// Prompted colour per foreground class (face, eye, mouth, hair), if any.
    pub fn prompted_colors(&self) -> [Option<usize>; 4] {
        let pick = |tok: u32, base: u32| {
            (tok >= base && tok < base + ATTRIBUTE_COLORS.len() as u32)
                .then(|| (tok - base) as usize)
        };
        [
            pick(self.0[0], TOKEN_FACE_BASE),
            pick(self.0[1], TOKEN_EYE_BASE),
            pick(self.0[2], TOKEN_MOUTH_BASE),
            if self.0[3] == TOKEN_HAIR {
                pick(self.0[4], TOKEN_HAIR_COLOR_BASE)
            } else {
                None
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceSpec {
    pub face_color: u8,
    pub eye_color: u8,
    pub mouth_color: u8,
    pub hair_present: bool,
    pub hair_color: u8,
    pub face_center: [f32; 2],
    pub face_axes: [f32; 2],
    pub eye_offset: [f32; 2],
    pub eye_radius: f32,
    pub mouth_offset: f32,
    pub mouth_half: [f32; 2],
    pub hair_height: f32,
    pub seed: u64,
}

/// Documented bounds of every geometric draw, `(low, high)`.
pub mod ranges {
    pub const FACE_CX: (f32, f32) = (14.0, 18.0);
    pub const FACE_CY: (f32, f32) = (15.0, 19.0);
    pub const FACE_AX: (f32, f32) = (8.0, 11.0);
    pub const FACE_AY: (f32, f32) = (10.0, 12.5);
    pub const EYE_DX: (f32, f32) = (3.5, 5.0);
    pub const EYE_DY: (f32, f32) = (1.5, 3.5);
    pub const EYE_R: (f32, f32) = (1.5, 2.5);
    pub const MOUTH_DY: (f32, f32) = (4.0, 6.0);
    pub const MOUTH_HW: (f32, f32) = (2.5, 4.5);
    pub const MOUTH_HH: (f32, f32) = (0.8, 1.5);
    pub const HAIR_H: (f32, f32) = (4.0, 7.0);
    /// Hair is a band of an ellipse this much larger than the face.
    pub const HAIR_MARGIN: f32 = 2.0;
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    lo + (hi - lo) * rng.random::<f32>()
}

/// Draw a face description; the four region colours are pairwise distinct.
pub fn sample_spec(rng: &mut impl Rng) -> FaceSpec {
    let mut colors: Vec<u8> = (0..ATTRIBUTE_COLORS.len() as u8).collect();
    let mut pick = |rng: &mut dyn rand::RngCore| {
        let i = rng.random_range(0..colors.len());
        colors.remove(i)
    };
    let face_color = pick(rng);
    let eye_color = pick(rng);
    let mouth_color = pick(rng);
    let hair_color = pick(rng);
    let hair_present = rng.random_bool(0.5);
    use ranges::*;
    FaceSpec {
        face_color,
        eye_color,
        mouth_color,
        hair_present,
        hair_color,
        face_center: [uniform(rng, FACE_CX), uniform(rng, FACE_CY)],
        face_axes: [uniform(rng, FACE_AX), uniform(rng, FACE_AY)],
        eye_offset: [uniform(rng, EYE_DX), uniform(rng, EYE_DY)],
        eye_radius: uniform(rng, EYE_R),
        mouth_offset: uniform(rng, MOUTH_DY),
        mouth_half: [uniform(rng, MOUTH_HW), uniform(rng, MOUTH_HH)],
        hair_height: uniform(rng, HAIR_H),
        seed: rng.random(),
    }
}

/// Topmost region at a pixel centre (face < hair < eyes < mouth).
pub fn class_at(spec: &FaceSpec, x: usize, y: usize) -> u8 {
    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
    let [cx, cy] = spec.face_center;
    let [ax, ay] = spec.face_axes;
    let ell = |rx: f32, ry: f32| ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0;

    let mut class = CLASS_BACKGROUND;
    if ell(ax, ay) {
        class = CLASS_FACE;
    }
    let m = ranges::HAIR_MARGIN;
    if spec.hair_present && ell(ax + m, ay + m) && py < cy - ay + spec.hair_height {
        class = CLASS_HAIR;
    }
    let [ex, ey] = spec.eye_offset;
    for side in [-1.0f32, 1.0] {
        let (dx, dy) = (px - (cx + side * ex), py - (cy - ey));
        if dx * dx + dy * dy <= spec.eye_radius * spec.eye_radius {
            class = CLASS_EYE;
        }
    }
    let [mw, mh] = spec.mouth_half;
    if (px - cx).abs() <= mw && (py - (cy + spec.mouth_offset)).abs() <= mh {
        class = CLASS_MOUTH;
    }
    class
}

/// Deterministic smooth shading offset, |s| ≤ [`SHADING_AMPLITUDE`].
pub fn shading(spec: &FaceSpec, x: usize, y: usize) -> f32 {
    let phase = (spec.seed % 628) as f32 / 100.0;
    SHADING_AMPLITUDE * (0.9 * x as f32 + 0.6 * y as f32 + phase).sin()
}

pub fn region_color(spec: &FaceSpec, class: u8) -> [f32; 3] {
    match class {
        CLASS_FACE => ATTRIBUTE_COLORS[spec.face_color as usize],
        CLASS_EYE => ATTRIBUTE_COLORS[spec.eye_color as usize],
        CLASS_MOUTH => ATTRIBUTE_COLORS[spec.mouth_color as usize],
        CLASS_HAIR => ATTRIBUTE_COLORS[spec.hair_color as usize],
        _ => IMAGE_BACKGROUND,
    }
}

pub fn render(spec: &FaceSpec) -> (Image, SemanticMask) {
    let mut img = Image::filled(CANVAS, CANVAS, [0.0; 3]);
    let mut classes = vec![0u8; CANVAS * CANVAS];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let c = class_at(spec, x, y);
            classes[y * CANVAS + x] = c;
            let s = shading(spec, x, y);
            let rgb = region_color(spec, c).map(|v| (v + s).clamp(0.0, 1.0));
            img.set_pixel(y, x, rgb);
        }
    }
    let mask = SemanticMask::new(CANVAS, CANVAS, classes, Palette::face()).expect("valid classes");
    (img, mask)
}

pub fn spec_to_prompt(spec: &FaceSpec) -> PromptTokens {
    let (flag, hair) = if spec.hair_present {
        (TOKEN_HAIR, TOKEN_HAIR_COLOR_BASE + spec.hair_color as u32)
    } else {
        (TOKEN_NO_HAIR, TOKEN_NULL)
    };
    PromptTokens([
        TOKEN_FACE_BASE + spec.face_color as u32,
        TOKEN_EYE_BASE + spec.eye_color as u32,
        TOKEN_MOUTH_BASE + spec.mouth_color as u32,
        flag,
        hair,
        TOKEN_END,
    ])
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub index: u64,
    pub spec: FaceSpec,
    pub image: Image,
    pub mask: SemanticMask,
    pub prompt: PromptTokens,
}

/// Sample `index` is a pure function of `(seed, index)`.
pub fn generate_sample(seed: u64, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index);
    let spec = sample_spec(&mut rng);
    let (image, mask) = render(&spec);
    let prompt = spec_to_prompt(&spec);
    Sample {
        index,
        spec,
        image,
        mask,
        prompt,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Train samples take indices `0..n_train`, test samples follow.
pub fn split_indices(split: Split, n_train: usize, n_test: usize) -> std::ops::Range<u64> {
    match split {
        Split::Train => 0..n_train as u64,
        Split::Test => n_train as u64..(n_train + n_test) as u64,
    }
}

pub fn generate_split(seed: u64, split: Split, n_train: usize, n_test: usize) -> Vec<Sample> {
    split_indices(split, n_train, n_test)
        .map(|i| generate_sample(seed, i))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub mask_palette: Palette,
    pub image_palette: Vec<[f32; 3]>,
    pub vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
struct PromptLine {
    index: u64,
    tokens: [u32; PROMPT_LEN],
}

/// Write `train/` and `test/` shards plus `manifest.json` under `dir`.
pub fn write_dataset(
    dir: &Path,
    seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<DatasetManifest> {
    for split in [Split::Train, Split::Test] {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub)?;
        let mut lines = String::new();
        for s in generate_split(seed, split, n_train, n_test) {
            write_ppm(&sub.join(format!("{:06}.ppm", s.index)), &s.image)?;
            write_pgm(
                &sub.join(format!("{:06}.pgm", s.index)),
                s.mask.height(),
                s.mask.width(),
                s.mask.classes(),
            )?;
            lines.push_str(&serde_json::to_string(&PromptLine {
                index: s.index,
                tokens: s.prompt.0,
            })?);
            lines.push('\n');
        }
        fs::write(sub.join("prompts.jsonl"), lines)?;
    }
    let manifest = DatasetManifest {
        seed,
        n_train,
        n_test,
        height: CANVAS,
        width: CANVAS,
        mask_palette: Palette::face(),
        image_palette: image_palette(),
        vocab_size: VOCAB_SIZE,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
