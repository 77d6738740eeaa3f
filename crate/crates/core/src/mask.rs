//! Semantic masks, palette colouring, and decoupling into the colour-coded
//! global mask plus one binary component per foreground class.

use serde::{Deserialize, Serialize};

use crate::codec::PatchCodec;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::numerics::Tensor;

/// Minimum L∞ distance between any two palette colours.
pub const MIN_PALETTE_GAP: f32 = 0.2;

/// Class → RGB colours; index 0 is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f32; 3]>", into = "Vec<[f32; 3]>")]
pub struct Palette(Vec<[f32; 3]>);

impl Palette {
    pub fn new(colors: Vec<[f32; 3]>) -> Result<Self> {
        if colors.len() < 2 {
            return Err(Error::Config(
                "palette needs background plus one class".into(),
            ));
        }
        for (i, a) in colors.iter().enumerate() {
            if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("palette colour {i} outside [0,1]")));
            }
            for (j, b) in colors.iter().enumerate().skip(i + 1) {
                let gap = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f32::max);
                if gap < MIN_PALETTE_GAP {
                    return Err(Error::Config(format!(
                        "palette colours {i} and {j} are only {gap:.3} apart"
                    )));
                }
            }
        }
        Ok(Self(colors))
    }

    /// Background, face, eye, mouth, hair.
    pub fn face() -> Self {
        Self(vec![
            [0.0, 0.0, 0.0],
            [0.95, 0.75, 0.55],
            [0.1, 0.45, 0.95],
            [0.9, 0.1, 0.25],
            [0.45, 0.25, 0.05],
        ])
    }

    pub fn colors(&self) -> &[[f32; 3]] {
        &self.0
    }

    pub fn color(&self, class: u8) -> [f32; 3] {
        self.0[class as usize]
    }

    /// Number of foreground classes.
    pub fn n_classes(&self) -> usize {
        self.0.len() - 1
    }
}

impl TryFrom<Vec<[f32; 3]>> for Palette {
    type Error = Error;

    fn try_from(v: Vec<[f32; 3]>) -> Result<Self> {
        Palette::new(v)
    }
}

impl From<Palette> for Vec<[f32; 3]> {
    fn from(p: Palette) -> Self {
        p.0
    }
}

/// H×W grid of class indices in `0..=n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMask {
    height: usize,
    width: usize,
    classes: Vec<u8>,
    palette: Palette,
}

impl SemanticMask {
    pub fn new(height: usize, width: usize, classes: Vec<u8>, palette: Palette) -> Result<Self> {
        if height == 0 || width == 0 || classes.len() != height * width {
            return Err(Error::dim(
                "mask",
                format!(
                    "{height}x{width} needs {} classes, got {}",
                    height * width,
                    classes.len()
                ),
            ));
        }
        let n = palette.n_classes();
        if let Some(bad) = classes.iter().find(|&&c| c as usize > n) {
            return Err(Error::contract(format!(
                "class index {bad} outside 0..={n}"
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            palette,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn class_at(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    pub fn n_classes(&self) -> usize {
        self.palette.n_classes()
    }

    pub fn foreground_pixels(&self) -> usize {
        self.classes.iter().filter(|&&c| c != 0).count()
    }

    /// The colour-coded full mask.
    pub fn colorize(&self) -> Image {
        let data = self
            .classes
            .iter()
            .flat_map(|&c| self.palette.color(c))
            .collect();
        Image::new(self.height, self.width, data).expect("consistent extents")
    }
}

/// All-background mask, used as the null mask condition.
pub fn empty_mask(height: usize, width: usize, palette: Palette) -> SemanticMask {
    SemanticMask {
        height,
        width,
        classes: vec![0; height * width],
        palette,
    }
}

/// Global colour mask plus n binary class components.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskComponents {
    pub global: Image,
    /// `components[i]` is the indicator of class `i + 1`.
    pub components: Vec<Vec<u8>>,
    pub height: usize,
    pub width: usize,
}

impl MaskComponents {
    /// Recover class indices: the single set component, else background.
    pub fn reconstruct(&self) -> Vec<u8> {
        (0..self.height * self.width)
            .map(|p| {
                self.components
                    .iter()
                    .position(|c| c[p] == 1)
                    .map_or(0, |i| (i + 1) as u8)
            })
            .collect()
    }
}

pub fn decouple(mask: &SemanticMask) -> Result<MaskComponents> {
    let n = mask.n_classes();
    let mut components = vec![vec![0u8; mask.classes.len()]; n];
    for (p, &c) in mask.classes.iter().enumerate() {
        match c as usize {
            0 => {}
            k if k <= n => components[k - 1][p] = 1,
            k => return Err(Error::contract(format!("class index {k} outside 0..={n}"))),
        }
    }
    Ok(MaskComponents {
        global: mask.colorize(),
        components,
        height: mask.height,
        width: mask.width,
    })
}

/// Encode the global mask and each channel-replicated binary component with
/// the shared codec: `[n + 1, L, d]`.
pub fn to_token_inputs(comps: &MaskComponents, codec: &PatchCodec) -> Result<Tensor> {
    if comps.height != codec.height() || comps.width != codec.width() {
        return Err(Error::dim(
            "to_token_inputs",
            format!(
                "mask {}x{} vs codec {}x{}",
                comps.height,
                comps.width,
                codec.height(),
                codec.width()
            ),
        ));
    }
    let mut seqs = Vec::with_capacity(comps.components.len() + 1);
    seqs.push(codec.encode(&comps.global)?);
    for c in &comps.components {
        let data = c.iter().flat_map(|&v| [v as f32; 3]).collect();
        seqs.push(codec.encode(&Image::new(comps.height, comps.width, data)?)?);
    }
    Tensor::stack(&seqs)
}
