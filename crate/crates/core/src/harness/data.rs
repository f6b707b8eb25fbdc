//! Synthetic shape-and-position classification data.
//!
//! `shapes8` draws an L or a T glyph into one of the four image quadrants;
//! the label is `shape * 4 + quadrant`, so a classifier has to know both
//! what the strokes look like and where they sit.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::rng;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const NUM_CLASSES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Shapes8,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("shapes8")
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes8" => Ok(DatasetKind::Shapes8),
            _ => Err(Error::config(format!("unknown dataset kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    L,
    T,
}

/// Everything the generator drew; the label follows from it alone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphParams {
    pub glyph: Glyph,
    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub quadrant: usize,
    pub thickness: usize,
    /// Arm length in pixels.
    pub size: usize,
    /// Top-left corner of the glyph box inside its quadrant.
    pub offset: (usize, usize),
    /// Foreground intensity per channel.
    pub color: [f64; 3],
    pub noise: f64,
}

impl GlyphParams {
    pub fn label(&self) -> usize {
        let shape = match self.glyph {
            Glyph::L => 0,
            Glyph::T => 1,
        };
        shape * 4 + self.quadrant
    }
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    /// `[32, 32, 3]`
    pub image: Tensor,
    pub label: usize,
    pub params: GlyphParams,
}

/// Whether glyph pixel `(y, x)` (relative to the glyph box) is inked.
fn inked(glyph: Glyph, y: usize, x: usize, size: usize, thick: usize) -> bool {
    match glyph {
        // vertical bar on the left, horizontal bar along the bottom
        Glyph::L => x < thick || y >= size - thick,
        // horizontal bar along the top, vertical bar through the centre
        Glyph::T => {
            let mid = (size - thick) / 2;
            y < thick || (x >= mid && x < mid + thick)
        }
    }
}

pub fn render(params: &GlyphParams, noise_field: &[f64]) -> Tensor {
    let half = IMAGE_SIDE / 2;
    let (qy, qx) = ((params.quadrant / 2) * half, (params.quadrant % 2) * half);
    let (oy, ox) = (qy + params.offset.0, qx + params.offset.1);
    let mut img = Tensor::zeros(&[IMAGE_SIDE, IMAGE_SIDE, 3]);
    let data = img.data_mut();
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let inside = y >= oy
                && x >= ox
                && y < oy + params.size
                && x < ox + params.size
                && inked(params.glyph, y - oy, x - ox, params.size, params.thickness);
            for ch in 0..3 {
                let i = (y * IMAGE_SIDE + x) * 3 + ch;
                let base = if inside { params.color[ch] } else { 0.0 };
                data[i] = base + params.noise * noise_field[i];
            }
        }
    }
    img
}

/// Deterministic for fixed `(kind, n, seed)`. Labels are assigned round-robin.
pub fn synth_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::config("dataset size must be at least 1"));
    }
    let DatasetKind::Shapes8 = kind;
    let mut rng = rng(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % NUM_CLASSES;
        let size = rng.gen_range(8..=12);
        let thickness = rng.gen_range(2..=3);
        let slack = IMAGE_SIDE / 2 - size;
        let params = GlyphParams {
            glyph: if label < 4 { Glyph::L } else { Glyph::T },
            quadrant: label % 4,
            thickness,
            size,
            offset: (rng.gen_range(0..=slack), rng.gen_range(0..=slack)),
            color: [
                rng.gen_range(0.6..1.0),
                rng.gen_range(0.6..1.0),
                rng.gen_range(0.6..1.0),
            ],
            noise: rng.gen_range(0.05..0.15),
        };
        let noise: Vec<f64> = (0..IMAGE_SIDE * IMAGE_SIDE * 3)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        out.push(SynthSample {
            image: render(&params, &noise),
            label: params.label(),
            params,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_labels() {
        let d = synth_dataset(DatasetKind::Shapes8, 80, 1).unwrap();
        for (i, s) in d.iter().enumerate() {
            assert_eq!(s.label, i % 8);
            assert_eq!(s.image.shape(), &[32, 32, 3]);
        }
    }

    #[test]
    fn glyph_lands_in_its_quadrant() {
        for s in synth_dataset(DatasetKind::Shapes8, 16, 3).unwrap() {
            let (qy, qx) = (s.params.quadrant / 2, s.params.quadrant % 2);
            let bright = |y: usize, x: usize| s.image.at(&[y, x, 0]) > 0.4;
            let mut count = [0usize; 4];
            for y in 0..32 {
                for x in 0..32 {
                    if bright(y, x) {
                        count[(y / 16) * 2 + x / 16] += 1;
                    }
                }
            }
            assert!(count[qy * 2 + qx] > 0);
            assert_eq!(count.iter().sum::<usize>(), count[qy * 2 + qx]);
        }
    }

    #[test]
    fn unknown_kind_and_empty() {
        assert!(matches!(
            "mnist".parse::<DatasetKind>(),
            Err(Error::Config(_))
        ));
        assert!(synth_dataset(DatasetKind::Shapes8, 0, 0).is_err());
    }
}
