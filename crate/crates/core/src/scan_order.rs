//! 2D → 1D token orderings.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

pub const DEFAULT_LOCAL_WINDOW: usize = 2;

/// A permutation of token indices: sequence position `i` holds token `order[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    order: Arc<[usize]>,
    inverse: Arc<[usize]>,
}

impl ScanOrder {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut inverse = vec![usize::MAX; n];
        for (pos, &tok) in order.iter().enumerate() {
            if tok >= n || inverse[tok] != usize::MAX {
                return Err(Error::input(format!(
                    "not a permutation of 0..{n}: token {tok}"
                )));
            }
            inverse[tok] = pos;
        }
        Ok(ScanOrder {
            order: order.into(),
            inverse: inverse.into(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let ids: Arc<[usize]> = (0..n).collect();
        ScanOrder {
            order: Arc::clone(&ids),
            inverse: ids,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `inverse[token]` is the sequence position of `token`.
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub(crate) fn order_arc(&self) -> Arc<[usize]> {
        Arc::clone(&self.order)
    }

    pub(crate) fn inverse_arc(&self) -> Arc<[usize]> {
        Arc::clone(&self.inverse)
    }

    pub fn reversed(&self) -> ScanOrder {
        ScanOrder::new(self.order.iter().rev().copied().collect())
            .expect("reversal of a permutation")
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &t)| i == t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixedScanKind {
    Raster,
    RasterReversed,
    /// Row-major over `w × w` windows, row-major inside each window.
    LocalWindow(usize),
    /// Boustrophedon: even rows left to right, odd rows right to left.
    Continuous,
}

impl fmt::Display for FixedScanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FixedScanKind::Raster => f.write_str("raster"),
            FixedScanKind::RasterReversed => f.write_str("raster_reversed"),
            FixedScanKind::LocalWindow(w) => write!(f, "local_window({w})"),
            FixedScanKind::Continuous => f.write_str("continuous"),
        }
    }
}

impl FromStr for FixedScanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raster" => Ok(FixedScanKind::Raster),
            "raster_reversed" => Ok(FixedScanKind::RasterReversed),
            "continuous" => Ok(FixedScanKind::Continuous),
            "local_window" => Ok(FixedScanKind::LocalWindow(DEFAULT_LOCAL_WINDOW)),
            _ => s
                .strip_prefix("local_window(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|w| w.parse().ok())
                .map(FixedScanKind::LocalWindow)
                .ok_or_else(|| Error::config(format!("unknown scan kind {s:?}"))),
        }
    }
}

pub fn fixed_order(kind: FixedScanKind, h: usize, w: usize) -> Result<ScanOrder> {
    if h == 0 || w == 0 {
        return Err(Error::config(format!(
            "scan grid must be non-empty, got {h}x{w}"
        )));
    }
    let order: Vec<usize> = match kind {
        FixedScanKind::Raster => (0..h * w).collect(),
        FixedScanKind::RasterReversed => (0..h * w).rev().collect(),
        FixedScanKind::LocalWindow(win) => {
            if win == 0 || !h.is_multiple_of(win) || !w.is_multiple_of(win) {
                return Err(Error::config(format!(
                    "local window {win} must divide the {h}x{w} grid"
                )));
            }
            let mut order = Vec::with_capacity(h * w);
            for wy in (0..h).step_by(win) {
                for wx in (0..w).step_by(win) {
                    for y in wy..wy + win {
                        order.extend((wx..wx + win).map(|x| y * w + x));
                    }
                }
            }
            order
        }
        FixedScanKind::Continuous => (0..h)
            .flat_map(|y| {
                let row = (0..w).map(move |x| y * w + x);
                if y % 2 == 0 {
                    row.collect::<Vec<_>>()
                } else {
                    row.rev().collect()
                }
            })
            .collect(),
    };
    ScanOrder::new(order)
}

/// Fraction of consecutive sequence pairs that are 4-neighbours on the grid.
pub fn adjacency_retention(order: &ScanOrder, h: usize, w: usize) -> Result<f64> {
    if order.len() != h * w {
        return Err(Error::dim("adjacency_retention", &[order.len()], &[h, w]));
    }
    if order.len() < 2 {
        return Ok(1.0);
    }
    let adjacent = order
        .order()
        .windows(2)
        .filter(|pair| {
            let (ya, xa) = (pair[0] / w, pair[0] % w);
            let (yb, xb) = (pair[1] / w, pair[1] % w);
            ya.abs_diff(yb) + xa.abs_diff(xb) == 1
        })
        .count();
    Ok(adjacent as f64 / (order.len() - 1) as f64)
}
