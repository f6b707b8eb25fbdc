//! Backbone hyperparameters and named presets.

use std::fmt;
use std::str::FromStr;

use crate::deform::{BiasLookup, DeformToggles};
use crate::error::{Error, Result};
use crate::scan_order::DEFAULT_LOCAL_WINDOW;
use crate::ssm::{Discretization, DEFAULT_STATE_SIZE};

pub const NUM_STAGES: usize = 4;
pub const OFFSET_KERNELS: [usize; NUM_STAGES] = [9, 7, 5, 3];
/// Total downsampling factor of the backbone.
pub const RESOLUTION_DIVISOR: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Desk-scale configuration for tests and smoke training.
    Nano,
    Tiny,
    Small,
    Base,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Nano, Preset::Tiny, Preset::Small, Preset::Base];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Nano => "nano",
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Base => "base",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown preset {s:?} (expected nano, tiny, small or base)"
                ))
            })
    }
}

/// Which scan branches a DSSM runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchToggles {
    /// Raster forward and reversed-raster backward branches.
    pub fb_bb: bool,
    /// Boustrophedon branch.
    pub cb: bool,
    /// Local-window branch.
    pub lb: bool,
    /// Deformable branch.
    pub db: bool,
    /// SiLU gate on the merged branches.
    pub gate: bool,
}

impl Default for BranchToggles {
    fn default() -> Self {
        BranchToggles {
            fb_bb: true,
            cb: false,
            lb: false,
            db: true,
            gate: true,
        }
    }
}

impl BranchToggles {
    pub fn any_branch(&self) -> bool {
        self.fb_bb || self.cb || self.lb || self.db
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    pub depths: [usize; NUM_STAGES],
    pub widths: [usize; NUM_STAGES],
    pub offset_kernels: [usize; NUM_STAGES],
    /// Inner DSSM width as a multiple of the block width.
    pub ssm_ratio: usize,
    pub state_size: usize,
    pub ffn_ratio: usize,
    pub num_classes: usize,
    /// Training resolution; sizes the offset bias tables.
    pub image_size: usize,
    pub local_window: usize,
    pub branches: BranchToggles,
    pub deform: DeformToggles,
    pub bias_lookup: BiasLookup,
    pub discretization: Discretization,
    /// `None` runs the sequential recurrence.
    pub scan_chunk: Option<usize>,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let (depths, c1, num_classes, image_size) = match preset {
            Preset::Nano => ([1, 1, 2, 1], 16, 8, 32),
            Preset::Tiny => ([2, 2, 5, 2], 48, 1000, 224),
            Preset::Small => ([2, 2, 6, 2], 96, 1000, 224),
            Preset::Base => ([2, 3, 16, 2], 96, 1000, 224),
        };
        ModelConfig {
            preset,
            depths,
            widths: [c1, 2 * c1, 4 * c1, 8 * c1],
            offset_kernels: OFFSET_KERNELS,
            ssm_ratio: 1,
            state_size: DEFAULT_STATE_SIZE,
            ffn_ratio: 4,
            num_classes,
            image_size,
            local_window: DEFAULT_LOCAL_WINDOW,
            branches: BranchToggles::default(),
            deform: DeformToggles::ALL,
            bias_lookup: BiasLookup::Absolute,
            discretization: Discretization::Zoh,
            scan_chunk: None,
        }
    }

    pub fn nano() -> Self {
        Self::preset(Preset::Nano)
    }

    pub fn tiny() -> Self {
        Self::preset(Preset::Tiny)
    }

    /// Human-readable label; flags the desk-scale preset.
    pub fn label(&self) -> String {
        match self.preset {
            Preset::Nano => "nano (desk-scale preset, not a published configuration)".into(),
            p => format!("DefMamba-{}", p.name()[..1].to_uppercase()),
        }
    }

    /// Spatial side after stage `i` for a square input of side `s`.
    pub fn stage_side(s: usize, stage: usize) -> usize {
        s >> (stage + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.depths.contains(&0) {
            return Err(Error::config("stage depths and widths must be positive"));
        }
        if !self.widths[0].is_multiple_of(2) {
            return Err(Error::config(format!(
                "first stage width must be even for the stem, got {}",
                self.widths[0]
            )));
        }
        if let Some(&k) = self.offset_kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::config(format!("offset kernel must be odd, got {k}")));
        }
        if self.ssm_ratio == 0
            || self.state_size == 0
            || self.ffn_ratio == 0
            || self.num_classes == 0
        {
            return Err(Error::config(
                "ssm_ratio, state_size, ffn_ratio and num_classes must be positive",
            ));
        }
        if self.local_window == 0 {
            return Err(Error::config("local window must be at least 1"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(RESOLUTION_DIVISOR) {
            return Err(Error::config(format!(
                "image size must be a positive multiple of {RESOLUTION_DIVISOR}, got {}",
                self.image_size
            )));
        }
        if !self.branches.any_branch() {
            return Err(Error::config("at least one DSSM branch must be enabled"));
        }
        if self.scan_chunk == Some(0) {
            return Err(Error::config("scan chunk must be at least 1"));
        }
        Ok(())
    }
}
