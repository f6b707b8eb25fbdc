//! Scan-strategy ablation: trains a grid of branch and component variants
//! on the same data and reports one CSV row per variant.

use crate::autodiff::Tape;
use crate::deform::DeformToggles;
use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::harness::data::{synth_dataset, SynthSample};
use crate::harness::train::train;
use crate::model::{effective_kind, BranchKind, BranchToggles, Model, ModelConfig};
use crate::scan_order::{adjacency_retention, fixed_order};

pub const BENCH_HEADER: &str = "variant,params,steps,train_acc,eval_acc,adjacency_retention";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: String,
    pub params: usize,
    pub steps: usize,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub adjacency_retention: f64,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6}",
            self.variant,
            self.params,
            self.steps,
            self.train_acc,
            self.eval_acc,
            self.adjacency_retention
        )
    }
}

pub fn render_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Branch grid: the forward/backward raster pair plus at most one extra branch.
pub fn branch_grid(gate: bool) -> Vec<(&'static str, BranchToggles)> {
    let base = BranchToggles {
        fb_bb: true,
        cb: false,
        lb: false,
        db: false,
        gate,
    };
    vec![
        ("FB-BB", base),
        ("FB-BB+CB", BranchToggles { cb: true, ..base }),
        ("FB-BB+LB", BranchToggles { lb: true, ..base }),
        ("FB-BB+DB", BranchToggles { db: true, ..base }),
    ]
}

/// Component grid of the deformable branch, each row adding to the last
/// except the first two.
pub fn component_grid() -> Vec<(&'static str, DeformToggles)> {
    let none = DeformToggles {
        dp: false,
        dt: false,
        ob: false,
        ca: false,
    };
    vec![
        ("DP", DeformToggles { dp: true, ..none }),
        ("DT", DeformToggles { dt: true, ..none }),
        (
            "DP+DT",
            DeformToggles {
                dp: true,
                dt: true,
                ..none
            },
        ),
        (
            "DP+DT+OB",
            DeformToggles {
                ob: true,
                ..DeformToggles {
                    dp: true,
                    dt: true,
                    ..none
                }
            },
        ),
        ("DP+DT+OB+CA", DeformToggles::ALL),
    ]
}

/// Model configurations of every benchmark row, in output order.
pub fn bench_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut out = Vec::new();
    for (name, branches) in branch_grid(base.branches.gate) {
        out.push((
            name.to_string(),
            ModelConfig {
                branches,
                ..base.clone()
            },
        ));
    }
    let with_db = BranchToggles {
        fb_bb: true,
        cb: false,
        lb: false,
        db: true,
        gate: base.branches.gate,
    };
    for (name, deform) in component_grid() {
        out.push((
            name.to_string(),
            ModelConfig {
                branches: with_db,
                deform,
                ..base.clone()
            },
        ));
    }
    out
}

/// Mean adjacency retention of the first block's scan orders over `samples`.
/// With a deformable branch only its learned order counts; otherwise the
/// fixed branch orders are averaged.
pub fn scan_retention(model: &Model, samples: &[SynthSample]) -> Result<f64> {
    let block = &model.stages()[0].blocks[0];
    let kinds: Vec<BranchKind> = block.dssm.branches.iter().map(|b| b.kind).collect();
    if !kinds.contains(&BranchKind::Deformable) {
        let side = ModelConfig::stage_side(model.config().image_size, 0);
        let mut sum = 0.0;
        for &k in &kinds {
            if let BranchKind::Fixed(kind) = k {
                sum += adjacency_retention(
                    &fixed_order(effective_kind(kind, side, side), side, side)?,
                    side,
                    side,
                )?;
            }
        }
        return Ok(sum / kinds.len() as f64);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in samples {
        let mut tape = Tape::new();
        let b = model.store().bind_frozen(&mut tape);
        let img = tape.constant(s.image.clone());
        let trace = model.forward(&mut tape, &b, img)?;
        for r in trace.deform.iter().filter(|r| r.stage == 0 && r.block == 0) {
            sum += adjacency_retention(&r.order, r.height, r.width)?;
            count += 1;
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Trains every variant with the optimizer, data and step budget of `cfg`.
pub fn bench_scan(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let eval_set = synth_dataset(
        cfg.data.kind,
        cfg.data.eval_size,
        cfg.data.seed.wrapping_add(1),
    )?;
    let mut rows = Vec::new();
    for (variant, model) in bench_variants(&cfg.model) {
        let run = RunConfig {
            model,
            ..cfg.clone()
        };
        let report = train(&run, None)?;
        rows.push(BenchRow {
            variant,
            params: report.model.param_count(),
            steps: run.train.steps,
            train_acc: report.train_acc,
            eval_acc: report.eval_acc,
            adjacency_retention: scan_retention(&report.model, &eval_set)?,
        });
    }
    Ok(rows)
}
