//! Finite-difference verification of every recorded operation's VJP.
//!
//! Each check draws its inputs from the seed, contracts the output with a
//! random cotangent `w`, and compares the tape gradient of `Σ w·f` with
//! central differences. With every input's gradient concatenated into one
//! vector, the error of a check is
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
//!
//! Bilinear reads are not differentiable on lattice lines and the token sort
//! is piecewise constant, so checks that involve them are skipped when a
//! sampled coordinate sits within [`LATTICE_MARGIN`] pixels of a lattice line
//! or a perturbation moves a coordinate across a cell or changes the order.
//! Checks in the deformable suites first redraw their inputs a few times to
//! find a differentiable point.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::deform::{
    lattice_cells, lattice_margin, make_reference_grid, BiasLookup, DeformToggles, DeformVars,
    DeformableScanWeights, OffsetBias, OffsetNetVars,
};
use crate::error::{Error, Result};
use crate::init::{rng, uniform, SeedRng};
use crate::model::{Model, ModelConfig};
use crate::ops::{Activation, ChannelAttentionVars};
use crate::ssm::{Discretization, ScanOptions, SsmParams, SsmVars};
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Minimum pixel distance between a sampled coordinate and a lattice line.
pub const LATTICE_MARGIN: f64 = 1e-3;
const STEP: f64 = 1e-5;
const REDRAWS: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Scan,
    Deformable,
    Block,
    All,
}

impl Scope {
    fn includes(self, suite: Scope) -> bool {
        self == Scope::All || self == suite
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Scan => "scan",
            Scope::Deformable => "deformable",
            Scope::Block => "block",
            Scope::All => "all",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "scan" => Ok(Scope::Scan),
            "deformable" => Ok(Scope::Deformable),
            "block" => Ok(Scope::Block),
            "all" => Ok(Scope::All),
            _ => Err(Error::config(format!(
                "unknown gradcheck scope {s:?} (expected ops, scan, deformable, block or all)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub tolerance: f64,
    /// Places every sampled coordinate on a lattice point.
    pub force_lattice: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            force_lattice: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    Pass,
    Fail,
    Skipped(String),
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub suite: Scope,
    pub op: String,
    pub rel_err: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.verdict != Verdict::Fail)
    }

    pub fn worst(&self) -> f64 {
        self.results
            .iter()
            .filter(|r| r.rel_err.is_finite())
            .map(|r| r.rel_err)
            .fold(0.0, f64::max)
    }

    /// One line per check: `suite op verdict worst_rel_err`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let verdict = match &r.verdict {
                Verdict::Pass => "pass".to_string(),
                Verdict::Fail => "FAIL".to_string(),
                Verdict::Skipped(why) => format!("skipped ({why})"),
            };
            out.push_str(&format!(
                "{:<11} {:<32} {:<10.3e} {verdict}\n",
                r.suite.to_string(),
                r.op,
                r.rel_err
            ));
        }
        out
    }
}

/// Built graph: output plus a fingerprint of every discrete choice made on
/// the way (lattice cells, sort orders). The check is only valid while the
/// fingerprint stays constant.
struct Built {
    out: Var,
    fingerprint: Vec<i64>,
    margin: f64,
}

impl Built {
    fn smooth(out: Var) -> Built {
        Built {
            out,
            fingerprint: Vec::new(),
            margin: f64::INFINITY,
        }
    }
}

type BuildFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Built> + 'a;

fn contract(tape: &Tape, out: Var, w: &Tensor) -> f64 {
    tape.value(out)
        .data()
        .iter()
        .zip(w.data())
        .map(|(a, b)| a * b)
        .sum()
}

fn run(inputs: &[Tensor], build: &BuildFn) -> Result<(Tape, Vec<Var>, Built)> {
    let mut tape = Tape::new();
    tape.set_straight_through(false);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let built = build(&mut tape, &vars)?;
    Ok((tape, vars, built))
}

enum Outcome {
    Checked(f64),
    NotSmooth(String),
}

fn compare(inputs: &[Tensor], build: &BuildFn, rng: &mut SeedRng) -> Result<Outcome> {
    let (tape, vars, base) = run(inputs, build)?;
    if base.margin < LATTICE_MARGIN {
        return Ok(Outcome::NotSmooth(format!(
            "coordinate {:.1e} px from a lattice line",
            base.margin
        )));
    }
    let w = uniform(rng, tape.shape(base.out), 1.0);
    let grads = tape.backward_with(base.out, &w)?;
    let mut inputs = inputs.to_vec();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, v);
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            let mut eval = |x: f64| -> Result<Option<f64>> {
                inputs[i].data_mut()[e] = x;
                let (t, _, b) = run(&inputs, build)?;
                Ok((b.fingerprint == base.fingerprint).then(|| contract(&t, b.out, &w)))
            };
            let plus = eval(orig + STEP)?;
            let minus = eval(orig - STEP)?;
            inputs[i].data_mut()[e] = orig;
            let (Some(p), Some(m)) = (plus, minus) else {
                return Ok(Outcome::NotSmooth(
                    "perturbation crossed a lattice line or reordered tokens".into(),
                ));
            };
            let numeric = (p - m) / (2.0 * STEP);
            let a = analytic.data()[e];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let scale = na.max(nn).sqrt();
    let diff = diff.sqrt();
    Ok(Outcome::Checked(if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }))
}

struct Suite {
    scope: Scope,
    opts: GradcheckOptions,
    rng: SeedRng,
    results: Vec<CheckResult>,
}

impl Suite {
    fn record(&mut self, op: &str, outcome: Outcome) {
        let (rel_err, verdict) = match outcome {
            Outcome::Checked(e) if e <= self.opts.tolerance => (e, Verdict::Pass),
            Outcome::Checked(e) => (e, Verdict::Fail),
            Outcome::NotSmooth(why) => (f64::NAN, Verdict::Skipped(why)),
        };
        self.results.push(CheckResult {
            suite: self.scope,
            op: op.to_string(),
            rel_err,
            verdict,
        });
    }

    fn check(&mut self, op: &str, inputs: Vec<Tensor>, build: &BuildFn) -> Result<()> {
        let outcome = compare(&inputs, build, &mut self.rng)?;
        self.record(op, outcome);
        Ok(())
    }

    /// Redraws inputs until the point is differentiable, unless lattice
    /// placement was requested.
    fn check_redrawing(
        &mut self,
        op: &str,
        draw: &dyn Fn(&mut SeedRng) -> Vec<Tensor>,
        build: &BuildFn,
    ) -> Result<()> {
        let attempts = if self.opts.force_lattice { 1 } else { REDRAWS };
        let mut last = Outcome::NotSmooth("no attempt".into());
        for _ in 0..attempts {
            let inputs = draw(&mut self.rng);
            last = compare(&inputs, build, &mut self.rng)?;
            if let Outcome::Checked(_) = last {
                break;
            }
        }
        self.record(op, last);
        Ok(())
    }

    fn u(&mut self, shape: &[usize], bound: f64) -> Tensor {
        uniform(&mut self.rng, shape, bound)
    }

    fn positive(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }
}

fn ops_suite(s: &mut Suite) -> Result<()> {
    let ab = |s: &mut Suite| vec![s.u(&[3, 4], 1.0), s.u(&[3, 4], 1.0)];
    let inputs = ab(s);
    s.check("add", inputs, &|t, v| Ok(Built::smooth(t.add(v[0], v[1])?)))?;
    let inputs = ab(s);
    s.check("sub", inputs, &|t, v| Ok(Built::smooth(t.sub(v[0], v[1])?)))?;
    let inputs = ab(s);
    s.check("mul", inputs, &|t, v| Ok(Built::smooth(t.mul(v[0], v[1])?)))?;
    let inputs = vec![s.u(&[3, 4], 1.0)];
    s.check("scale", inputs, &|t, v| {
        Ok(Built::smooth(t.scale(v[0], -1.7)?))
    })?;
    let inputs = vec![s.u(&[3, 4], 1.0)];
    s.check("exp", inputs, &|t, v| Ok(Built::smooth(t.exp(v[0])?)))?;
    let inputs = vec![s.u(&[2, 3], 1.0), s.u(&[2, 3], 1.0), s.u(&[2, 3], 1.0)];
    s.check("sum_n", inputs, &|t, v| Ok(Built::smooth(t.sum_n(v)?)))?;
    let inputs = vec![s.u(&[2, 3, 4], 1.0), s.u(&[4], 1.0)];
    s.check("add_bias", inputs, &|t, v| {
        Ok(Built::smooth(t.add_bias(v[0], v[1])?))
    })?;
    let inputs = vec![s.u(&[2, 3, 4], 1.0), s.u(&[4], 1.0)];
    s.check("mul_channel", inputs, &|t, v| {
        Ok(Built::smooth(t.mul_channel(v[0], v[1])?))
    })?;
    let inputs = vec![s.u(&[5, 3], 1.0), s.u(&[5, 1], 1.0)];
    s.check("add_row_scalar", inputs, &|t, v| {
        Ok(Built::smooth(t.add_row_scalar(v[0], v[1])?))
    })?;
    let inputs = vec![s.u(&[2, 6], 1.0)];
    s.check("reshape", inputs, &|t, v| {
        let r = t.reshape(v[0], &[3, 4])?;
        Ok(Built::smooth(t.exp(r)?))
    })?;
    let inputs = vec![s.u(&[3, 5], 1.0)];
    s.check("slice_last", inputs, &|t, v| {
        Ok(Built::smooth(t.slice_last(v[0], 1, 3)?))
    })?;
    let mut idx: Vec<usize> = (0..4).collect();
    idx.shuffle(&mut s.rng);
    idx.push(idx[0]);
    let idx: Arc<[usize]> = idx.into();
    let inputs = vec![s.u(&[4, 3], 1.0)];
    s.check("gather_rows", inputs, &|t, v| {
        Ok(Built::smooth(t.gather_rows(v[0], Arc::clone(&idx))?))
    })?;
    let inputs = vec![s.u(&[3, 4], 1.0), s.u(&[4, 2], 1.0)];
    s.check("matmul", inputs, &|t, v| {
        Ok(Built::smooth(t.matmul(v[0], v[1])?))
    })?;
    let inputs = vec![s.u(&[2, 3, 4], 1.0), s.u(&[4, 5], 1.0), s.u(&[5], 1.0)];
    s.check("linear", inputs, &|t, v| {
        Ok(Built::smooth(t.linear(v[0], v[1], Some(v[2]))?))
    })?;
    let inputs = vec![s.u(&[3, 3, 4], 1.0), s.u(&[4, 2], 1.0), s.u(&[2], 1.0)];
    s.check("pointwise_conv", inputs, &|t, v| {
        Ok(Built::smooth(t.pointwise_conv(v[0], v[1], Some(v[2]))?))
    })?;
    let inputs = vec![s.u(&[5, 5, 3], 1.0), s.u(&[3, 3, 3], 1.0), s.u(&[3], 1.0)];
    s.check("depthwise_conv2d", inputs, &|t, v| {
        Ok(Built::smooth(t.depthwise_conv2d(
            v[0],
            v[1],
            Some(v[2]),
            1,
            1,
        )?))
    })?;
    let inputs = vec![s.u(&[6, 6, 2], 1.0), s.u(&[5, 5, 2], 1.0), s.u(&[2], 1.0)];
    s.check("depthwise_conv2d_stride2", inputs, &|t, v| {
        Ok(Built::smooth(t.depthwise_conv2d(
            v[0],
            v[1],
            Some(v[2]),
            2,
            2,
        )?))
    })?;
    let inputs = vec![
        s.u(&[6, 6, 2], 1.0),
        s.u(&[3, 3, 2, 3], 1.0),
        s.u(&[3], 1.0),
    ];
    s.check("conv2d", inputs, &|t, v| {
        Ok(Built::smooth(t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?))
    })?;
    let inputs = vec![s.u(&[3, 4, 5], 1.0), s.u(&[5], 1.0), s.u(&[5], 1.0)];
    s.check("layer_norm", inputs, &|t, v| {
        Ok(Built::smooth(t.layer_norm(v[0], v[1], v[2], 1e-6)?))
    })?;
    for act in Activation::ALL {
        let inputs = vec![s.u(&[4, 5], 2.0)];
        s.check(act.name(), inputs, &|t, v| {
            Ok(Built::smooth(t.activation(act, v[0])?))
        })?;
    }
    let inputs = vec![s.u(&[3, 3, 4], 1.0)];
    s.check("global_avg_pool", inputs, &|t, v| {
        Ok(Built::smooth(t.global_avg_pool(v[0])?))
    })?;
    let labels: Vec<usize> = (0..3).map(|_| s.rng.gen_range(0..5)).collect();
    let inputs = vec![s.u(&[3, 5], 2.0)];
    s.check("cross_entropy", inputs, &|t, v| {
        Ok(Built::smooth(t.cross_entropy(v[0], &labels, 0.1)?))
    })?;
    let inputs = vec![
        s.u(&[4, 4, 8], 1.0),
        s.u(&[8, 2], 0.7),
        s.u(&[2], 0.5),
        s.u(&[2, 8], 0.7),
        s.u(&[8], 0.5),
    ];
    s.check("channel_attention", inputs, &|t, v| {
        let w = ChannelAttentionVars {
            w1: v[1],
            b1: v[2],
            w2: v[3],
            b2: v[4],
        };
        Ok(Built::smooth(t.channel_attention(v[0], w)?))
    })?;
    Ok(())
}

fn scan_suite(s: &mut Suite) -> Result<()> {
    let (l, d, n) = (6, 3, 4);
    let variants: [(&str, Discretization, Option<usize>, bool, f64); 5] = [
        ("selective_scan_zoh", Discretization::Zoh, None, true, 1e-3),
        (
            "selective_scan_zoh_chunked",
            Discretization::Zoh,
            Some(4),
            true,
            1e-3,
        ),
        (
            "selective_scan_zoh_small_step",
            Discretization::Zoh,
            None,
            true,
            1e-5,
        ),
        (
            "selective_scan_euler",
            Discretization::Euler,
            None,
            true,
            1e-3,
        ),
        (
            "selective_scan_no_skip",
            Discretization::Zoh,
            Some(2),
            false,
            1e-3,
        ),
    ];
    for (name, disc, chunk, skip, lo) in variants {
        let mut inputs = vec![
            s.positive(&[l, d], lo, 10.0 * lo + 0.5),
            s.positive(&[d, n], -2.0, -0.1),
            s.u(&[l, n], 1.0),
            s.u(&[l, n], 1.0),
            s.u(&[l, d], 1.0),
        ];
        if skip {
            inputs.push(s.u(&[d], 1.0));
        }
        let opts = ScanOptions {
            discretization: disc,
            chunk,
        };
        s.check(name, inputs, &|t, v| {
            let out = t.selective_scan(v[0], v[1], v[2], v[3], v[4], v.get(5).copied(), opts)?;
            Ok(Built::smooth(out))
        })?;
    }
    let p = SsmParams::init(&mut s.rng, d, n, 1)?;
    let inputs = vec![
        s.u(&[l, d], 1.0),
        p.a_log,
        p.d_skip,
        p.w_b,
        p.w_c,
        p.w_dt,
        p.w_dt_out,
        p.b_dt,
    ];
    s.check("ssm", inputs, &|t, v| {
        let vars = SsmVars {
            a_log: v[1],
            d_skip: Some(v[2]),
            w_b: v[3],
            w_c: v[4],
            w_dt: v[5],
            w_dt_out: v[6],
            b_dt: v[7],
        };
        Ok(Built::smooth(t.ssm(v[0], &vars, ScanOptions::default())?))
    })?;
    Ok(())
}

/// Interior coordinates near (or, when forced, exactly on) random lattice
/// points. Extents must be at least 2.
fn draw_coords(rng: &mut SeedRng, m: usize, h: usize, w: usize, force_lattice: bool) -> Tensor {
    Tensor::from_fn(&[m, 2], |i| {
        let extent = if i % 2 == 0 { w } else { h };
        let last = (extent - 1) as f64;
        let lattice = rng.gen_range(0..extent) as f64;
        let jitter = if force_lattice {
            0.0
        } else {
            rng.gen_range(0.05..0.45)
        };
        let pixel = if lattice < last {
            lattice + jitter
        } else {
            lattice - jitter
        };
        2.0 * pixel / last - 1.0
    })
}

fn sampling(coords: &Tensor, h: usize, w: usize, out: Var) -> Built {
    Built {
        out,
        fingerprint: lattice_cells(coords.data(), h, w),
        margin: lattice_margin(coords.data(), h, w),
    }
}

fn deformable_suite(s: &mut Suite) -> Result<()> {
    let force = s.opts.force_lattice;
    let (h, w, c) = (4, 5, 3);
    s.check_redrawing(
        "bilinear_sample",
        &|rng| {
            vec![
                uniform(rng, &[h, w, c], 1.0),
                draw_coords(rng, 7, h, w, force),
            ]
        },
        &|t, v| {
            let out = t.bilinear_sample(v[0], v[1])?;
            Ok(sampling(t.value(v[1]), h, w, out))
        },
    )?;

    let grid = make_reference_grid(h, w)?.p.reshape(&[h * w, 2])?;
    for lookup in [BiasLookup::Absolute, BiasLookup::Relative] {
        let name = format!("sample_with_bias_{lookup}");
        let grid = grid.clone();
        s.check_redrawing(
            &name,
            &|rng| {
                let dp = if force {
                    Tensor::zeros(&[h * w, 2])
                } else {
                    Tensor::from_fn(&[h * w, 2], |i| {
                        let extent = if i % 2 == 0 { w } else { h };
                        rng.gen_range(-1.0..1.0) / extent as f64
                    })
                };
                vec![
                    uniform(rng, &[h, w, c], 1.0),
                    uniform(rng, &[h, w], 1.0),
                    dp,
                ]
            },
            &|t, v| {
                let g = t.constant(grid.clone());
                let out = t.sample_with_bias(v[0], Some(v[1]), g, v[2], lookup)?;
                let coords: Vec<f64> = grid
                    .data()
                    .iter()
                    .zip(t.value(v[2]).data())
                    .map(|(p, d)| p + d)
                    .collect();
                let rc: Vec<f64> = match lookup {
                    BiasLookup::Absolute => grid
                        .data()
                        .iter()
                        .zip(t.value(v[2]).data())
                        .map(|(p, d)| p + 0.5 * d)
                        .collect(),
                    BiasLookup::Relative => t.value(v[2]).data().iter().map(|d| 0.5 * d).collect(),
                };
                let mut fingerprint = lattice_cells(&coords, h, w);
                fingerprint.extend(lattice_cells(&rc, h, w));
                Ok(Built {
                    out,
                    fingerprint,
                    margin: lattice_margin(&coords, h, w).min(lattice_margin(&rc, h, w)),
                })
            },
        )?;
    }

    let (h, w, c, k) = (4, 4, 4, 3);
    s.check_redrawing(
        "offset_network",
        &|rng| {
            let weights = random_deform_weights(rng, c, k, (h, w), DeformToggles::ALL)
                .expect("valid offset network shape");
            let mut v = vec![uniform(rng, &[h, w, c], 1.0)];
            v.extend(flatten_offset(&weights));
            v
        },
        &|t, v| {
            let vars = offset_vars(&v[1..]);
            Ok(Built::smooth(t.offset_network(v[0], &vars)?))
        },
    )?;

    for (name, toggles) in [
        ("deformable_scan", DeformToggles::ALL),
        (
            "deformable_scan_points_only",
            DeformToggles {
                dt: false,
                ..DeformToggles::ALL
            },
        ),
    ] {
        s.check_redrawing(
            name,
            &|rng| {
                let mut weights = random_deform_weights(rng, c, k, (h, w), toggles)
                    .expect("valid deformable weights");
                if force {
                    if let Some(o) = weights.offset.as_mut() {
                        o.proj = Tensor::zeros(o.proj.shape());
                    }
                }
                let mut v = vec![uniform(rng, &[h, w, c], 1.0)];
                v.extend(flatten_offset(&weights));
                v.push(weights.bias.expect("bias enabled").r);
                v
            },
            &|t, v| {
                let n_off = v.len() - 2;
                let vars = DeformVars {
                    offset: Some(offset_vars(&v[1..=n_off])),
                    bias: Some(v[n_off + 1]),
                    lookup: BiasLookup::Absolute,
                };
                let out = t.deformable_scan(v[0], toggles, &vars)?;
                Ok(deform_fingerprint(
                    t,
                    out.seq,
                    &out.order,
                    out.delta_p,
                    h,
                    w,
                ))
            },
        )?;
    }
    Ok(())
}

fn deform_fingerprint(
    t: &Tape,
    out: Var,
    order: &crate::scan_order::ScanOrder,
    delta_p: Option<Var>,
    h: usize,
    w: usize,
) -> Built {
    let mut fingerprint: Vec<i64> = order.order().iter().map(|&i| i as i64).collect();
    let mut margin = f64::INFINITY;
    if let Some(dp) = delta_p {
        let grid = make_reference_grid(h, w).expect("non-empty grid").p;
        let coords: Vec<f64> = grid
            .data()
            .iter()
            .zip(t.value(dp).data())
            .map(|(p, d)| p + d)
            .collect();
        let half: Vec<f64> = grid
            .data()
            .iter()
            .zip(t.value(dp).data())
            .map(|(p, d)| p + 0.5 * d)
            .collect();
        fingerprint.extend(lattice_cells(&coords, h, w));
        fingerprint.extend(lattice_cells(&half, h, w));
        margin = lattice_margin(&coords, h, w).min(lattice_margin(&half, h, w));
    }
    Built {
        out,
        fingerprint,
        margin,
    }
}

/// Deformable-scan weights with a live final projection and bias table.
pub fn random_deform_weights(
    rng: &mut SeedRng,
    c: usize,
    k: usize,
    bias_hw: (usize, usize),
    toggles: DeformToggles,
) -> Result<DeformableScanWeights> {
    let mut weights = DeformableScanWeights::init(rng, c, k, bias_hw, toggles)?;
    if let Some(o) = weights.offset.as_mut() {
        o.proj = uniform(rng, o.proj.shape(), 1.5);
        o.ln_g = Tensor::from_fn(o.ln_g.shape(), |_| rng.gen_range(0.5..1.5));
        o.ln_b = uniform(rng, o.ln_b.shape(), 0.2);
        o.dw_b = uniform(rng, o.dw_b.shape(), 0.2);
    }
    if toggles.uses_bias() {
        weights.bias = Some(OffsetBias {
            r: uniform(rng, &[bias_hw.0, bias_hw.1], 1.0),
        });
    }
    Ok(weights)
}

fn flatten_offset(w: &DeformableScanWeights) -> Vec<Tensor> {
    let o = w.offset.as_ref().expect("offset network present");
    let mut v = vec![o.dw_w.clone(), o.dw_b.clone()];
    if let Some(ca) = &o.ca {
        v.extend([ca.w1.clone(), ca.b1.clone(), ca.w2.clone(), ca.b2.clone()]);
    }
    v.extend([o.ln_g.clone(), o.ln_b.clone(), o.proj.clone()]);
    v
}

fn offset_vars(v: &[Var]) -> OffsetNetVars {
    let ca = (v.len() == 9).then(|| ChannelAttentionVars {
        w1: v[2],
        b1: v[3],
        w2: v[4],
        b2: v[5],
    });
    let tail = &v[v.len() - 3..];
    OffsetNetVars {
        dw_w: v[0],
        dw_b: v[1],
        ca,
        ln_g: tail[0],
        ln_b: tail[1],
        proj: tail[2],
    }
}

/// A small model whose first block runs at 4×4×8 with live offsets.
fn block_model(rng: &mut SeedRng, force_lattice: bool) -> Result<Model> {
    let mut cfg = ModelConfig::nano();
    cfg.widths = [8, 16, 32, 64];
    let mut model = Model::new(cfg, rng.gen())?;
    let block = model.stages()[0].blocks[0].clone();
    let deform = block.dssm.deform.clone().expect("deformable branch");
    let offset = deform.offset.expect("offset network");
    let store = model.store_mut();
    let proj = if force_lattice {
        Tensor::zeros(store.value(offset.proj).shape())
    } else {
        uniform(rng, store.value(offset.proj).shape(), 1.5)
    };
    store.set_value(offset.proj, proj)?;
    if let Some(r) = deform.bias {
        let shape = store.value(r).shape().to_vec();
        store.set_value(r, uniform(rng, &shape, 1.0))?;
    }
    Ok(model)
}

fn block_suite(s: &mut Suite) -> Result<()> {
    let force = s.opts.force_lattice;
    let attempts = if force { 1 } else { REDRAWS };
    let mut last = Outcome::NotSmooth("no attempt".into());
    for _ in 0..attempts {
        let model = block_model(&mut s.rng, force)?;
        let block = model.stages()[0].blocks[0].clone();
        let ids = block.ids();
        let mut inputs = vec![uniform(&mut s.rng, &[4, 4, 8], 1.0)];
        inputs.extend(ids.iter().map(|&id| model.store().value(id).clone()));
        let build = |t: &mut Tape, v: &[Var]| -> Result<Built> {
            let mut b = model.store().bind_frozen(t);
            for (&id, &var) in ids.iter().zip(&v[1..]) {
                b.set(id, var);
            }
            let mut recs = Vec::new();
            let out = model.dm_block(t, &b, &block, v[0], &mut recs)?;
            let mut built = Built::smooth(out);
            for r in &recs {
                let f = deform_fingerprint(t, out, &r.order, r.delta_p, 4, 4);
                built.fingerprint.extend(f.fingerprint);
                built.margin = built.margin.min(f.margin);
            }
            Ok(built)
        };
        last = compare(&inputs, &build, &mut s.rng)?;
        if let Outcome::Checked(_) = last {
            break;
        }
    }
    s.record("dm_block", last);
    Ok(())
}

type SuiteFn = fn(&mut Suite) -> Result<()>;

pub fn gradcheck(scope: Scope, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    let suites: [(Scope, SuiteFn); 4] = [
        (Scope::Ops, ops_suite),
        (Scope::Scan, scan_suite),
        (Scope::Deformable, deformable_suite),
        (Scope::Block, block_suite),
    ];
    for (k, (suite, run_suite)) in suites.into_iter().enumerate() {
        if !scope.includes(suite) {
            continue;
        }
        let mut s = Suite {
            scope: suite,
            opts,
            rng: rng(opts.seed.wrapping_mul(0x9e37_79b9).wrapping_add(k as u64)),
            results: Vec::new(),
        };
        run_suite(&mut s)?;
        report.results.extend(s.results);
    }
    Ok(report)
}
