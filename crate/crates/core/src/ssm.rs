//! Selective (input-conditioned) state space scan with a diagonal evolution
//! matrix.
//!
//! For each channel `d` and state `n` the continuous system is discretized
//! per step with zero-order hold:
//!
//! ```text
//! A_bar = exp(Δ a)
//! B_bar = (exp(Δ a) - 1) / (Δ a) · Δ B
//! h_t   = A_bar_t h_{t-1} + B_bar_t u_t
//! y_t   = Σ_n C_t[n] h_t[n] + D u_t
//! ```
//!
//! `a = -exp(A_log)` keeps every `A_bar` in `(0, 1)`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::{fan_in_uniform, uniform, SeedRng};
use crate::ops::{linear, softplus};
use crate::tensor::Tensor;

pub const DEFAULT_STATE_SIZE: usize = 16;

/// Below this `|Δa|` the hold factor uses its Taylor series.
const ZOH_SERIES_CUTOFF: f64 = 1e-4;
const ZOH_DERIV_SERIES_CUTOFF: f64 = 1e-2;

pub fn default_dt_rank(d: usize) -> usize {
    (d / 16).max(1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Discretization {
    /// Exact zero-order hold for `B_bar`.
    #[default]
    Zoh,
    /// First-order `B_bar = Δ B`.
    Euler,
}

impl fmt::Display for Discretization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Discretization::Zoh => "zoh",
            Discretization::Euler => "euler",
        })
    }
}

impl FromStr for Discretization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zoh" => Ok(Discretization::Zoh),
            "euler" => Ok(Discretization::Euler),
            _ => Err(Error::config(format!("unknown discretization {s:?}"))),
        }
    }
}

/// `(exp(z) - 1) / z`.
#[inline]
pub fn hold_factor(z: f64) -> f64 {
    if z.abs() < ZOH_SERIES_CUTOFF {
        1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0))
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`hold_factor`].
#[inline]
fn hold_factor_deriv(z: f64) -> f64 {
    if z.abs() < ZOH_DERIV_SERIES_CUTOFF {
        // Σ_k k z^(k-1) / (k+1)!
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z * (1.0 / 144.0 + z / 840.0))))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Learnable parameters of one selective scan.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `[D, N]`, realized as `A = -exp(A_log)`.
    pub a_log: Tensor,
    /// `[D]` direct feedthrough.
    pub d_skip: Tensor,
    /// `[D, N]`
    pub w_b: Tensor,
    /// `[D, N]`
    pub w_c: Tensor,
    /// `[D, R]`
    pub w_dt: Tensor,
    /// `[R, D]`
    pub w_dt_out: Tensor,
    /// `[D]`
    pub b_dt: Tensor,
}

impl SsmParams {
    /// `A_log[d, n] = ln(n + 1)`, `D = 1`, timescale bias drawn so that
    /// `softplus(b_dt)` is log-uniform in `[1e-3, 1e-1]`.
    pub fn init(rng: &mut SeedRng, d: usize, n: usize, rank: usize) -> Result<Self> {
        use rand::Rng;
        if d == 0 || n == 0 || rank == 0 {
            return Err(Error::config(format!(
                "SSM extents must be positive (D={d}, N={n}, rank={rank})"
            )));
        }
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let b_dt = Tensor::from_fn(&[d], |_| {
            let dt = rng.gen_range(lo..hi).exp().max(1e-4);
            // inverse softplus
            dt + (-(-dt).exp_m1()).ln()
        });
        Ok(SsmParams {
            a_log: Tensor::from_fn(&[d, n], |i| ((i % n) as f64 + 1.0).ln()),
            d_skip: Tensor::full(&[d], 1.0),
            w_b: fan_in_uniform(rng, &[d, n], d),
            w_c: fan_in_uniform(rng, &[d, n], d),
            w_dt: fan_in_uniform(rng, &[d, rank], d),
            w_dt_out: uniform(rng, &[rank, d], 1.0 / (rank as f64).sqrt()),
            b_dt,
        })
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// Realized diagonal evolution `A = -exp(A_log)`, strictly negative.
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }
}

/// Input-conditioned scan inputs for one sequence.
#[derive(Clone, Debug)]
pub struct ScanInputs {
    /// `[L, D]`
    pub u: Tensor,
    /// `[L, D]`, strictly positive.
    pub delta: Tensor,
    /// `[L, N]`
    pub b: Tensor,
    /// `[L, N]`
    pub c: Tensor,
}

/// Per-step discretized system, `[L, D, N]` each.
#[derive(Clone, Debug)]
pub struct DiscretizedScan {
    pub a_bar: Tensor,
    /// `B_bar · u`, premultiplied.
    pub b_bar_u: Tensor,
}

impl DiscretizedScan {
    fn dims(&self) -> (usize, usize, usize) {
        let s = self.a_bar.shape();
        (s[0], s[1], s[2])
    }
}

/// `B = x W_B`, `C = x W_C`, `Δ = softplus(x W_Δ W_Δout + b_Δ)`.
pub fn s6_project(x: &Tensor, params: &SsmParams) -> Result<ScanInputs> {
    let d = params.channels();
    if x.rank() != 2 || x.shape()[1] != d {
        return Err(Error::dim("s6_project", x.shape(), params.a_log.shape()));
    }
    let b = linear(x, &params.w_b, None)?;
    let c = linear(x, &params.w_c, None)?;
    let low = linear(x, &params.w_dt, None)?;
    let delta = linear(&low, &params.w_dt_out, Some(&params.b_dt))?.map(softplus);
    Ok(ScanInputs {
        u: x.clone(),
        delta,
        b,
        c,
    })
}

fn scan_dims(delta: &Tensor, a: &Tensor, b: &Tensor, u: &Tensor) -> Result<(usize, usize, usize)> {
    let [d, n] = *a.shape() else {
        return Err(Error::dim("discretize", a.shape(), &[0, 0]));
    };
    let l = u.shape().first().copied().unwrap_or(0);
    u.expect_shape("discretize u", &[l, d])?;
    delta.expect_shape("discretize delta", &[l, d])?;
    b.expect_shape("discretize B", &[l, n])?;
    Ok((l, d, n))
}

pub fn discretize(
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    u: &Tensor,
    mode: Discretization,
) -> Result<DiscretizedScan> {
    Ok(discretize_saving_hold(delta, a, b, u, mode)?.0)
}

/// `exp(z)` and [`hold_factor`] with a single transcendental: small `|z|`
/// uses the Taylor series of `φ`, which reaches full precision by 15 terms.
#[inline]
fn zoh_terms(z: f64) -> (f64, f64) {
    let a_bar = z.exp();
    let phi = if z.abs() >= 0.5 {
        (a_bar - 1.0) / z
    } else {
        // φ(z) = Σ_k z^k / (k+1)! in nested form 1 + z/2 (1 + z/3 (1 + ...))
        const INV: [f64; 14] = [
            1.0 / 2.0,
            1.0 / 3.0,
            1.0 / 4.0,
            1.0 / 5.0,
            1.0 / 6.0,
            1.0 / 7.0,
            1.0 / 8.0,
            1.0 / 9.0,
            1.0 / 10.0,
            1.0 / 11.0,
            1.0 / 12.0,
            1.0 / 13.0,
            1.0 / 14.0,
            1.0 / 15.0,
        ];
        INV.iter().rev().fold(1.0, |acc, inv| 1.0 + acc * z * inv)
    };
    (a_bar, phi)
}

/// Derivative of [`hold_factor`] from already computed `exp(z)` and `φ(z)`.
#[inline]
fn hold_factor_deriv_from(z: f64, a_bar: f64, phi: f64) -> f64 {
    if z.abs() < ZOH_DERIV_SERIES_CUTOFF {
        hold_factor_deriv(z)
    } else {
        (a_bar - phi) / z
    }
}

/// Discretization that also returns the per-element hold factors (empty for Euler).
fn discretize_saving_hold(
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    u: &Tensor,
    mode: Discretization,
) -> Result<(DiscretizedScan, Vec<f64>)> {
    let (l, d, n) = scan_dims(delta, a, b, u)?;
    if let Some(bad) = delta.data().iter().find(|&&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::input(format!(
            "timescale must be positive, got {bad}"
        )));
    }
    let mut a_bar = vec![0.0; l * d * n];
    let mut b_bar_u = vec![0.0; l * d * n];
    let mut hold = match mode {
        Discretization::Zoh => vec![0.0; l * d * n],
        Discretization::Euler => Vec::new(),
    };
    for t in 0..l {
        let brow = &b.data()[t * n..(t + 1) * n];
        for ch in 0..d {
            let dt = delta.data()[t * d + ch];
            let ut = u.data()[t * d + ch];
            let arow = &a.data()[ch * n..(ch + 1) * n];
            let base = (t * d + ch) * n;
            for k in 0..n {
                let z = dt * arow[k];
                match mode {
                    Discretization::Zoh => {
                        let (ab, phi) = zoh_terms(z);
                        a_bar[base + k] = ab;
                        hold[base + k] = phi;
                        b_bar_u[base + k] = phi * dt * brow[k] * ut;
                    }
                    Discretization::Euler => {
                        a_bar[base + k] = z.exp();
                        b_bar_u[base + k] = dt * brow[k] * ut;
                    }
                }
            }
        }
    }
    Ok((
        DiscretizedScan {
            a_bar: Tensor::new(&[l, d, n], a_bar)?,
            b_bar_u: Tensor::new(&[l, d, n], b_bar_u)?,
        },
        hold,
    ))
}

/// Exact zero-order-hold discretization.
pub fn discretize_zoh(
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    u: &Tensor,
) -> Result<DiscretizedScan> {
    discretize(delta, a, b, u, Discretization::Zoh)
}

fn check_readout(disc: &DiscretizedScan, c: &Tensor, u: &Tensor, d_skip: &Tensor) -> Result<()> {
    let (l, d, n) = disc.dims();
    disc.b_bar_u.expect_shape("selective_scan", &[l, d, n])?;
    c.expect_shape("selective_scan C", &[l, n])?;
    u.expect_shape("selective_scan u", &[l, d])?;
    d_skip.expect_shape("selective_scan D", &[d])
}

/// Runs the recurrence from `h_0 = 0`, returning `y` and every state `h_t`.
fn scan_with_states(
    disc: &DiscretizedScan,
    c: &Tensor,
    u: &Tensor,
    d_skip: &Tensor,
) -> (Vec<f64>, Vec<f64>) {
    let (l, d, n) = disc.dims();
    let (ab, bu) = (disc.a_bar.data(), disc.b_bar_u.data());
    let mut states = vec![0.0; l * d * n];
    let mut y = vec![0.0; l * d];
    let mut h = vec![0.0; d * n];
    for t in 0..l {
        let crow = &c.data()[t * n..(t + 1) * n];
        for ch in 0..d {
            let base = (t * d + ch) * n;
            let hs = &mut h[ch * n..(ch + 1) * n];
            let mut acc = 0.0;
            for k in 0..n {
                hs[k] = ab[base + k] * hs[k] + bu[base + k];
                acc += crow[k] * hs[k];
            }
            y[t * d + ch] = acc + d_skip.data()[ch] * u.data()[t * d + ch];
        }
        states[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
    }
    (y, states)
}

pub fn selective_scan_sequential(
    disc: &DiscretizedScan,
    c: &Tensor,
    u: &Tensor,
    d_skip: &Tensor,
) -> Result<Tensor> {
    check_readout(disc, c, u, d_skip)?;
    let (l, d, _) = disc.dims();
    Tensor::new(&[l, d], scan_with_states(disc, c, u, d_skip).0)
}

/// Combine of the first-order recurrence monoid: applying `(a1, b1)` then
/// `(a2, b2)` to a state equals applying `(a1 a2, a2 b1 + b2)`.
#[inline]
pub fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// Chunked evaluation: every chunk is scanned independently from a zero
/// state while tracking its cumulative `A_bar` product, chunk carries are then
/// folded left to right with [`combine`], and each step is corrected by
/// `cumprod · carry_in`.
fn chunked_states(disc: &DiscretizedScan, chunk: usize) -> Vec<f64> {
    let (l, d, n) = disc.dims();
    let (ab, bu) = (disc.a_bar.data(), disc.b_bar_u.data());
    let dn = d * n;
    let mut local = vec![0.0; l * dn];
    let mut cumprod = vec![0.0; l * dn];

    let starts: Vec<usize> = (0..l).step_by(chunk).collect();
    for &start in &starts {
        let end = (start + chunk).min(l);
        let mut h = vec![0.0; dn];
        let mut p = vec![1.0; dn];
        for t in start..end {
            let row = t * dn;
            for j in 0..dn {
                h[j] = ab[row + j] * h[j] + bu[row + j];
                p[j] *= ab[row + j];
            }
            local[row..row + dn].copy_from_slice(&h);
            cumprod[row..row + dn].copy_from_slice(&p);
        }
    }

    // carry.1 is the true state entering the current chunk
    let mut carry = vec![(1.0, 0.0); dn];
    let mut states = local.clone();
    for &start in &starts {
        let end = (start + chunk).min(l);
        if start > 0 {
            for t in start..end {
                let row = t * dn;
                for j in 0..dn {
                    states[row + j] = local[row + j] + cumprod[row + j] * carry[j].1;
                }
            }
        }
        let last = (end - 1) * dn;
        for j in 0..dn {
            carry[j] = combine(carry[j], (cumprod[last + j], local[last + j]));
        }
    }
    states
}

pub fn selective_scan_chunked(
    disc: &DiscretizedScan,
    c: &Tensor,
    u: &Tensor,
    d_skip: &Tensor,
    chunk: usize,
) -> Result<Tensor> {
    if chunk == 0 {
        return Err(Error::config("scan chunk must be at least 1"));
    }
    check_readout(disc, c, u, d_skip)?;
    let (l, d, n) = disc.dims();
    let states = chunked_states(disc, chunk);
    Tensor::new(&[l, d], readout(&states, c, u, d_skip, l, d, n))
}

fn readout(
    states: &[f64],
    c: &Tensor,
    u: &Tensor,
    d_skip: &Tensor,
    l: usize,
    d: usize,
    n: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let crow = &c.data()[t * n..(t + 1) * n];
        for ch in 0..d {
            let hs = &states[(t * d + ch) * n..][..n];
            let acc: f64 = crow.iter().zip(hs).map(|(a, b)| a * b).sum();
            y[t * d + ch] = acc + d_skip.data()[ch] * u.data()[t * d + ch];
        }
    }
    y
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanOptions {
    pub discretization: Discretization,
    /// `None` runs the sequential recurrence.
    pub chunk: Option<usize>,
}

struct ScanSaved {
    l: usize,
    d: usize,
    n: usize,
    mode: Discretization,
    delta: Tensor,
    a: Tensor,
    b: Tensor,
    c: Tensor,
    u: Tensor,
    d_skip: Option<Tensor>,
    a_bar: Vec<f64>,
    hold: Vec<f64>,
    states: Vec<f64>,
}

impl ScanSaved {
    /// Reverse-time recurrence over the saved states, then the chain rule
    /// through the discretization.
    fn vjp(&self, gy: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (l, d, n) = (self.l, self.d, self.n);
        let dn = d * n;
        let (delta, a, b, c, u) = (
            self.delta.data(),
            self.a.data(),
            self.b.data(),
            self.c.data(),
            self.u.data(),
        );
        let mut g_delta = vec![0.0; l * d];
        let mut g_a = vec![0.0; dn];
        let mut g_b = vec![0.0; l * n];
        let mut g_c = vec![0.0; l * n];
        let mut g_u = vec![0.0; l * d];
        let mut gh = vec![0.0; dn];

        for t in (0..l).rev() {
            let row = t * dn;
            let crow = &c[t * n..(t + 1) * n];
            let brow = &b[t * n..(t + 1) * n];
            for ch in 0..d {
                let gyv = gy[t * d + ch];
                let dt = delta[t * d + ch];
                let ut = u[t * d + ch];
                let arow = &a[ch * n..(ch + 1) * n];
                let mut gd = 0.0;
                let mut gu = 0.0;
                for k in 0..n {
                    let j = ch * n + k;
                    let h_t = self.states[row + j];
                    let h_prev = if t > 0 {
                        self.states[row - dn + j]
                    } else {
                        0.0
                    };
                    g_c[t * n + k] += gyv * h_t;
                    gh[j] += crow[k] * gyv;
                    let g_abar = gh[j] * h_prev;
                    let g_bu = gh[j];
                    let abar = self.a_bar[row + j];
                    let z = dt * arow[k];
                    // A_bar = exp(Δ a)
                    gd += g_abar * arow[k] * abar;
                    g_a[j] += g_abar * dt * abar;
                    match self.mode {
                        Discretization::Zoh => {
                            let phi = self.hold[row + j];
                            let dphi = hold_factor_deriv_from(z, abar, phi);
                            let bu_unit = brow[k] * ut;
                            gd += g_bu * (dphi * z + phi) * bu_unit;
                            g_a[j] += g_bu * dphi * dt * dt * bu_unit;
                            g_b[t * n + k] += g_bu * phi * dt * ut;
                            gu += g_bu * phi * dt * brow[k];
                        }
                        Discretization::Euler => {
                            gd += g_bu * brow[k] * ut;
                            g_b[t * n + k] += g_bu * dt * ut;
                            gu += g_bu * dt * brow[k];
                        }
                    }
                    gh[j] *= abar;
                }
                g_delta[t * d + ch] = gd;
                let skip = self.d_skip.as_ref().map_or(0.0, |s| s.data()[ch]);
                g_u[t * d + ch] = gu + skip * gyv;
            }
        }
        let mut out = vec![
            need[0].then_some(g_delta),
            need[1].then_some(g_a),
            need[2].then_some(g_b),
            need[3].then_some(g_c),
            need[4].then_some(g_u),
        ];
        if need.len() == 6 {
            out.push(need[5].then(|| {
                let mut gs = vec![0.0; d];
                for t in 0..l {
                    for ch in 0..d {
                        gs[ch] += gy[t * d + ch] * u[t * d + ch];
                    }
                }
                gs
            }));
        }
        out
    }
}

impl Tape {
    /// Fused discretization and scan. `d_skip = None` drops the feedthrough.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        u: Var,
        d_skip: Option<Var>,
        opts: ScanOptions,
    ) -> Result<Var> {
        let (vdelta, va, vb, vc, vu) = (
            self.value(delta).clone(),
            self.value(a).clone(),
            self.value(b).clone(),
            self.value(c).clone(),
            self.value(u).clone(),
        );
        let (l, d, n) = scan_dims(&vdelta, &va, &vb, &vu)?;
        let skip = match d_skip {
            Some(s) => self.value(s).clone(),
            None => Tensor::zeros(&[d]),
        };
        let (disc, hold) = discretize_saving_hold(&vdelta, &va, &vb, &vu, opts.discretization)?;
        check_readout(&disc, &vc, &vu, &skip)?;
        let states = match opts.chunk {
            None => scan_with_states(&disc, &vc, &vu, &skip).1,
            Some(0) => return Err(Error::config("scan chunk must be at least 1")),
            Some(chunk) => chunked_states(&disc, chunk),
        };
        let y = readout(&states, &vc, &vu, &skip, l, d, n);
        let saved = ScanSaved {
            l,
            d,
            n,
            mode: opts.discretization,
            delta: vdelta,
            a: va,
            b: vb,
            c: vc,
            u: vu,
            d_skip: d_skip.map(|_| skip),
            a_bar: disc.a_bar.into_data(),
            hold,
            states,
        };
        let mut inputs = vec![delta, a, b, c, u];
        inputs.extend(d_skip);
        self.push(
            "selective_scan",
            Tensor::new(&[l, d], y)?,
            inputs,
            Box::new(move |g, need| saved.vjp(g, need)),
        )
    }

    /// Full S6 branch over a `[L, D]` sequence.
    pub fn ssm(&mut self, x: Var, p: &SsmVars, opts: ScanOptions) -> Result<Var> {
        let b = self.linear(x, p.w_b, None)?;
        let c = self.linear(x, p.w_c, None)?;
        let low = self.linear(x, p.w_dt, None)?;
        let dt = self.linear(low, p.w_dt_out, Some(p.b_dt))?;
        let dt = self.softplus(dt)?;
        let a = self.exp(p.a_log)?;
        let a = self.scale(a, -1.0)?;
        self.selective_scan(dt, a, b, c, x, p.d_skip, opts)
    }
}

/// Tape handles for one [`SsmParams`] set.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d_skip: Option<Var>,
    pub w_b: Var,
    pub w_c: Var,
    pub w_dt: Var,
    pub w_dt_out: Var,
    pub b_dt: Var,
}

impl SsmVars {
    pub fn bind(tape: &mut Tape, p: &SsmParams, with_skip: bool) -> Self {
        SsmVars {
            a_log: tape.leaf(p.a_log.clone()),
            d_skip: with_skip.then(|| tape.leaf(p.d_skip.clone())),
            w_b: tape.leaf(p.w_b.clone()),
            w_c: tape.leaf(p.w_c.clone()),
            w_dt: tape.leaf(p.w_dt.clone()),
            w_dt_out: tape.leaf(p.w_dt_out.clone()),
            b_dt: tape.leaf(p.b_dt.clone()),
        }
    }
}
