//! Deformable scanning.
//!
//! An offset network predicts three channels per token. After `tanh`, the
//! first two displace each token's reference point (bounded to `1/W`, `1/H`
//! in normalized coordinates) and features are re-read there by bilinear
//! interpolation, plus an interpolated positional bias. The third channel
//! perturbs the normalized token index; sorting the perturbed indices gives
//! the scan order. The sort has no useful derivative, so its backward pass
//! hands each index offset the channel mean of its token's sequence
//! gradient instead.
//!
//! Coordinates use the align-corners convention: `(-1, -1)` is the centre of
//! the top-left token and `(1, 1)` the bottom-right one. Channel 0 of every
//! coordinate pair is horizontal, channel 1 vertical.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::{fan_in_uniform, SeedRng};
use crate::ops::{
    activation, ca_hidden_width, channel_attention, depthwise_conv2d, layer_norm, pointwise_conv,
    scatter_rows, Activation, ChannelAttentionVars, ChannelAttentionWeights, LN_EPS,
};
use crate::scan_order::ScanOrder;
use crate::tensor::Tensor;

/// Coordinates within this many pixels of a lattice line are snapped onto it,
/// so lattice reads are exact despite normalization round-off.
const LATTICE_SNAP: f64 = 1e-10;

/// Which parts of the deformable scan are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformToggles {
    /// Deformable points (bilinear resampling).
    pub dp: bool,
    /// Deformable token order.
    pub dt: bool,
    /// Offset bias table.
    pub ob: bool,
    /// Channel attention inside the offset network.
    pub ca: bool,
}

impl DeformToggles {
    pub const ALL: DeformToggles = DeformToggles {
        dp: true,
        dt: true,
        ob: true,
        ca: true,
    };

    pub fn needs_offsets(&self) -> bool {
        self.dp || self.dt
    }

    /// The bias table is only read when points are resampled.
    pub fn uses_bias(&self) -> bool {
        self.dp && self.ob
    }
}

impl Default for DeformToggles {
    fn default() -> Self {
        Self::ALL
    }
}

/// Where the offset bias table is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BiasLookup {
    /// At `p + Δp / 2`.
    #[default]
    Absolute,
    /// At `Δp / 2` around the table centre.
    Relative,
}

impl std::fmt::Display for BiasLookup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BiasLookup::Absolute => "absolute",
            BiasLookup::Relative => "relative",
        })
    }
}

impl std::str::FromStr for BiasLookup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(BiasLookup::Absolute),
            "relative" => Ok(BiasLookup::Relative),
            _ => Err(Error::config(format!("unknown bias lookup {s:?}"))),
        }
    }
}

/// Squashed and normalized offsets.
#[derive(Clone, Debug)]
pub struct OffsetField {
    /// `[H, W, 2]`, `|x| <= 1/W`, `|y| <= 1/H`.
    pub delta_p: Tensor,
    /// `[H, W, 1]`, `|Δt| < 1`.
    pub delta_t: Tensor,
}

#[derive(Clone, Debug)]
pub struct ReferenceGrid {
    /// `[H, W, 2]` normalized coordinates.
    pub p: Tensor,
}

impl ReferenceGrid {
    pub fn height(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.p.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct TokenIndex {
    /// `[N]`, evenly spaced on `[-1, 1]`.
    pub t_r: Tensor,
}

/// Learnable scalar table added to resampled features.
#[derive(Clone, Debug)]
pub struct OffsetBias {
    /// `[H, W]`
    pub r: Tensor,
}

impl OffsetBias {
    pub fn zeros(h: usize, w: usize) -> Self {
        OffsetBias {
            r: Tensor::zeros(&[h, w]),
        }
    }
}

/// `dwconv(K) → [channel attention] → GELU → LN → 1×1 (no bias) → 3 channels`.
#[derive(Clone, Debug)]
pub struct OffsetNetWeights {
    /// `[K, K, C]`
    pub dw_w: Tensor,
    /// `[C]`
    pub dw_b: Tensor,
    pub ca: Option<ChannelAttentionWeights>,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
    /// `[C, 3]`, zero at initialization.
    pub proj: Tensor,
}

impl OffsetNetWeights {
    pub fn init(
        rng: &mut SeedRng,
        channels: usize,
        kernel: usize,
        with_ca: bool,
        reduction: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "offset kernel must be odd, got {kernel}"
            )));
        }
        let c = channels;
        let ca = with_ca.then(|| {
            let hid = ca_hidden_width(c, reduction);
            ChannelAttentionWeights {
                w1: fan_in_uniform(rng, &[c, hid], c),
                b1: Tensor::zeros(&[hid]),
                w2: fan_in_uniform(rng, &[hid, c], hid),
                b2: Tensor::zeros(&[c]),
            }
        });
        Ok(OffsetNetWeights {
            dw_w: fan_in_uniform(rng, &[kernel, kernel, c], kernel * kernel),
            dw_b: Tensor::zeros(&[c]),
            ca,
            ln_g: Tensor::full(&[c], 1.0),
            ln_b: Tensor::zeros(&[c]),
            proj: Tensor::zeros(&[c, 3]),
        })
    }

    pub fn kernel(&self) -> usize {
        self.dw_w.shape()[0]
    }
}

pub fn offset_network(x: &Tensor, w: &OffsetNetWeights) -> Result<Tensor> {
    let k = w.kernel();
    if k.is_multiple_of(2) {
        return Err(Error::config(format!("offset kernel must be odd, got {k}")));
    }
    let mut h = depthwise_conv2d(x, &w.dw_w, Some(&w.dw_b), 1, (k - 1) / 2)?;
    if let Some(ca) = &w.ca {
        h = channel_attention(&h, ca)?;
    }
    let h = activation(Activation::Gelu, &h);
    let h = layer_norm(&h, &w.ln_g, &w.ln_b, LN_EPS)?;
    pointwise_conv(&h, &w.proj, None)
}

pub fn squash_split_normalize(o: &Tensor) -> Result<OffsetField> {
    let [h, w, 3] = *o.shape() else {
        return Err(Error::dim("squash_split_normalize", o.shape(), &[0, 0, 3]));
    };
    let mut dp = Vec::with_capacity(h * w * 2);
    let mut dt = Vec::with_capacity(h * w);
    for px in o.data().chunks_exact(3) {
        dp.push(px[0].tanh() / w as f64);
        dp.push(px[1].tanh() / h as f64);
        dt.push(px[2].tanh());
    }
    Ok(OffsetField {
        delta_p: Tensor::new(&[h, w, 2], dp)?,
        delta_t: Tensor::new(&[h, w, 1], dt)?,
    })
}

/// Normalized coordinate of lattice index `i` on an axis of `extent` points.
fn normalize_index(i: usize, extent: usize) -> f64 {
    if extent == 1 {
        0.0
    } else {
        2.0 * i as f64 / (extent - 1) as f64 - 1.0
    }
}

pub fn make_reference_grid(h: usize, w: usize) -> Result<ReferenceGrid> {
    if h == 0 || w == 0 {
        return Err(Error::config(format!(
            "reference grid must be non-empty, got {h}x{w}"
        )));
    }
    let mut p = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            p.push(normalize_index(j, w));
            p.push(normalize_index(i, h));
        }
    }
    Ok(ReferenceGrid {
        p: Tensor::new(&[h, w, 2], p)?,
    })
}

pub fn make_token_index(n: usize) -> Result<TokenIndex> {
    if n < 2 {
        return Err(Error::config(format!(
            "token index needs at least 2 tokens, got {n}"
        )));
    }
    Ok(token_index_unchecked(n))
}

/// Like [`make_token_index`] but maps a single token to `[0]`.
fn token_index_unchecked(n: usize) -> TokenIndex {
    TokenIndex {
        t_r: Tensor::from_fn(&[n], |k| normalize_index(k, n)),
    }
}

/// One axis of a bilinear read: the two lattice indices, the fractional
/// weight of the second, and whether the coordinate is strictly inside.
#[derive(Clone, Copy, Debug)]
struct AxisTap {
    i0: usize,
    i1: usize,
    frac: f64,
    /// d(pixel)/d(normalized coordinate); zero when clamped.
    scale: f64,
}

fn axis_tap(coord: f64, extent: usize) -> AxisTap {
    if extent == 1 {
        return AxisTap {
            i0: 0,
            i1: 0,
            frac: 0.0,
            scale: 0.0,
        };
    }
    let clamped = coord.clamp(-1.0, 1.0);
    let span = (extent - 1) as f64;
    let mut p = (clamped + 1.0) * 0.5 * span;
    let nearest = p.round();
    if (p - nearest).abs() < LATTICE_SNAP {
        p = nearest;
    }
    let i0 = (p.floor() as usize).min(extent - 2);
    AxisTap {
        i0,
        i1: i0 + 1,
        frac: p - i0 as f64,
        scale: if coord == clamped { 0.5 * span } else { 0.0 },
    }
}

fn sample_dims(x: &Tensor, coords: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let [h, w, c] = *x.shape() else {
        return Err(Error::dim("bilinear_sample", x.shape(), coords.shape()));
    };
    let [m, 2] = *coords.shape() else {
        return Err(Error::dim("bilinear_sample", x.shape(), coords.shape()));
    };
    if h == 0 || w == 0 {
        return Err(Error::dim("bilinear_sample", x.shape(), coords.shape()));
    }
    if !coords.is_finite() {
        return Err(Error::input("bilinear_sample coordinates must be finite"));
    }
    Ok((h, w, c, m))
}

/// Align-corners bilinear read of `x: [H, W, C]` at `coords: [M, 2]`.
/// Out-of-range coordinates are clamped to the border.
pub fn bilinear_sample(x: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (h, w, c, m) = sample_dims(x, coords)?;
    let mut out = vec![0.0; m * c];
    for (k, xy) in coords.data().chunks_exact(2).enumerate() {
        let tx = axis_tap(xy[0], w);
        let ty = axis_tap(xy[1], h);
        let px = |iy: usize, ix: usize| &x.data()[(iy * w + ix) * c..][..c];
        let (v00, v01, v10, v11) = (
            px(ty.i0, tx.i0),
            px(ty.i0, tx.i1),
            px(ty.i1, tx.i0),
            px(ty.i1, tx.i1),
        );
        let (fx, fy) = (tx.frac, ty.frac);
        let o = &mut out[k * c..(k + 1) * c];
        for ch in 0..c {
            o[ch] = (1.0 - fy) * ((1.0 - fx) * v00[ch] + fx * v01[ch])
                + fy * ((1.0 - fx) * v10[ch] + fx * v11[ch]);
        }
    }
    Tensor::new(&[m, c], out)
}

fn bilinear_vjp(
    g: &[f64],
    x: &Tensor,
    coords: &Tensor,
    need: &[bool],
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let [h, w, c] = *x.shape() else {
        unreachable!()
    };
    let mut gx = need[0].then(|| vec![0.0; x.numel()]);
    let mut gc = need[1].then(|| vec![0.0; coords.numel()]);
    for (k, xy) in coords.data().chunks_exact(2).enumerate() {
        let tx = axis_tap(xy[0], w);
        let ty = axis_tap(xy[1], h);
        let (fx, fy) = (tx.frac, ty.frac);
        let go = &g[k * c..(k + 1) * c];
        let off = |iy: usize, ix: usize| (iy * w + ix) * c;
        let (o00, o01, o10, o11) = (
            off(ty.i0, tx.i0),
            off(ty.i0, tx.i1),
            off(ty.i1, tx.i0),
            off(ty.i1, tx.i1),
        );
        if let Some(gx) = gx.as_mut() {
            let (w00, w01, w10, w11) = (
                (1.0 - fy) * (1.0 - fx),
                (1.0 - fy) * fx,
                fy * (1.0 - fx),
                fy * fx,
            );
            for ch in 0..c {
                gx[o00 + ch] += w00 * go[ch];
                gx[o01 + ch] += w01 * go[ch];
                gx[o10 + ch] += w10 * go[ch];
                gx[o11 + ch] += w11 * go[ch];
            }
        }
        if let Some(gc) = gc.as_mut() {
            let xd = x.data();
            let (mut dfx, mut dfy) = (0.0, 0.0);
            for ch in 0..c {
                let (v00, v01, v10, v11) = (xd[o00 + ch], xd[o01 + ch], xd[o10 + ch], xd[o11 + ch]);
                dfx += go[ch] * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                dfy += go[ch] * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
            }
            gc[2 * k] = dfx * tx.scale;
            gc[2 * k + 1] = dfy * ty.scale;
        }
    }
    (gx, gc)
}

/// `x̂ = φ(x, p + Δp) + φ(R, p + Δp/2)` with the bias read broadcast over
/// channels. `bias = None` omits the second term.
pub fn sample_with_bias(
    x: &Tensor,
    bias: Option<&OffsetBias>,
    grid: &ReferenceGrid,
    delta_p: &Tensor,
    lookup: BiasLookup,
) -> Result<Tensor> {
    let [h, w, c] = *x.shape() else {
        return Err(Error::dim("sample_with_bias", x.shape(), grid.p.shape()));
    };
    grid.p.expect_shape("sample_with_bias grid", &[h, w, 2])?;
    delta_p.expect_shape("sample_with_bias offsets", &[h, w, 2])?;
    let n = h * w;
    let coords: Vec<f64> = grid
        .p
        .data()
        .iter()
        .zip(delta_p.data())
        .map(|(p, d)| p + d)
        .collect();
    let mut out = bilinear_sample(x, &Tensor::new(&[n, 2], coords)?)?;
    if let Some(bias) = bias {
        let rc = bias_coords(grid.p.data(), delta_p.data(), lookup);
        let table = bias_table(&bias.r)?;
        let rs = bilinear_sample(&table, &Tensor::new(&[n, 2], rc)?)?;
        for (px, &r) in out.data_mut().chunks_exact_mut(c).zip(rs.data()) {
            px.iter_mut().for_each(|v| *v += r);
        }
    }
    out.reshape(&[h, w, c])
}

fn bias_coords(grid: &[f64], delta_p: &[f64], lookup: BiasLookup) -> Vec<f64> {
    match lookup {
        BiasLookup::Absolute => grid.iter().zip(delta_p).map(|(p, d)| p + 0.5 * d).collect(),
        BiasLookup::Relative => delta_p.iter().map(|d| 0.5 * d).collect(),
    }
}

fn bias_table(r: &Tensor) -> Result<Tensor> {
    match *r.shape() {
        [h, w] => r.reshape(&[h, w, 1]),
        _ => Err(Error::dim("offset bias", r.shape(), &[0, 0])),
    }
}

/// Unclamped pixel position of a normalized coordinate on an axis of `extent` points.
fn to_pixel(coord: f64, extent: usize) -> Option<f64> {
    (extent > 1).then(|| (coord + 1.0) * 0.5 * (extent - 1) as f64)
}

/// Smallest pixel distance from any coordinate of `coords: [M, 2]` to a
/// lattice line of an `h × w` grid, where bilinear reads are not
/// differentiable. Degenerate axes are ignored.
pub fn lattice_margin(coords: &[f64], h: usize, w: usize) -> f64 {
    coords
        .chunks_exact(2)
        .flat_map(|xy| [to_pixel(xy[0], w), to_pixel(xy[1], h)])
        .flatten()
        .map(|p| (p - p.round()).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Lattice cell of every coordinate; reads are smooth while these stay fixed.
pub fn lattice_cells(coords: &[f64], h: usize, w: usize) -> Vec<i64> {
    coords
        .chunks_exact(2)
        .flat_map(|xy| [to_pixel(xy[0], w), to_pixel(xy[1], h)])
        .map(|p| p.map_or(0, |p| p.floor() as i64))
        .collect()
}

/// Stable ascending argsort of `t_r + Δt`; ties keep the original order.
pub fn order_from_index(t_r: &TokenIndex, delta_t: &Tensor) -> Result<ScanOrder> {
    let n = t_r.t_r.numel();
    if delta_t.numel() != n {
        return Err(Error::dim(
            "order_from_index",
            t_r.t_r.shape(),
            delta_t.shape(),
        ));
    }
    Ok(argsort_shifted(t_r.t_r.data(), delta_t.data()))
}

fn argsort_shifted(t_r: &[f64], delta_t: &[f64]) -> ScanOrder {
    let t_d: Vec<f64> = t_r.iter().zip(delta_t).map(|(a, b)| a + b).collect();
    let mut order: Vec<usize> = (0..t_d.len()).collect();
    order.sort_by(|&a, &b| t_d[a].total_cmp(&t_d[b]));
    ScanOrder::new(order).expect("argsort is a permutation")
}

/// `seq[i] = x̂[order[i]]` over the row-major tokens of `[H, W, C]`.
pub fn flatten_by_order(x_hat: &Tensor, order: &ScanOrder) -> Result<Tensor> {
    let [h, w, c] = *x_hat.shape() else {
        return Err(Error::dim(
            "flatten_by_order",
            x_hat.shape(),
            &[order.len()],
        ));
    };
    if h * w != order.len() {
        return Err(Error::dim(
            "flatten_by_order",
            x_hat.shape(),
            &[order.len()],
        ));
    }
    crate::ops::gather_rows(&x_hat.reshape(&[h * w, c])?, order.order())
}

/// Inverse of [`flatten_by_order`].
pub fn unflatten_by_order(seq: &Tensor, order: &ScanOrder, h: usize, w: usize) -> Result<Tensor> {
    if seq.rank() != 2 || seq.shape()[0] != order.len() || h * w != order.len() {
        return Err(Error::dim(
            "unflatten_by_order",
            seq.shape(),
            &[order.len(), h, w],
        ));
    }
    let c = seq.shape()[1];
    crate::ops::gather_rows(seq, order.inverse())?.reshape(&[h, w, c])
}

/// Surrogate gradient for the index offsets: token `j` receives the channel
/// mean of the sequence gradient at its position `inverse[j]`.
pub fn straight_through_index_grad(grad_seq: &Tensor, order: &ScanOrder) -> Result<Tensor> {
    let [n, c] = *grad_seq.shape() else {
        return Err(Error::dim(
            "straight_through_index_grad",
            grad_seq.shape(),
            &[order.len()],
        ));
    };
    if n != order.len() || c == 0 {
        return Err(Error::dim(
            "straight_through_index_grad",
            grad_seq.shape(),
            &[order.len()],
        ));
    }
    Ok(Tensor::from_fn(&[n], |j| {
        let row = &grad_seq.data()[order.inverse()[j] * c..][..c];
        row.iter().sum::<f64>() / c as f64
    }))
}

/// Pure-value form of the full deformable scan.
#[derive(Clone, Debug)]
pub struct DeformableScanWeights {
    pub offset: Option<OffsetNetWeights>,
    pub bias: Option<OffsetBias>,
    pub lookup: BiasLookup,
}

impl DeformableScanWeights {
    pub fn init(
        rng: &mut SeedRng,
        channels: usize,
        kernel: usize,
        bias_hw: (usize, usize),
        toggles: DeformToggles,
    ) -> Result<Self> {
        let offset = toggles
            .needs_offsets()
            .then(|| {
                OffsetNetWeights::init(rng, channels, kernel, toggles.ca, crate::ops::CA_REDUCTION)
            })
            .transpose()?;
        Ok(DeformableScanWeights {
            offset,
            bias: toggles
                .uses_bias()
                .then(|| OffsetBias::zeros(bias_hw.0, bias_hw.1)),
            lookup: BiasLookup::Absolute,
        })
    }
}

pub fn deformable_scan(
    x: &Tensor,
    toggles: DeformToggles,
    weights: &DeformableScanWeights,
) -> Result<(Tensor, ScanOrder)> {
    let [h, w, _] = *x.shape() else {
        return Err(Error::dim("deformable_scan", x.shape(), &[0, 0, 0]));
    };
    let n = h * w;
    if !toggles.needs_offsets() {
        let order = ScanOrder::identity(n);
        return Ok((flatten_by_order(x, &order)?, order));
    }
    let net = weights
        .offset
        .as_ref()
        .ok_or_else(|| Error::config("deformable scan needs an offset network"))?;
    let field = squash_split_normalize(&offset_network(x, net)?)?;
    let x_hat = if toggles.dp {
        let grid = make_reference_grid(h, w)?;
        let bias = if toggles.ob {
            weights.bias.as_ref()
        } else {
            None
        };
        sample_with_bias(x, bias, &grid, &field.delta_p, weights.lookup)?
    } else {
        x.clone()
    };
    let order = if toggles.dt {
        order_from_index(&token_index_unchecked(n), &field.delta_t)?
    } else {
        ScanOrder::identity(n)
    };
    Ok((flatten_by_order(&x_hat, &order)?, order))
}

/// Tape handles of an offset network.
#[derive(Clone, Copy, Debug)]
pub struct OffsetNetVars {
    pub dw_w: Var,
    pub dw_b: Var,
    pub ca: Option<ChannelAttentionVars>,
    pub ln_g: Var,
    pub ln_b: Var,
    pub proj: Var,
}

impl OffsetNetVars {
    pub fn bind(tape: &mut Tape, w: &OffsetNetWeights) -> Self {
        OffsetNetVars {
            dw_w: tape.leaf(w.dw_w.clone()),
            dw_b: tape.leaf(w.dw_b.clone()),
            ca: w.ca.as_ref().map(|ca| ChannelAttentionVars {
                w1: tape.leaf(ca.w1.clone()),
                b1: tape.leaf(ca.b1.clone()),
                w2: tape.leaf(ca.w2.clone()),
                b2: tape.leaf(ca.b2.clone()),
            }),
            ln_g: tape.leaf(w.ln_g.clone()),
            ln_b: tape.leaf(w.ln_b.clone()),
            proj: tape.leaf(w.proj.clone()),
        }
    }
}

/// Tape handles of a deformable scan.
#[derive(Clone, Copy, Debug)]
pub struct DeformVars {
    pub offset: Option<OffsetNetVars>,
    /// `[H_r, W_r]` bias table.
    pub bias: Option<Var>,
    pub lookup: BiasLookup,
}

impl DeformVars {
    pub fn bind(tape: &mut Tape, w: &DeformableScanWeights) -> Self {
        DeformVars {
            offset: w.offset.as_ref().map(|o| OffsetNetVars::bind(tape, o)),
            bias: w.bias.as_ref().map(|b| tape.leaf(b.r.clone())),
            lookup: w.lookup,
        }
    }
}

/// What a recorded deformable scan produced.
pub struct DeformOutput {
    /// `[N, C]` token sequence.
    pub seq: Var,
    pub order: ScanOrder,
    /// `[H, W, 2]` normalized point offsets, when points moved.
    pub delta_p: Option<Var>,
    /// `[N]` index offsets, when the order was deformed.
    pub delta_t: Option<Var>,
}

impl Tape {
    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        let out = bilinear_sample(self.value(x), self.value(coords))?;
        let vx = self.value_arc(x);
        let vc = self.value_arc(coords);
        self.push(
            "bilinear_sample",
            out,
            vec![x, coords],
            Box::new(move |g, need| {
                let (gx, gc) = bilinear_vjp(g, &vx, &vc, need);
                vec![gx, gc]
            }),
        )
    }

    /// `[N, C]` rows `φ(x, p + Δp) + φ(R, p + Δp/2)` for `grid`, `dp_flat: [N, 2]`.
    pub fn sample_with_bias(
        &mut self,
        x: Var,
        bias: Option<Var>,
        grid: Var,
        dp_flat: Var,
        lookup: BiasLookup,
    ) -> Result<Var> {
        let coords = self.add(dp_flat, grid)?;
        let mut x_hat = self.bilinear_sample(x, coords)?;
        if let Some(r) = bias {
            let [rh, rw] = *self.shape(r) else {
                return Err(Error::dim("offset bias", self.shape(r), &[0, 0]));
            };
            let table = self.reshape(r, &[rh, rw, 1])?;
            let half = self.scale(dp_flat, 0.5)?;
            let rc = match lookup {
                BiasLookup::Absolute => self.add(half, grid)?,
                BiasLookup::Relative => half,
            };
            let rs = self.bilinear_sample(table, rc)?;
            x_hat = self.add_row_scalar(x_hat, rs)?;
        }
        Ok(x_hat)
    }

    pub fn offset_network(&mut self, x: Var, w: &OffsetNetVars) -> Result<Var> {
        let k = self.shape(w.dw_w)[0];
        if k.is_multiple_of(2) {
            return Err(Error::config(format!("offset kernel must be odd, got {k}")));
        }
        let mut h = self.depthwise_conv2d(x, w.dw_w, Some(w.dw_b), 1, (k - 1) / 2)?;
        if let Some(ca) = w.ca {
            h = self.channel_attention(h, ca)?;
        }
        let h = self.gelu(h)?;
        let h = self.layer_norm(h, w.ln_g, w.ln_b, LN_EPS)?;
        self.pointwise_conv(h, w.proj, None)
    }

    /// Orders the rows of `x_flat: [N, C]` by `t_r + Δt`. Backward routes the
    /// sequence gradient back through the permutation and, when straight-through
    /// is enabled, gives `Δt` the channel-mean replication.
    pub fn sort_tokens(&mut self, x_flat: Var, delta_t: Var) -> Result<(Var, ScanOrder)> {
        let vx = self.value(x_flat);
        let [n, c] = *vx.shape() else {
            return Err(Error::dim("sort_tokens", vx.shape(), self.shape(delta_t)));
        };
        if self.value(delta_t).numel() != n {
            return Err(Error::dim("sort_tokens", vx.shape(), self.shape(delta_t)));
        }
        let t_r = token_index_unchecked(n);
        let order = argsort_shifted(t_r.t_r.data(), self.value(delta_t).data());
        let out = crate::ops::gather_rows(vx, order.order())?;
        let (fwd, inv) = (order.order_arc(), order.inverse_arc());
        let straight_through = self.straight_through();
        let var = self.push(
            "sort_tokens",
            out,
            vec![x_flat, delta_t],
            Box::new(move |g, need| {
                let gx = need[0].then(|| scatter_rows(g, &fwd, n, c));
                let gt = (need[1] && straight_through).then(|| {
                    (0..n)
                        .map(|j| g[inv[j] * c..][..c].iter().sum::<f64>() / c as f64)
                        .collect()
                });
                vec![gx, gt]
            }),
        )?;
        Ok((var, order))
    }

    /// Records the full deformable scan of `x: [H, W, C]`.
    pub fn deformable_scan(
        &mut self,
        x: Var,
        toggles: DeformToggles,
        w: &DeformVars,
    ) -> Result<DeformOutput> {
        let [h, wd, c] = *self.shape(x) else {
            return Err(Error::dim("deformable_scan", self.shape(x), &[0, 0, 0]));
        };
        let n = h * wd;
        let flat = self.reshape(x, &[n, c])?;
        if !toggles.needs_offsets() {
            return Ok(DeformOutput {
                seq: flat,
                order: ScanOrder::identity(n),
                delta_p: None,
                delta_t: None,
            });
        }
        let net = w
            .offset
            .as_ref()
            .ok_or_else(|| Error::config("deformable scan needs an offset network"))?;
        let o = self.offset_network(x, net)?;
        let o = self.tanh(o)?;

        let (x_hat, delta_p) = if toggles.dp {
            let raw = self.slice_last(o, 0, 2)?;
            let norm = self.constant(Tensor::new(&[2], vec![1.0 / wd as f64, 1.0 / h as f64])?);
            let dp = self.mul_channel(raw, norm)?;
            let dp_flat = self.reshape(dp, &[n, 2])?;
            let grid = self.constant(make_reference_grid(h, wd)?.p.reshape(&[n, 2])?);
            let bias = if toggles.ob { w.bias } else { None };
            let x_hat = self.sample_with_bias(x, bias, grid, dp_flat, w.lookup)?;
            (x_hat, Some(dp))
        } else {
            (flat, None)
        };

        if toggles.dt {
            let dt = self.slice_last(o, 2, 1)?;
            let dt = self.reshape(dt, &[n])?;
            let (seq, order) = self.sort_tokens(x_hat, dt)?;
            Ok(DeformOutput {
                seq,
                order,
                delta_p,
                delta_t: Some(dt),
            })
        } else {
            Ok(DeformOutput {
                seq: x_hat,
                order: ScanOrder::identity(n),
                delta_p,
                delta_t: None,
            })
        }
    }
}
