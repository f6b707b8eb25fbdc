//! Shape plumbing and elementwise arithmetic on the tape.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

fn trailing(tape: &Tape, op: &'static str, x: Var, v: Var) -> Result<usize> {
    let c = tape.value(x).last_dim();
    if tape.shape(v) != [c] {
        return Err(Error::dim(op, tape.shape(x), tape.shape(v)));
    }
    Ok(c)
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(
            "add",
            out,
            vec![a, b],
            Box::new(|g, need| vec![need[0].then(|| g.to_vec()), need[1].then(|| g.to_vec())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(
            "sub",
            out,
            vec![a, b],
            Box::new(|g, need| {
                vec![
                    need[0].then(|| g.to_vec()),
                    need[1].then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        )
    }

    /// Sum of several same-shaped values.
    pub fn sum_n(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::input("sum_n of zero terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let va = self.value_arc(a);
        let vb = self.value_arc(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(
            "mul",
            out,
            vec![a, b],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.iter().zip(vb.data()).map(|(g, y)| g * y).collect()),
                    need[1].then(|| g.iter().zip(va.data()).map(|(g, x)| g * x).collect()),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push(
            "scale",
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * s).collect())]),
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        let saved = out.data().to_vec();
        self.push(
            "exp",
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(g.iter().zip(&saved).map(|(g, e)| g * e).collect())]),
        )
    }

    /// `x[..., c] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = trailing(self, "add_bias", x, b)?;
        let vx = self.value(x);
        let vb = self.value(b).data();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(vb).for_each(|(o, b)| *o += b);
        }
        self.push(
            "add_bias",
            out,
            vec![x, b],
            Box::new(move |g, need| {
                let gb = need[1].then(|| {
                    let mut gb = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    gb
                });
                vec![need[0].then(|| g.to_vec()), gb]
            }),
        )
    }

    /// `x[..., c] * s[c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = trailing(self, "mul_channel", x, s)?;
        let vx = self.value_arc(x);
        let vs = self.value_arc(s);
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(vs.data()).for_each(|(o, s)| *o *= s);
        }
        self.push(
            "mul_channel",
            out,
            vec![x, s],
            Box::new(move |g, need| {
                let gx = need[0].then(|| {
                    let mut gx = g.to_vec();
                    for row in gx.chunks_exact_mut(c) {
                        row.iter_mut().zip(vs.data()).for_each(|(o, s)| *o *= s);
                    }
                    gx
                });
                let gs = need[1].then(|| {
                    let mut gs = vec![0.0; c];
                    for (grow, xrow) in g.chunks_exact(c).zip(vx.data().chunks_exact(c)) {
                        for k in 0..c {
                            gs[k] += grow[k] * xrow[k];
                        }
                    }
                    gs
                });
                vec![gx, gs]
            }),
        )
    }

    /// `x[m, c] + r[m, 0]`: adds a per-row scalar across the channel axis.
    pub fn add_row_scalar(&mut self, x: Var, r: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let rows = vx.numel() / c.max(1);
        if self.value(r).numel() != rows || self.value(r).last_dim() != 1 {
            return Err(Error::dim("add_row_scalar", vx.shape(), self.shape(r)));
        }
        let vr = self.value(r).data();
        let mut out = vx.clone();
        for (row, &rv) in out.data_mut().chunks_exact_mut(c).zip(vr) {
            row.iter_mut().for_each(|o| *o += rv);
        }
        self.push(
            "add_row_scalar",
            out,
            vec![x, r],
            Box::new(move |g, need| {
                let gr = need[1].then(|| g.chunks_exact(c).map(|row| row.iter().sum()).collect());
                vec![need[0].then(|| g.to_vec()), gr]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(
            "reshape",
            out,
            vec![x],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Channels `[start, start + len)` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if start + len > c || len == 0 {
            return Err(Error::dim("slice_last", vx.shape(), &[start, len]));
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let data = vx
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(&shape, data)?;
        let numel = vx.numel();
        self.push(
            "slice_last",
            out,
            vec![x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; numel];
                for (dst, src) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                    dst[start..start + len].copy_from_slice(src);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// `out[i, :] = x[index[i], :]` over the rows of a `[N, C]` value.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let vx = self.value(x);
        let out = gather_rows(vx, &index)?;
        let rows = vx.shape()[0];
        let c = vx.last_dim();
        self.push(
            "gather_rows",
            out,
            vec![x],
            Box::new(move |g, _| vec![Some(scatter_rows(g, &index, rows, c))]),
        )
    }
}

pub fn gather_rows(x: &Tensor, index: &[usize]) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim(
            "gather_rows",
            x.shape(),
            &[index.len(), x.last_dim()],
        ));
    }
    let (rows, c) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(index.len() * c);
    for &i in index {
        if i >= rows {
            return Err(Error::input(format!(
                "row index {i} out of range for {rows} rows"
            )));
        }
        data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(&[index.len(), c], data)
}

pub(crate) fn scatter_rows(g: &[f64], index: &[usize], rows: usize, c: usize) -> Vec<f64> {
    let mut gx = vec![0.0; rows * c];
    for (src, &i) in g.chunks_exact(c).zip(index) {
        gx[i * c..(i + 1) * c]
            .iter_mut()
            .zip(src)
            .for_each(|(a, b)| *a += b);
    }
    gx
}
