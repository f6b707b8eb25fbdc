use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `out[m×p] += a[m×k] · b[k×p]`, all row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

/// `out[m×k] = g[m×p] · bᵀ` where `b` is `k×p`.
fn gemm_bt(g: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            out[i * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[k×p] = aᵀ · g` where `a` is `m×k`, `g` is `m×p`.
fn gemm_at(a: &[f64], g: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * p];
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            out[kk * p..(kk + 1) * p]
                .iter_mut()
                .zip(grow)
                .for_each(|(o, &gv)| *o += av * gv);
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * p];
    gemm_acc(a.data(), b.data(), &mut out, m, k, p);
    Tensor::new(&[m, p], out)
}

/// Applies `w[k×p]` along the trailing axis of `x[..., k]`, plus optional bias.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let k = x.last_dim();
    if w.rank() != 2 || w.shape()[0] != k {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    let p = w.shape()[1];
    if let Some(b) = bias {
        b.expect_shape("linear bias", &[p])?;
    }
    let m = x.numel() / k.max(1);
    let mut out = vec![0.0; m * p];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(p) {
            row.copy_from_slice(b.data());
        }
    }
    gemm_acc(x.data(), w.data(), &mut out, m, k, p);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = p;
    Tensor::new(&shape, out)
}

/// 1×1 convolution over an `[H, W, C_in]` map.
pub fn pointwise_conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::dim("pointwise_conv", x.shape(), w.shape()));
    }
    linear(x, w, bias)
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let va = self.value_arc(a);
        let vb = self.value_arc(b);
        let (m, k, p) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        self.push(
            "matmul",
            out,
            vec![a, b],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| gemm_bt(g, vb.data(), m, k, p)),
                    need[1].then(|| gemm_at(va.data(), g, m, k, p)),
                ]
            }),
        )
    }

    /// Trailing-axis linear map, optional bias.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let out = linear(self.value(x), self.value(w), bias.map(|b| self.value(b)))?;
        let vx = self.value_arc(x);
        let vw = self.value_arc(w);
        let k = vx.last_dim();
        let p = vw.shape()[1];
        let m = vx.numel() / k.max(1);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "linear",
            out,
            inputs,
            Box::new(move |g, need| {
                let mut grads = vec![
                    need[0].then(|| gemm_bt(g, vw.data(), m, k, p)),
                    need[1].then(|| gemm_at(vx.data(), g, m, k, p)),
                ];
                if need.len() == 3 {
                    grads.push(need[2].then(|| {
                        let mut gb = vec![0.0; p];
                        for row in g.chunks_exact(p) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        gb
                    }));
                }
                grads
            }),
        )
    }

    pub fn pointwise_conv(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        if self.value(x).rank() != 3 {
            return Err(Error::dim("pointwise_conv", self.shape(x), self.shape(w)));
        }
        self.linear(x, w, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = matmul(&Tensor::identity(2), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn mismatched_inner_extent_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn pointwise_identity_and_bias_only() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.25 - 1.0);
        let out = pointwise_conv(&x, &Tensor::identity(4), None).unwrap();
        assert_eq!(out, x);

        let b = Tensor::new(&[2], vec![0.5, -2.0]).unwrap();
        let out = pointwise_conv(
            &Tensor::zeros(&[3, 3, 4]),
            &Tensor::zeros(&[4, 2]),
            Some(&b),
        )
        .unwrap();
        for px in out.data().chunks_exact(2) {
            assert_eq!(px, b.data());
        }
    }
}
