use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

struct LnStats {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn ln_core(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, LnStats)> {
    let c = x.last_dim();
    if c == 0 {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    gamma.expect_shape("layer_norm gamma", &[c])?;
    beta.expect_shape("layer_norm beta", &[c])?;
    let rows = x.numel() / c;
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    let mut out = vec![0.0; x.numel()];
    for (r, row) in x.data().chunks_exact(c).enumerate() {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let denom = (var + eps).sqrt();
        let is = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        inv_std.push(is);
        for k in 0..c {
            let xh = (row[k] - mean) * is;
            xhat[r * c + k] = xh;
            out[r * c + k] = xh * gamma.data()[k] + beta.data()[k];
        }
    }
    Ok((Tensor::new(x.shape(), out)?, LnStats { xhat, inv_std }))
}

/// Normalizes each position over the trailing channel axis, then applies
/// `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    ln_core(x, gamma, beta, eps).map(|(t, _)| t)
}

impl Tape {
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, stats) = ln_core(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let vg = self.value_arc(gamma);
        let c = vg.numel();
        self.push(
            "layer_norm",
            out,
            vec![x, gamma, beta],
            Box::new(move |g, need| {
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for (r, grow) in g.chunks_exact(c).enumerate() {
                        let xh = &stats.xhat[r * c..(r + 1) * c];
                        let gy: Vec<f64> = grow.iter().zip(vg.data()).map(|(a, b)| a * b).collect();
                        let mean_gy = gy.iter().sum::<f64>() / c as f64;
                        let mean_gyx =
                            gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let is = stats.inv_std[r];
                        for k in 0..c {
                            gx[r * c + k] = is * (gy[k] - mean_gy - xh[k] * mean_gyx);
                        }
                    }
                    gx
                });
                let gg = need[1].then(|| {
                    let mut gg = vec![0.0; c];
                    for (grow, xh) in g.chunks_exact(c).zip(stats.xhat.chunks_exact(c)) {
                        for k in 0..c {
                            gg[k] += grow[k] * xh[k];
                        }
                    }
                    gg
                });
                let gb = need[2].then(|| {
                    let mut gb = vec![0.0; c];
                    for grow in g.chunks_exact(c) {
                        gb.iter_mut().zip(grow).for_each(|(a, v)| *a += v);
                    }
                    gb
                });
                vec![gx, gg, gb]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_vector_normalizes_to_zero() {
        let x = Tensor::full(&[2, 5], 3.25);
        let out = layer_norm(&x, &Tensor::full(&[5], 1.0), &Tensor::zeros(&[5]), LN_EPS).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn already_normalized_pair_is_fixed_point() {
        let x = Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap();
        let out = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 0.0).unwrap();
        assert_eq!(out.data(), &[1.0, -1.0]);
    }
}
