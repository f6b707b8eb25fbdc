use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean over spatial positions of an `[H, W, C]` map.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [h, w, c] = *x.shape() else {
        return Err(Error::dim("global_avg_pool", x.shape(), &[0, 0, 0]));
    };
    if h == 0 || w == 0 {
        return Err(Error::dim("global_avg_pool", x.shape(), &[1, 1, c]));
    }
    let mut out = vec![0.0; c];
    for px in x.data().chunks_exact(c) {
        out.iter_mut().zip(px).for_each(|(a, v)| *a += v);
    }
    let n = (h * w) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Tensor::new(&[c], out)
}

impl Tape {
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = global_avg_pool(self.value(x))?;
        let numel = self.value(x).numel();
        let c = out.numel();
        let n = (numel / c) as f64;
        self.push(
            "global_avg_pool",
            out,
            vec![x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; numel];
                for px in gx.chunks_exact_mut(c) {
                    px.iter_mut().zip(g).for_each(|(a, v)| *a = v / n);
                }
                vec![Some(gx)]
            }),
        )
    }
}
