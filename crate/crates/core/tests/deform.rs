use defscan::autodiff::Tape;
use defscan::deform::{
    bilinear_sample, deformable_scan, flatten_by_order, make_reference_grid, make_token_index,
    offset_network, order_from_index, sample_with_bias, squash_split_normalize,
    straight_through_index_grad, unflatten_by_order, BiasLookup, DeformToggles, DeformVars,
    DeformableScanWeights, OffsetBias, OffsetNetWeights,
};
use defscan::harness::gradcheck::random_deform_weights;
use defscan::init::{rng, uniform, SeedRng};
use defscan::ops::{
    activation, channel_attention, depthwise_conv2d, layer_norm, pointwise_conv, Activation,
};
use defscan::scan_order::ScanOrder;
use defscan::{Error, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Align-corners bilinear read with clamping, written from the definition.
fn bilinear_oracle(x: &Tensor, cx: f64, cy: f64) -> Vec<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let pixel = |coord: f64, extent: usize| {
        if extent == 1 {
            0.0
        } else {
            ((coord.clamp(-1.0, 1.0) + 1.0) / 2.0 * (extent - 1) as f64)
                .clamp(0.0, (extent - 1) as f64)
        }
    };
    let (px, py) = (pixel(cx, w), pixel(cy, h));
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    let at = |i: usize, j: usize, ch: usize| x.data()[(i * w + j) * c + ch];
    (0..c)
        .map(|ch| {
            (1.0 - fy) * ((1.0 - fx) * at(y0, x0, ch) + fx * at(y0, x1, ch))
                + fy * ((1.0 - fx) * at(y1, x0, ch) + fx * at(y1, x1, ch))
        })
        .collect()
}

fn random_order(r: &mut SeedRng, n: usize) -> ScanOrder {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(r);
    ScanOrder::new(v).unwrap()
}

#[test]
fn offset_network_zero_init_and_shape() {
    let mut r = rng(0);
    let w = OffsetNetWeights::init(&mut r, 6, 5, true, 4).unwrap();
    let x = uniform(&mut r, &[8, 8, 6], 3.0);
    let o = offset_network(&x, &w).unwrap();
    assert_eq!(o.shape(), &[8, 8, 3]);
    assert!(o.data().iter().all(|&v| v == 0.0));
    assert!(matches!(
        OffsetNetWeights::init(&mut r, 6, 4, true, 4),
        Err(Error::Config(_))
    ));
}

#[test]
fn offset_network_is_primitive_composition() {
    let mut r = rng(1);
    let (c, k) = (8, 3);
    let weights = random_deform_weights(&mut r, c, k, (5, 4), DeformToggles::ALL).unwrap();
    let net = weights.offset.unwrap();
    let x = uniform(&mut r, &[5, 4, c], 1.0);
    let h = depthwise_conv2d(&x, &net.dw_w, Some(&net.dw_b), 1, 1).unwrap();
    let h = channel_attention(&h, net.ca.as_ref().unwrap()).unwrap();
    let h = activation(Activation::Gelu, &h);
    let h = layer_norm(&h, &net.ln_g, &net.ln_b, 1e-6).unwrap();
    let want = pointwise_conv(&h, &net.proj, None).unwrap();
    assert!(max_abs_diff(offset_network(&x, &net).unwrap().data(), want.data()) <= 1e-12);
}

#[test]
fn squash_saturates_to_one_token() {
    let o = Tensor::from_fn(&[4, 8, 3], |_| 1e6);
    let f = squash_split_normalize(&o).unwrap();
    for px in f.delta_p.data().chunks_exact(2) {
        assert_eq!(px, [1.0 / 8.0, 1.0 / 4.0]);
    }
    assert!(f
        .delta_t
        .data()
        .iter()
        .all(|&t| t <= 1.0 && t > 1.0 - 1e-12));
    let z = squash_split_normalize(&Tensor::zeros(&[2, 2, 3])).unwrap();
    assert!(z
        .delta_p
        .data()
        .iter()
        .chain(z.delta_t.data())
        .all(|&v| v == 0.0));
}

#[test]
fn squash_bounds_hold() {
    let mut r = rng(2);
    for _ in 0..1000 {
        let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let o = uniform(&mut r, &[h, w, 3], 20.0);
        let f = squash_split_normalize(&o).unwrap();
        for px in f.delta_p.data().chunks_exact(2) {
            assert!(px[0].abs() <= 1.0 / w as f64 && px[1].abs() <= 1.0 / h as f64);
        }
        assert!(f.delta_t.data().iter().all(|t| t.abs() <= 1.0));
    }
}

#[test]
fn reference_grid_examples() {
    let g = make_reference_grid(3, 3).unwrap();
    assert_eq!(&g.p.data()[8..10], &[0.0, 0.0]);
    assert_eq!(&g.p.data()[2..4], &[0.0, -1.0]);
    assert_eq!(&g.p.data()[6..8], &[-1.0, 0.0]);
    let g = make_reference_grid(4, 7).unwrap();
    for i in 0..4 {
        for j in 1..7 {
            let at = |j: usize| g.p.data()[(i * 7 + j) * 2];
            assert!(at(j) > at(j - 1));
        }
    }
}

#[test]
fn token_index_examples() {
    assert_eq!(make_token_index(2).unwrap().t_r.data(), &[-1.0, 1.0]);
    assert_eq!(
        make_token_index(5).unwrap().t_r.data(),
        &[-1.0, -0.5, 0.0, 0.5, 1.0]
    );
    let t = make_token_index(101).unwrap().t_r;
    for k in 0..101 {
        assert!((t.data()[k] + t.data()[100 - k]).abs() < 1e-15);
        if k > 0 {
            assert!(t.data()[k] > t.data()[k - 1]);
        }
    }
    assert!(matches!(make_token_index(1), Err(Error::Config(_))));
}

#[test]
fn bilinear_examples() {
    let x = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let c = Tensor::new(&[2, 2], vec![0.0, 0.0, -1.0, -1.0]).unwrap();
    assert_eq!(bilinear_sample(&x, &c).unwrap().data(), &[1.5, 0.0]);
}

#[test]
fn bilinear_is_exact_on_affine_fields() {
    let mut r = rng(3);
    let n = 8;
    let f = |u: f64, v: f64| 2.0 * u + 3.0 * v + 1.0;
    let x = Tensor::from_fn(&[n, n, 1], |i| {
        let (iy, ix) = (i / n, i % n);
        f(2.0 * ix as f64 / 7.0 - 1.0, 2.0 * iy as f64 / 7.0 - 1.0)
    });
    let coords = uniform(&mut r, &[50, 2], 1.0);
    let y = bilinear_sample(&x, &coords).unwrap();
    for (k, xy) in coords.data().chunks_exact(2).enumerate() {
        assert!((y.data()[k] - f(xy[0], xy[1])).abs() <= 1e-12);
    }
}

#[test]
fn bilinear_matches_oracle_and_lattice() {
    let mut r = rng(4);
    let x = uniform(&mut r, &[5, 7, 3], 1.0);
    let coords = uniform(&mut r, &[60, 2], 1.3);
    let y = bilinear_sample(&x, &coords).unwrap();
    for (k, xy) in coords.data().chunks_exact(2).enumerate() {
        let want = bilinear_oracle(&x, xy[0], xy[1]);
        assert!(max_abs_diff(&y.data()[k * 3..(k + 1) * 3], &want) <= 1e-12);
    }
    let grid = make_reference_grid(5, 7)
        .unwrap()
        .p
        .reshape(&[35, 2])
        .unwrap();
    assert_eq!(bilinear_sample(&x, &grid).unwrap().data(), x.data());
}

#[test]
fn sample_with_bias_cases() {
    let mut r = rng(5);
    let (h, w, c) = (4, 6, 3);
    let x = uniform(&mut r, &[h, w, c], 1.0);
    let grid = make_reference_grid(h, w).unwrap();
    let zero = Tensor::zeros(&[h, w, 2]);
    let none = sample_with_bias(&x, None, &grid, &zero, BiasLookup::Absolute).unwrap();
    assert_eq!(none.reshape(&[h, w, c]).unwrap().data(), x.data());
    let bias = OffsetBias {
        r: uniform(&mut r, &[h, w], 1.0),
    };
    let with = sample_with_bias(&x, Some(&bias), &grid, &zero, BiasLookup::Absolute).unwrap();
    for (i, v) in with.data().iter().enumerate() {
        assert_eq!(*v, x.data()[i] + bias.r.data()[i / c]);
    }

    let dp = Tensor::from_fn(&[h, w, 2], |i| {
        let extent = if i % 2 == 0 { w } else { h };
        r.gen_range(-1.0..1.0) / extent as f64
    });
    let got = sample_with_bias(&x, Some(&bias), &grid, &dp, BiasLookup::Absolute).unwrap();
    let r_map = bias.r.reshape(&[h, w, 1]).unwrap();
    for k in 0..h * w {
        let (px, py) = (grid.p.data()[2 * k], grid.p.data()[2 * k + 1]);
        let (dx, dy) = (dp.data()[2 * k], dp.data()[2 * k + 1]);
        let xs = bilinear_oracle(&x, px + dx, py + dy);
        let rs = bilinear_oracle(&r_map, px + dx / 2.0, py + dy / 2.0)[0];
        for (g, x) in got.data()[k * c..(k + 1) * c].iter().zip(&xs) {
            assert!((g - (x + rs)).abs() <= 1e-12);
        }
    }
    let rel = sample_with_bias(&x, Some(&bias), &grid, &dp, BiasLookup::Relative).unwrap();
    for k in 0..h * w {
        let (px, py) = (grid.p.data()[2 * k], grid.p.data()[2 * k + 1]);
        let (dx, dy) = (dp.data()[2 * k], dp.data()[2 * k + 1]);
        let xs = bilinear_oracle(&x, px + dx, py + dy);
        let rs = bilinear_oracle(&r_map, dx / 2.0, dy / 2.0)[0];
        for (g, x) in rel.data()[k * c..(k + 1) * c].iter().zip(&xs) {
            assert!((g - (x + rs)).abs() <= 1e-12);
        }
    }
}

#[test]
fn order_examples() {
    let t = make_token_index(4).unwrap();
    let o = order_from_index(&t, &Tensor::new(&[4], vec![0.8, 0.0, 0.0, -0.8]).unwrap()).unwrap();
    assert_eq!(o.order(), &[1, 0, 3, 2]);
    let id = order_from_index(&make_token_index(9).unwrap(), &Tensor::zeros(&[9])).unwrap();
    assert!(id.is_identity());
}

#[test]
fn order_is_stable_argsort() {
    let mut r = rng(6);
    let n = 256;
    let t = make_token_index(n).unwrap();
    for _ in 0..20 {
        let dt = Tensor::from_fn(&[n], |_| (r.gen_range(-1.0f64..1.0) * 8.0).round() / 8.0);
        let o = order_from_index(&t, &dt).unwrap();
        let mut want: Vec<usize> = (0..n).collect();
        let key = |i: usize| t.t_r.data()[i] + dt.data()[i];
        want.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap().then(a.cmp(&b)));
        assert_eq!(o.order(), &want[..]);
        for i in 0..n {
            assert_eq!(o.inverse()[o.order()[i]], i);
        }
    }
}

#[test]
fn flatten_round_trip_and_multiset() {
    let mut r = rng(7);
    let (h, w, c) = (5, 3, 4);
    let x = uniform(&mut r, &[h, w, c], 1.0);
    let raster = flatten_by_order(&x, &ScanOrder::identity(h * w)).unwrap();
    assert_eq!(raster.data(), x.data());
    for _ in 0..10 {
        let o = random_order(&mut r, h * w);
        let seq = flatten_by_order(&x, &o).unwrap();
        assert_eq!(unflatten_by_order(&seq, &o, h, w).unwrap().data(), x.data());
        let mut a = seq.data().to_vec();
        let mut b = x.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }
    assert!(matches!(
        flatten_by_order(&x, &ScanOrder::identity(4)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn straight_through_matches_gather_then_mean() {
    let mut r = rng(8);
    let (n, c) = (30, 5);
    let g = uniform(&mut r, &[n, c], 1.0);
    let o = random_order(&mut r, n);
    let got = straight_through_index_grad(&g, &o).unwrap();
    for (j, &slot) in o.inverse().iter().enumerate() {
        let row = &g.data()[slot * c..][..c];
        assert_eq!(got.data()[j], row.iter().sum::<f64>() / c as f64);
    }
    let single = uniform(&mut r, &[n, 1], 1.0);
    let id = straight_through_index_grad(&single, &ScanOrder::identity(n)).unwrap();
    assert_eq!(id.data(), single.data());
}

#[test]
fn tape_sort_gradient_is_channel_mean_of_inverse_gather() {
    let mut r = rng(9);
    let (n, c) = (16, 3);
    let x = uniform(&mut r, &[n, c], 1.0);
    let dt = uniform(&mut r, &[n], 0.3);
    let g = uniform(&mut r, &[n, c], 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let tv = tape.leaf(dt);
    let (seq, order) = tape.sort_tokens(xv, tv).unwrap();
    let grads = tape.backward_with(seq, &g).unwrap();
    let want = straight_through_index_grad(&g, &order).unwrap();
    assert_eq!(grads.wrt(&tape, tv).data(), want.data());
    let gx = grads.wrt(&tape, xv);
    for i in 0..n {
        assert_eq!(
            &gx.data()[order.order()[i] * c..][..c],
            &g.data()[i * c..][..c]
        );
    }
}

fn pipeline_oracle(x: &Tensor, t: DeformToggles, w: &DeformableScanWeights) -> (Tensor, ScanOrder) {
    let (h, wd) = (x.shape()[0], x.shape()[1]);
    let field =
        squash_split_normalize(&offset_network(x, w.offset.as_ref().unwrap()).unwrap()).unwrap();
    let x_hat = if t.dp {
        let grid = make_reference_grid(h, wd).unwrap();
        let bias = if t.ob { w.bias.as_ref() } else { None };
        sample_with_bias(x, bias, &grid, &field.delta_p, w.lookup).unwrap()
    } else {
        x.clone()
    };
    let order = if t.dt {
        order_from_index(&make_token_index(h * wd).unwrap(), &field.delta_t).unwrap()
    } else {
        ScanOrder::identity(h * wd)
    };
    (flatten_by_order(&x_hat, &order).unwrap(), order)
}

#[test]
fn pipeline_matches_manual_composition() {
    let mut r = rng(10);
    for toggles in [
        DeformToggles::ALL,
        DeformToggles {
            ob: false,
            ..DeformToggles::ALL
        },
        DeformToggles {
            dt: false,
            ..DeformToggles::ALL
        },
        DeformToggles {
            dp: false,
            ..DeformToggles::ALL
        },
        DeformToggles {
            ca: false,
            ..DeformToggles::ALL
        },
    ] {
        let w = random_deform_weights(&mut r, 4, 3, (5, 6), toggles).unwrap();
        let x = uniform(&mut r, &[5, 6, 4], 1.0);
        let (seq, order) = deformable_scan(&x, toggles, &w).unwrap();
        let (want, want_order) = pipeline_oracle(&x, toggles, &w);
        assert_eq!(order, want_order);
        assert!(max_abs_diff(seq.data(), want.data()) <= 1e-12);

        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let vars = DeformVars::bind(&mut tape, &w);
        let out = tape.deformable_scan(xv, toggles, &vars).unwrap();
        assert_eq!(out.order, want_order);
        assert!(max_abs_diff(tape.value(out.seq).data(), want.data()) <= 1e-12);
    }
}

#[test]
fn fresh_weights_give_raster_flattening() {
    let mut r = rng(11);
    for toggles in [
        DeformToggles::ALL,
        DeformToggles {
            ob: false,
            ..DeformToggles::ALL
        },
    ] {
        let w = DeformableScanWeights::init(&mut r, 6, 5, (8, 8), toggles).unwrap();
        let x = uniform(&mut r, &[8, 8, 6], 2.0);
        let (seq, order) = deformable_scan(&x, toggles, &w).unwrap();
        assert!(order.is_identity());
        assert_eq!(seq.data(), x.data());
    }
}

#[test]
fn toggles_off_ignore_weights() {
    let mut r = rng(12);
    let off = DeformToggles {
        dp: false,
        dt: false,
        ob: true,
        ca: true,
    };
    let w = random_deform_weights(&mut r, 4, 3, (4, 4), DeformToggles::ALL).unwrap();
    let x = uniform(&mut r, &[4, 4, 4], 1.0);
    let (seq, order) = deformable_scan(&x, off, &w).unwrap();
    assert!(order.is_identity());
    assert_eq!(seq.data(), x.data());
}

#[test]
fn random_offset_fields_give_permutations() {
    let mut r = rng(13);
    for _ in 0..1000 {
        let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let weights = random_deform_weights(&mut r, 4, 3, (h, w), DeformToggles::ALL).unwrap();
        let x = uniform(&mut r, &[h, w, 4], 2.0);
        let (_, order) = deformable_scan(&x, DeformToggles::ALL, &weights).unwrap();
        let mut seen = vec![false; h * w];
        for &i in order.order() {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(ScanOrder::new(order.order().to_vec()).is_ok());
    }
}

#[test]
fn offset_projection_receives_gradient_from_both_paths() {
    let mut r = rng(14);
    let (h, w, c) = (6, 6, 8);
    let weights = DeformableScanWeights::init(&mut r, c, 3, (h, w), DeformToggles::ALL).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(uniform(&mut r, &[h, w, c], 1.0));
    let vars = DeformVars::bind(&mut tape, &weights);
    let out = tape.deformable_scan(x, DeformToggles::ALL, &vars).unwrap();
    let grads = tape
        .backward_with(out.seq, &uniform(&mut r, &[h * w, c], 1.0))
        .unwrap();
    let proj = grads.wrt(&tape, vars.offset.unwrap().proj);
    for col in 0..3 {
        let live = (0..c).filter(|&i| proj.data()[i * 3 + col] != 0.0).count();
        assert!(
            live > 0,
            "column {col} of the offset projection got no gradient"
        );
    }
    assert!(grads
        .wrt(&tape, vars.bias.unwrap())
        .data()
        .iter()
        .any(|&v| v != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn samples_stay_inside_value_range(seed in any::<u64>(), h in 1usize..=6, w in 1usize..=6, scale in 0.1f64..50.0) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[h, w, 2], 1.0);
        let bias = OffsetBias { r: uniform(&mut r, &[h, w], 1.0) };
        let dp = uniform(&mut r, &[h, w, 2], scale);
        let grid = make_reference_grid(h, w).unwrap();
        let y = sample_with_bias(&x, Some(&bias), &grid, &dp, BiasLookup::Absolute).unwrap();
        let (xl, xh) = range(&x);
        let (rl, rh) = range(&bias.r);
        prop_assert!(y.data().iter().all(|&v| v >= xl + rl - 1e-12 && v <= xh + rh + 1e-12));
    }

    #[test]
    fn round_trip_any_permutation(seed in any::<u64>(), h in 1usize..=7, w in 1usize..=7, c in 1usize..=3) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[h, w, c], 1.0);
        let o = random_order(&mut r, h * w);
        let seq = flatten_by_order(&x, &o).unwrap();
        let back = unflatten_by_order(&seq, &o, h, w).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }
}

fn range(t: &Tensor) -> (f64, f64) {
    (
        t.data().iter().copied().fold(f64::INFINITY, f64::min),
        t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
    )
}
