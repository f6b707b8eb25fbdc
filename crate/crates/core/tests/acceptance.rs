use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use defscan::autodiff::{AdamW, ParamId, Tape};
use defscan::deform::{
    bilinear_sample, deformable_scan, flatten_by_order, make_reference_grid,
    straight_through_index_grad, unflatten_by_order, DeformToggles, DeformVars,
    DeformableScanWeights,
};
use defscan::harness::bench::{bench_scan, render_csv, BENCH_HEADER};
use defscan::harness::checkpoint::Checkpoint;
use defscan::harness::config::{OptimConfig, RunConfig};
use defscan::harness::data::{synth_dataset, DatasetKind};
use defscan::harness::gradcheck::{
    gradcheck, random_deform_weights, GradcheckOptions, Scope, Verdict,
};
use defscan::harness::train::{batch_gradient, thread_pool, train};
use defscan::harness::viz::{scan_views, scan_viz, Ppm};
use defscan::init::{rng, uniform};
use defscan::model::{count_params, BranchToggles, Model, ModelConfig, Preset};
use defscan::ops::{activation, depthwise_conv2d, linear, Activation};
use defscan::scan_order::ScanOrder;
use defscan::ssm::{
    discretize, discretize_zoh, s6_project, selective_scan_chunked, selective_scan_sequential,
    Discretization, SsmParams,
};
use defscan::{Error, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: defscan::Result<T>) -> Result<T, String> {
    r.map_err(|e| format!("{}: {e}", e.code()))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Small configuration for harness plumbing checks.
fn micro() -> RunConfig {
    RunConfig::from_text(
        "model.preset = nano\nmodel.widths = 8,16,32,64\nmodel.depths = 1,1,1,1\n\
         train.steps = 2\ntrain.batch_size = 4\ntrain.seed = 3\n\
         data.train_size = 16\ndata.eval_size = 8\ndata.seed = 5\n",
    )
    .expect("micro configuration parses")
}

fn gradient_suite() -> Outcome {
    const SEEDS: u64 = 20;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let (mut checks, mut skipped, mut worst) = (0, 0, 0.0f64);
    for seed in 0..SEEDS {
        let report = ok(gradcheck(
            Scope::All,
            GradcheckOptions {
                seed,
                tolerance: TOL,
                force_lattice: false,
            },
        ))?;
        for r in &report.results {
            checks += 1;
            match &r.verdict {
                Verdict::Pass => worst = worst.max(r.rel_err),
                Verdict::Skipped(_) => skipped += 1,
                Verdict::Fail => {
                    return Err(format!(
                        "seed {seed}: {}/{} rel err {:.3e}",
                        r.suite, r.op, r.rel_err
                    ));
                }
            }
        }
    }
    let lattice = ok(gradcheck(
        Scope::Deformable,
        GradcheckOptions {
            seed: 0,
            tolerance: TOL,
            force_lattice: true,
        },
    ))?;
    let lattice_skips = lattice
        .results
        .iter()
        .filter(|r| matches!(r.verdict, Verdict::Skipped(_)))
        .count();
    ensure(lattice.passed() && lattice_skips > 0, || {
        "lattice-line offsets were not excluded".into()
    })?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(180), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{checks} checks over {SEEDS} seeds, {skipped} skipped, worst rel err {worst:.2e} <= {TOL:e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn zoh_correctness() -> Outcome {
    let one = |v: f64| Tensor::new(&[1, 1], vec![v]).unwrap();
    let b = 0.8;
    let dz = ok(discretize_zoh(
        &one(std::f64::consts::LN_2),
        &one(-1.0),
        &one(b),
        &one(1.0),
    ))?;
    let (ea, eb) = (
        (dz.a_bar.data()[0] - 0.5).abs(),
        (dz.b_bar_u.data()[0] - 0.5 * b).abs(),
    );
    ensure(ea <= 1e-12 && eb <= 1e-12, || {
        format!("closed form off by {ea:.1e}, {eb:.1e}")
    })?;
    let dt = 1e-9;
    let mut worst = 0.0f64;
    for (a, b) in [(-1.0, 1.0), (-7.5, -0.3), (-0.01, 2.0), (-40.0, 0.5)] {
        let dz = ok(discretize_zoh(&one(dt), &one(a), &one(b), &one(1.0)))?;
        let z = dt * a;
        let series_b = dt * b * (1.0 + z / 2.0 + z * z / 6.0);
        let series_a = 1.0 + z + z * z / 2.0;
        worst = worst
            .max(((dz.b_bar_u.data()[0] - series_b) / series_b).abs())
            .max(((dz.a_bar.data()[0] - series_a) / series_a).abs());
    }
    ensure(worst <= 1e-10, || {
        format!("series limit rel err {worst:.2e}")
    })?;
    Ok(format!(
        "closed form err {:.1e}, series limit rel err {worst:.1e} <= 1e-10",
        ea.max(eb)
    ))
}

fn scan_equivalence() -> Outcome {
    let start = Instant::now();
    let (l, d, n) = (256, 4, 8);
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut r = rng(seed);
        let delta = Tensor::from_fn(&[l, d], |_| r.gen_range(1e-3..0.5));
        let a = Tensor::from_fn(&[d, n], |_| -r.gen_range(0.05..4.0));
        let (b, c) = (uniform(&mut r, &[l, n], 1.0), uniform(&mut r, &[l, n], 1.0));
        let u = uniform(&mut r, &[l, d], 1.0);
        let skip = uniform(&mut r, &[d], 1.0);
        let dz = ok(discretize_zoh(&delta, &a, &b, &u))?;
        let seq = ok(selective_scan_sequential(&dz, &c, &u, &skip))?;
        for chunk in [1, 3, 16, 64, l, l + 7] {
            let ch = ok(selective_scan_chunked(&dz, &c, &u, &skip, chunk))?;
            worst = worst.max(max_abs_diff(ch.data(), seq.data()));
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-10, || format!("max abs diff {worst:.2e}"))?;
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "L=256, chunks {{1,3,16,64,L,L+7}}, 10 seeds: max abs diff {worst:.1e} <= 1e-10, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn degenerate_identity() -> Outcome {
    let mut r = rng(21);
    for toggles in [
        DeformToggles::ALL,
        DeformToggles {
            ob: false,
            ..DeformToggles::ALL
        },
    ] {
        let w = ok(DeformableScanWeights::init(&mut r, 16, 5, (8, 8), toggles))?;
        let x = uniform(&mut r, &[8, 8, 16], 2.0);
        let (seq, order) = ok(deformable_scan(&x, toggles, &w))?;
        ensure(order.is_identity() && seq.data() == x.data(), || {
            "zero-initialized deformable scan is not the raster flattening".into()
        })?;
    }

    let cfg = ModelConfig {
        branches: BranchToggles {
            fb_bb: false,
            cb: false,
            lb: false,
            db: true,
            gate: true,
        },
        ..ModelConfig::nano()
    };
    let model = ok(Model::new(cfg, 5))?;
    let ids = model.stages()[0].blocks[0].dssm.clone();
    let v = |id: ParamId| model.store().value(id).clone();
    let (h, w, c) = (8, 8, 16);
    let x = uniform(&mut r, &[h, w, c], 1.0);
    let flat_x = x.reshape(&[h * w, c]).unwrap();
    let proj = ok(linear(&flat_x, &v(ids.in_proj), None))?;
    let d = proj.shape()[1];
    let conv = ok(depthwise_conv2d(
        &proj.reshape(&[h, w, d]).unwrap(),
        &v(ids.dw_w),
        Some(&v(ids.dw_b)),
        1,
        1,
    ))?;
    let u = activation(Activation::Silu, &conv)
        .reshape(&[h * w, d])
        .unwrap();
    let s = &ids.branches[0].ssm;
    let params = SsmParams {
        a_log: v(s.a_log),
        d_skip: v(s.d_skip),
        w_b: v(s.w_b),
        w_c: v(s.w_c),
        w_dt: v(s.w_dt),
        w_dt_out: v(s.w_dt_out),
        b_dt: v(s.b_dt),
    };
    let inp = ok(s6_project(&u, &params))?;
    let dz = ok(discretize(
        &inp.delta,
        &params.a(),
        &inp.b,
        &inp.u,
        Discretization::Zoh,
    ))?;
    let y = ok(selective_scan_sequential(
        &dz,
        &inp.c,
        &inp.u,
        &params.d_skip,
    ))?;
    let gate = activation(
        Activation::Silu,
        &ok(linear(&flat_x, &v(ids.gate.unwrap()), None))?,
    );
    let gated = Tensor::from_fn(y.shape(), |i| y.data()[i] * gate.data()[i]);
    let want = ok(linear(&gated, &v(ids.out_proj), None))?;

    let mut tape = Tape::new();
    let bound = model.store().bind_frozen(&mut tape);
    let xv = tape.constant(x);
    let got = ok(model.dssm(&mut tape, &bound, &ids, xv, &mut Vec::new()))?;
    let diff = max_abs_diff(tape.value(got).data(), want.data());
    ensure(diff <= 1e-12, || {
        format!("deformable branch differs from raster SSM by {diff:.2e}")
    })?;
    Ok(format!(
        "raster flattening exact; branch vs raster SSM reference {diff:.1e} <= 1e-12"
    ))
}

fn permutation_and_sampling() -> Outcome {
    let mut r = rng(31);
    for _ in 0..1000 {
        let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let weights = ok(random_deform_weights(
            &mut r,
            4,
            3,
            (h, w),
            DeformToggles::ALL,
        ))?;
        let x = uniform(&mut r, &[h, w, 4], 2.0);
        let (seq, order) = ok(deformable_scan(&x, DeformToggles::ALL, &weights))?;
        let mut sorted = order.order().to_vec();
        sorted.sort_unstable();
        ensure(sorted == (0..h * w).collect::<Vec<_>>(), || {
            "order is not a permutation".into()
        })?;
        let back = ok(unflatten_by_order(&seq, &order, h, w))?;
        let again = ok(flatten_by_order(&back, &order))?;
        ensure(again.data() == seq.data(), || {
            "flatten/unflatten round trip is not exact".into()
        })?;
    }
    let x = uniform(&mut r, &[5, 6, 3], 1.0);
    for _ in 0..50 {
        let mut v: Vec<usize> = (0..30).collect();
        v.shuffle(&mut r);
        let o = ok(ScanOrder::new(v))?;
        let back = ok(unflatten_by_order(&ok(flatten_by_order(&x, &o))?, &o, 5, 6))?;
        ensure(back.data() == x.data(), || "round trip is not exact".into())?;
    }

    let f = |u: f64, v: f64| 2.0 * u + 3.0 * v + 1.0;
    let field = Tensor::from_fn(&[8, 8, 1], |i| {
        f(
            2.0 * (i % 8) as f64 / 7.0 - 1.0,
            2.0 * (i / 8) as f64 / 7.0 - 1.0,
        )
    });
    let coords = uniform(&mut r, &[50, 2], 1.0);
    let y = ok(bilinear_sample(&field, &coords))?;
    let affine = coords
        .data()
        .chunks_exact(2)
        .enumerate()
        .map(|(k, p)| (y.data()[k] - f(p[0], p[1])).abs())
        .fold(0.0, f64::max);
    ensure(affine <= 1e-12, || {
        format!("affine field error {affine:.2e}")
    })?;
    let lattice = make_reference_grid(5, 6)
        .unwrap()
        .p
        .reshape(&[30, 2])
        .unwrap();
    ensure(
        ok(bilinear_sample(&x, &lattice))?.data() == x.data(),
        || "lattice reads are not exact".into(),
    )?;
    Ok(format!(
        "1000 offset fields give permutations; round trips exact; affine err {affine:.1e} <= 1e-12; lattice exact"
    ))
}

fn straight_through_contract() -> Outcome {
    let mut r = rng(41);
    let (n, c) = (24, 5);
    let mut tape = Tape::new();
    let xv = tape.leaf(uniform(&mut r, &[n, c], 1.0));
    let tv = tape.leaf(uniform(&mut r, &[n], 0.4));
    let g = uniform(&mut r, &[n, c], 1.0);
    let (seq, order) = ok(tape.sort_tokens(xv, tv))?;
    let grads = ok(tape.backward_with(seq, &g))?;
    let oracle: Vec<f64> = (0..n)
        .map(|j| g.data()[order.inverse()[j] * c..][..c].iter().sum::<f64>() / c as f64)
        .collect();
    ensure(grads.wrt(&tape, tv).data() == &oracle[..], || {
        "grad of Δt differs from oracle".into()
    })?;
    ensure(
        ok(straight_through_index_grad(&g, &order))?.data() == &oracle[..],
        || "pure straight-through rule differs from oracle".into(),
    )?;

    let weights = ok(DeformableScanWeights::init(
        &mut r,
        8,
        3,
        (6, 6),
        DeformToggles::ALL,
    ))?;
    let mut tape = Tape::new();
    let x = tape.leaf(uniform(&mut r, &[6, 6, 8], 1.0));
    let vars = DeformVars::bind(&mut tape, &weights);
    let out = ok(tape.deformable_scan(x, DeformToggles::ALL, &vars))?;
    let grads = ok(tape.backward_with(out.seq, &uniform(&mut r, &[36, 8], 1.0)))?;
    let proj = grads.wrt(&tape, vars.offset.unwrap().proj);
    let live_cols = (0..3)
        .filter(|&k| (0..8).any(|i| proj.data()[i * 3 + k] != 0.0))
        .count();
    ensure(live_cols == 3, || {
        format!("only {live_cols} of 3 offset outputs get gradient")
    })?;

    let side = 128;
    let mut model = ok(Model::new(
        ModelConfig {
            image_size: side,
            ..ModelConfig::nano()
        },
        7,
    ))?;
    let data: Vec<_> = ok(synth_dataset(DatasetKind::Shapes8, 4, 8))?
        .into_iter()
        .map(|mut s| {
            s.image = uniform(&mut r, &[side, side, 3], 1.0);
            s
        })
        .collect();
    let batch: Vec<_> = data.iter().collect();
    let pool = ok(thread_pool())?;
    let optim = OptimConfig::default();
    let mut opt = AdamW::new(optim.adamw(), model.store());
    let (g0, _, _) = ok(batch_gradient(&model, &batch, 0.0, &pool))?;
    let store = model.store_mut();
    store.zero_grads();
    store.accumulate_flat(&g0);
    opt.step(store, optim.lr);
    let (g1, _, _) = ok(batch_gradient(&model, &batch, 0.0, &pool))?;
    let mut offset_tensors = 0;
    let mut at = 0;
    for p in model.store().iter() {
        let len = p.value.numel();
        if p.name.contains(".offset") {
            offset_tensors += 1;
            ensure(g1[at..at + len].iter().any(|&v| v != 0.0), || {
                format!("{} has no gradient", p.name)
            })?;
        }
        at += len;
    }
    let live = g1.iter().filter(|&&v| v != 0.0).count() as f64 / g1.len() as f64;
    ensure(live >= 0.99, || {
        format!("only {live:.4} of gradient entries nonzero")
    })?;
    Ok(format!(
        "Δt gradient equals oracle exactly; all {offset_tensors} offset-network tensors live; {:.2}% nonzero after one step",
        100.0 * live
    ))
}

fn architecture() -> Outcome {
    let cfg = ModelConfig::preset(Preset::Tiny);
    ensure(
        cfg.depths == [2, 2, 5, 2]
            && cfg.widths == [48, 96, 192, 384]
            && cfg.offset_kernels == [9, 7, 5, 3],
        || {
            format!(
                "tiny layout {:?} {:?} {:?}",
                cfg.depths, cfg.widths, cfg.offset_kernels
            )
        },
    )?;
    let params = ok(count_params(&cfg))?;
    ensure((6_400_000..=9_600_000).contains(&params), || {
        format!("tiny has {params} parameters")
    })?;
    for (cfg, side) in [
        (
            ModelConfig {
                image_size: 64,
                ..cfg
            },
            64,
        ),
        (ModelConfig::nano(), 32),
    ] {
        let model = ok(Model::new(cfg.clone(), 0))?;
        let mut tape = Tape::new();
        let b = model.store().bind_frozen(&mut tape);
        let img = tape.constant(uniform(&mut rng(0), &[side, side, 3], 1.0));
        let trace = ok(model.forward(&mut tape, &b, img))?;
        for s in 0..4 {
            let want = [side >> (s + 2), side >> (s + 2), cfg.widths[s]];
            ensure(trace.stage_shapes[s + 1] == want, || {
                format!(
                    "stage {s} is {:?}, want {want:?}",
                    trace.stage_shapes[s + 1]
                )
            })?;
        }
    }
    Ok(format!(
        "DefMamba-T [2,2,5,2]/[48,96,192,384]/K[9,7,5,3], {params} params; stages H/4..H/32"
    ))
}

fn learning_smoke() -> Outcome {
    const STEPS: usize = 300;
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.train.steps = STEPS;
    let report = ok(train(&cfg, None))?;
    let elapsed = start.elapsed();
    ensure(report.train_acc >= 0.90, || {
        format!("train acc {:.3} after {STEPS} steps", report.train_acc)
    })?;
    ensure(elapsed < Duration::from_secs(600), || {
        format!("took {elapsed:?}")
    })?;

    let mut frozen = micro();
    frozen.optim.lr = 0.0;
    frozen.optim.min_lr = 0.0;
    let still = ok(train(&frozen, None))?;
    let init = ok(Model::new(frozen.model.clone(), frozen.train.seed))?;
    let same = still
        .model
        .store()
        .iter()
        .zip(init.store().iter())
        .all(|(p, q)| p.value.data() == q.value.data());
    ensure(same, || "lr = 0 changed the weights".into())?;
    Ok(format!(
        "nano, {} train, {STEPS} steps: train acc {:.3} >= 0.90 (eval {:.3}), {:.0}s; lr=0 weights bit-identical",
        cfg.data.train_size,
        report.train_acc,
        report.eval_acc,
        elapsed.as_secs_f64()
    ))
}

fn ablation_harness() -> Outcome {
    let cfg = micro();
    let a = ok(bench_scan(&cfg))?;
    let b = ok(bench_scan(&cfg))?;
    let csv = render_csv(&a);
    ensure(csv == render_csv(&b), || {
        "bench output differs between runs".into()
    })?;
    ensure(csv.lines().next() == Some(BENCH_HEADER), || {
        "bad header".into()
    })?;
    ensure(a.len() == 9, || format!("{} rows", a.len()))?;
    let p: Vec<usize> = a.iter().map(|r| r.params).collect();
    ensure(p[0] < p[1] && p[1] == p[2] && p[2] < p[3], || {
        format!("branch grid params {:?}", &p[..4])
    })?;
    ensure(
        p[4] == p[5] && p[5] == p[6] && p[6] < p[7] && p[7] < p[8],
        || format!("component grid params {:?}", &p[4..]),
    )?;
    Ok(format!(
        "4 + 5 rows, deterministic, params FB-BB {} < FB-BB+DB {}",
        p[0], p[3]
    ))
}

fn persistence() -> Outcome {
    let cfg = micro();
    let model = ok(Model::new(cfg.model.clone(), 4))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ok(Checkpoint::from_model(&model, &cfg).save(&p1))?;
    let loaded = ok(Checkpoint::load(&p1))?;
    ok(loaded.save(&p2))?;
    let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    ensure(b1 == b2, || "save, load, save is not byte-identical".into())?;
    for cut in [2, 6, 40, b1.len() / 2, b1.len() - 3] {
        match Checkpoint::from_bytes(&b1[..cut]) {
            Err(Error::Format { offset, reason }) => ensure(offset as usize <= cut, || {
                format!("cut at {cut} reported offset {offset}: {reason}")
            })?,
            other => return Err(format!("truncation at {cut} gave {:?}", other.map(|_| ()))),
        }
    }
    let (model, _) = ok(loaded.to_model())?;
    let img = ok(synth_dataset(cfg.data.kind, 1, 0))?.remove(0).image;
    let viz = dir.path().join("viz");
    let paths = ok(scan_viz(&model, &img, &viz))?;
    for p in &paths {
        let bytes = std::fs::read(p).unwrap();
        ensure(bytes.starts_with(b"P6\n"), || {
            format!("{} lacks P6 magic", p.display())
        })?;
        let ppm = ok(Ppm::from_bytes(&bytes))?;
        ensure(ppm.rgb.len() == 3 * ppm.width * ppm.height, || {
            "bad pixmap size".into()
        })?;
    }
    let views = ok(scan_views(&model, &img))?;
    ensure(
        views.deformable_order.is_identity() && views.order_raster == views.order_deformable,
        || "zero-offset order map is not the raster map".into(),
    )?;
    Ok(format!(
        "{} byte checkpoint round trips exactly; truncations rejected with offsets; {} P6 files, identity order",
        b1.len(),
        paths.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient suite", gradient_suite),
        ("zoh correctness", zoh_correctness),
        ("scan equivalence", scan_equivalence),
        ("degenerate identity", degenerate_identity),
        ("permutation and sampling", permutation_and_sampling),
        ("straight-through contract", straight_through_contract),
        ("architecture construction", architecture),
        ("learning smoke test", learning_smoke),
        ("ablation harness", ablation_harness),
        ("persistence and visualization", persistence),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let outcome =
            catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failures += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
