use std::path::Path;
use std::process::{Command, Output};

use defscan::harness::bench::{bench_scan, render_csv, BENCH_HEADER};
use defscan::harness::checkpoint::{Checkpoint, MAGIC};
use defscan::harness::config::RunConfig;
use defscan::harness::data::{synth_dataset, DatasetKind, Glyph, NUM_CLASSES};
use defscan::harness::train::{train, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, METRICS_HEADER};
use defscan::harness::viz::{
    rank_color, scan_views, scan_viz, Ppm, ORDER_DEFORMABLE_FILE, ORDER_RASTER_FILE, POINTS_FILE,
};
use defscan::model::{Model, ModelConfig};
use defscan::{Error, Tensor};
use proptest::prelude::*;

/// Small enough that a few optimizer steps take well under a second.
const MICRO: &str = "\
model.preset = nano
model.widths = 8,16,32,64
model.depths = 1,1,1,1
train.steps = 2
train.batch_size = 4
train.seed = 3
data.train_size = 16
data.eval_size = 8
data.seed = 5
";

fn micro() -> RunConfig {
    RunConfig::from_text(MICRO).unwrap()
}

fn defscan(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_defscan"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_fails_with(o: &Output, code: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    assert!(lines[0].starts_with(&format!("{code}: ")), "{err:?}");
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn dataset_is_deterministic_and_balanced() {
    let a = synth_dataset(DatasetKind::Shapes8, 800, 7).unwrap();
    let b = synth_dataset(DatasetKind::Shapes8, 800, 7).unwrap();
    let mut hist = [0usize; NUM_CLASSES];
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image.data(), y.image.data());
        assert_eq!(x.label, y.label);
        hist[x.label] += 1;
        let shape = match x.params.glyph {
            Glyph::L => 0,
            Glyph::T => 1,
        };
        assert_eq!(x.label, shape * 4 + x.params.quadrant);
    }
    assert_eq!(hist, [100; NUM_CLASSES]);
    let c = synth_dataset(DatasetKind::Shapes8, 800, 8).unwrap();
    assert_ne!(a[0].image.data(), c[0].image.data());
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let mut cfg = micro();
    cfg.optim.lr = 0.0;
    cfg.optim.min_lr = 0.0;
    let report = train(&cfg, None).unwrap();
    let init = Model::new(cfg.model.clone(), cfg.train.seed).unwrap();
    for (p, q) in report.model.store().iter().zip(init.store().iter()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.value.data(), q.value.data(), "{}", p.name);
    }
    assert!(report.metrics.iter().all(|m| m.lr == 0.0));
}

#[test]
fn fixed_seed_runs_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = micro();
    let ra = train(&cfg, Some(&a)).unwrap();
    let rb = train(&cfg, Some(&b)).unwrap();
    assert_eq!(ra.train_acc, rb.train_acc);
    for f in [METRICS_FILE, CHECKPOINT_FILE, CONFIG_FILE] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let metrics = std::fs::read_to_string(a.join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 1 + cfg.train.steps);
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[0], (i + 1) as f64);
    }
    assert!(metrics.ends_with('\n'));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = micro();
    let model = Model::new(cfg.model.clone(), 9).unwrap();
    let ckpt = Checkpoint::from_model(&model, &cfg);
    assert_eq!(ckpt.tensors.len(), model.store().len());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), bytes);
    let (back, back_cfg) = loaded.to_model().unwrap();
    assert_eq!(back_cfg, cfg);
    for (p, q) in back.store().iter().zip(model.store().iter()) {
        assert_eq!(p.value.data(), q.value.data());
    }
}

#[test]
fn nano_checkpoint_holds_every_parameter() {
    let cfg = RunConfig::default();
    let model = Model::new(cfg.model.clone(), 0).unwrap();
    let ckpt = Checkpoint::from_model(&model, &cfg);
    let names: Vec<&str> = model.store().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(ckpt.tensors.len(), names.len());
    assert!(ckpt.tensors.iter().zip(&names).all(|((n, _), m)| n == m));
}

#[test]
fn damaged_checkpoints_name_an_offset() {
    let cfg = micro();
    let bytes = Checkpoint::from_model(&Model::new(cfg.model.clone(), 0).unwrap(), &cfg).to_bytes();
    for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Format { offset: 0, .. })
    ));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Format { offset: 4, .. })
    ));
    let mut long = bytes;
    long.push(0);
    assert!(matches!(
        Checkpoint::from_bytes(&long),
        Err(Error::Format { .. })
    ));
}

#[test]
fn color_ramp_is_linear_in_rank() {
    let n = 17;
    assert_eq!(rank_color(0, n), [255, 255, 0]);
    assert_eq!(rank_color(n - 1, n), [0, 255, 0]);
    for r in 0..n {
        let want = (255.0 * (1.0 - r as f64 / (n - 1) as f64)).round() as u8;
        assert_eq!(rank_color(r, n), [want, 255, 0]);
    }
}

#[test]
fn fresh_model_views_are_identity_orders() {
    let model = Model::new(ModelConfig::nano(), 1).unwrap();
    let img = synth_dataset(DatasetKind::Shapes8, 1, 0)
        .unwrap()
        .remove(0)
        .image;
    let views = scan_views(&model, &img).unwrap();
    assert!(views.deformable_order.is_identity());
    assert_eq!(views.order_raster, views.order_deformable);
    let dir = tempfile::tempdir().unwrap();
    let paths = scan_viz(&model, &img, dir.path()).unwrap();
    assert_eq!(paths.len(), 3);
    for (path, name) in paths
        .iter()
        .zip([POINTS_FILE, ORDER_RASTER_FILE, ORDER_DEFORMABLE_FILE])
    {
        assert!(path.ends_with(name));
        let bytes = std::fs::read(path).unwrap();
        assert!(bytes.starts_with(b"P6\n"));
        let ppm = Ppm::from_bytes(&bytes).unwrap();
        assert_eq!(ppm.rgb.len(), ppm.width * ppm.height * 3);
    }
    let raster = std::fs::read(&paths[1]).unwrap();
    assert_eq!(raster, std::fs::read(&paths[2]).unwrap());
    assert!(matches!(
        scan_viz(&model, &Tensor::zeros(&[16, 16, 3]), dir.path()),
        Err(Error::Input(_))
    ));
}

#[test]
fn bench_grid_is_deterministic_and_ordered() {
    let mut cfg = micro();
    cfg.train.steps = 1;
    let a = bench_scan(&cfg).unwrap();
    let b = bench_scan(&cfg).unwrap();
    assert_eq!(render_csv(&a), render_csv(&b));
    let csv = render_csv(&a);
    assert_eq!(csv.lines().next().unwrap(), BENCH_HEADER);
    assert_eq!(csv.lines().count(), 1 + 9);
    let p: Vec<usize> = a.iter().map(|r| r.params).collect();
    let names: Vec<&str> = a.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(
        names,
        [
            "FB-BB",
            "FB-BB+CB",
            "FB-BB+LB",
            "FB-BB+DB",
            "DP",
            "DT",
            "DP+DT",
            "DP+DT+OB",
            "DP+DT+OB+CA"
        ]
    );
    assert!(p[0] < p[1] && p[1] == p[2] && p[2] < p[3]);
    assert!(p[4] == p[5] && p[5] == p[6] && p[6] < p[7] && p[7] < p[8]);
    assert_eq!(p[8], p[3]);
    assert!(a
        .iter()
        .all(|r| (0.0..=1.0).contains(&r.adjacency_retention)));
}

#[test]
fn cli_reports_single_line_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_fails_with(&defscan(&[], &[]), "E_USAGE");
    assert_fails_with(&defscan(&["frobnicate"], &[]), "E_USAGE");
    assert_fails_with(
        &defscan(&["gradcheck", "--scope", "nowhere"], &[]),
        "E_USAGE",
    );
    let missing = dir.path().join("absent.cfg");
    assert_fails_with(
        &defscan(&["train", "--config", missing.to_str().unwrap()], &[]),
        "E_IO",
    );
    let cfg = write_config(dir.path(), "model.preset = nano\nmodel.colour = red\n");
    assert_fails_with(&defscan(&["train", "--config", &cfg], &[]), "E_CONFIG");
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"DEFM\x01\x00").unwrap();
    let cfg = write_config(dir.path(), MICRO);
    assert_fails_with(
        &defscan(
            &["eval", "--ckpt", junk.to_str().unwrap(), "--config", &cfg],
            &[],
        ),
        "E_FORMAT",
    );
}

#[test]
fn cli_train_eval_and_viz() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MICRO);
    let out = dir.path().join("run");
    let o = defscan(
        &[
            "train",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--log-every",
            "1",
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("train_acc = ") && stdout.contains("eval_acc = "));
    let ckpt = out.join(CHECKPOINT_FILE);
    let ckpt = ckpt.to_str().unwrap();

    let o = defscan(&["eval", "--ckpt", ckpt, "--config", &cfg], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let other = write_config(dir.path(), &format!("{MICRO}model.gate = false\n"));
    assert_fails_with(
        &defscan(&["eval", "--ckpt", ckpt, "--config", &other], &[]),
        "E_CONFIG",
    );

    let viz = dir.path().join("viz");
    let o = defscan(
        &[
            "scan-viz",
            "--ckpt",
            ckpt,
            "--image",
            "synth:3",
            "--out",
            viz.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for name in [POINTS_FILE, ORDER_RASTER_FILE, ORDER_DEFORMABLE_FILE] {
        assert!(Ppm::load(&viz.join(name)).is_ok());
    }
    let small = dir.path().join("small.ppm");
    Ppm::new(8, 8).save(&small).unwrap();
    assert_fails_with(
        &defscan(
            &[
                "scan-viz",
                "--ckpt",
                ckpt,
                "--image",
                small.to_str().unwrap(),
                "--out",
                viz.to_str().unwrap(),
            ],
            &[],
        ),
        "E_INPUT",
    );
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{MICRO}train.batch_size = 9\n").replace("train.batch_size = 4\n", ""),
    );
    let mut ckpts = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = defscan(
            &[
                "train",
                "--config",
                &cfg,
                "--out",
                out.to_str().unwrap(),
                "--log-every",
                "0",
            ],
            &[("DEFSCAN_THREADS", threads)],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        ckpts.push(std::fs::read(out.join(CHECKPOINT_FILE)).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);
}

#[test]
fn cli_gradcheck_ops_passes() {
    let o = defscan(&["gradcheck", "--scope", "ops", "--seed", "2"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().count() > 10);
    let o = defscan(
        &["gradcheck", "--scope", "ops", "--tolerance", "1e-30"],
        &[],
    );
    assert_fails_with(&o, "E_GRADCHECK");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_round_trips(
        lr in 0.0f64..1.0,
        wd in 0.0f64..0.5,
        steps in 0usize..5000,
        batch in 1usize..128,
        seed in any::<u64>(),
        gate in any::<bool>(),
        cb in any::<bool>(),
        dp in any::<bool>(),
        chunk in proptest::option::of(1usize..300),
    ) {
        let mut cfg = RunConfig::default();
        cfg.optim.lr = lr;
        cfg.optim.weight_decay = wd;
        cfg.train.steps = steps;
        cfg.train.batch_size = batch;
        cfg.train.seed = seed;
        cfg.model.branches.gate = gate;
        cfg.model.branches.cb = cb;
        cfg.model.deform.dp = dp;
        cfg.model.scan_chunk = chunk;
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }
}
