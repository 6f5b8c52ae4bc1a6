mod common;

use std::fs;
use std::path::Path;

use common::rng;
use winn::checkpoint::{self, pool_path, LoadError};
use winn::config::RunConfig;
use winn::data::{make_dataset, ring, DatasetSpec, TexturePattern};
use winn::image_io::{decode_pgm, decode_png, encode, quantize, read_image, read_raw, write_image, write_raw, Format};
use winn::metrics::{self, METRICS_FILE, ROUNDS_FILE};
use winn::run::{checkpoint_path, train_run, TrainOptions};
use winn::{Tensor, WinnError};

const TOY: &str = r#"
name = "persist"
seed = 11

[dataset]
kind = "mixture"
count = 200
modes = 4
radius = 0.85
std = 0.05

[model]
preset = "mlp2d(8)"

[train]
stages = 4
inner_steps = 3
half_batch = 10
per_stage = 20
threshold_batch = 20
lr = 0.003

[synthesis]
max_steps = 10
"#;

fn toy(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml_with(TOY, &o).unwrap()
}

fn every_stage() -> TrainOptions {
    TrainOptions {
        checkpoint_every: 1,
        ..TrainOptions::default()
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn image_round_trip_over_every_bin() {
    let dir = tempfile::tempdir().unwrap();
    // Every byte value's bin centre and both bin edges.
    let mut values = Vec::new();
    for b in 0..=255u8 {
        let centre = b as f64 / 127.5 - 1.0;
        values.extend([centre, (centre - 0.5 / 127.5 + 1e-9).max(-1.0), (centre + 0.5 / 127.5 - 1e-9).min(1.0)]);
    }
    let mut r = rng(1);
    values.extend(Tensor::uniform(&[3 * 256], -1.0, 1.0, &mut r).into_data());
    let n = values.len();
    let gray = Tensor::new(vec![1, 1, n], values.clone()).unwrap();
    for name in ["g.png", "g.pgm"] {
        let p = dir.path().join(name);
        write_image(&gray, &p).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.shape(), gray.shape());
        let worst = back.data().iter().zip(&values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0 + 1e-12, "{name}: {worst}");
    }
    let rgb = Tensor::new(vec![3, 1, n / 3], values[..n / 3 * 3].to_vec()).unwrap();
    let back = decode_png(&encode(&rgb, Format::Png).unwrap()).unwrap();
    assert_eq!(back.shape(), rgb.shape());
    assert!(back.data().iter().zip(rgb.data()).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0 + 1e-12));

    assert_eq!((quantize(-1.0), quantize(1.0), quantize(0.0)), (0, 255, 128));
    let raw = dir.path().join("g.f64");
    write_raw(&gray, &raw).unwrap();
    assert_eq!(read_raw(&raw).unwrap(), gray);
}

#[test]
fn malformed_images_report_offsets() {
    match decode_pgm(b"P5\n4 x\n255\n").unwrap_err() {
        WinnError::Parse { offset, .. } => assert_eq!(offset, 5),
        e => panic!("{e}"),
    }
    let short = b"P5\n2 2\n255\n\x00\x01".to_vec();
    assert!(matches!(decode_pgm(&short).unwrap_err(), WinnError::Parse { .. }));
    assert!(encode(&Tensor::zeros(&[3, 2, 2]), Format::Pgm).unwrap_err().is_usage());
}

#[test]
fn datasets_are_deterministic_and_in_range() {
    let pts = ring(1000, 1.0, 0.05, &mut rng(2)).unwrap();
    assert!(pts.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let spec = DatasetSpec::Texture { pattern: TexturePattern::Stripes, size: 128, crop: 64 };
    let (a, b) = (make_dataset(&spec, 3).unwrap(), make_dataset(&spec, 3).unwrap());
    assert_eq!(a.item_shape[1..], [64, 64]);
    let (ba, bb) = (a.batch(5, &mut rng(4)), b.batch(5, &mut rng(4)));
    assert_eq!(ba, bb);
    assert_eq!(ba.shape()[2..], [64, 64]);
    assert!(ba.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn config_round_trip_is_identity() {
    for path in ["toy2d", "ring", "texture", "digits", "cascade"] {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../configs/{path}.toml"));
        let cfg = RunConfig::load(&p).unwrap();
        let text = cfg.to_toml();
        let again = RunConfig::from_toml(&text).unwrap();
        assert_eq!(again, cfg, "{path}");
        assert_eq!(again.to_toml(), text);
        assert_eq!(again.hash(), cfg.hash());
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(&["train.stages=2"]);
    let out = train_run(&cfg, dir.path(), None, &every_stage()).unwrap();
    let first = read(&out.checkpoint);
    let ck = checkpoint::load(&out.checkpoint, Some(&cfg.hash())).unwrap();
    assert_eq!(ck.state, out.state);
    let again = dir.path().join("again/copy.ckpt");
    checkpoint::save(&ck, &again).unwrap();
    let second = read(&again);
    // Only the embedded sidecar name differs; re-saving under the original
    // name reproduces the original bytes exactly.
    checkpoint::save(&ck, &out.checkpoint).unwrap();
    assert_eq!(read(&out.checkpoint), first);
    assert_eq!(read(&pool_path(&again)), read(&pool_path(&out.checkpoint)));
    assert_eq!(checkpoint::load(&again, None).unwrap(), ck);
    assert_eq!(second.len(), first.len() + "copy.ckpt.pool".len() - "cascade-1-stage-2.ckpt.pool".len());
}

fn load_err(path: &Path, expected: Option<&[u8; 32]>) -> LoadError {
    match checkpoint::load(path, expected).unwrap_err() {
        WinnError::CheckpointLoad(e) => e,
        e => panic!("unexpected error {e}"),
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(&["train.stages=1"]);
    let out = train_run(&cfg, dir.path(), None, &every_stage()).unwrap();
    let good = read(&out.checkpoint);
    let p = dir.path().join("checkpoints/bad.ckpt");
    fs::copy(pool_path(&out.checkpoint), pool_path(&p)).unwrap();
    // The embedded sidecar name points at the original pool file.
    let write = |bytes: &[u8]| fs::write(&p, bytes).unwrap();

    write(&good[..good.len() - 5]);
    assert!(matches!(load_err(&p, None), LoadError::Truncated { .. }));
    write(&good[..30]);
    assert!(matches!(load_err(&p, None), LoadError::Truncated { .. }));

    let mut longer = good.clone();
    longer.extend_from_slice(b"junk");
    write(&longer);
    assert_eq!(load_err(&p, None), LoadError::TrailingBytes(4));

    let mut flipped = good.clone();
    let mid = good.len() / 2;
    flipped[mid] ^= 0x40;
    write(&flipped);
    assert_eq!(load_err(&p, None), LoadError::Checksum);

    let mut tail = good.clone();
    let last = tail.len() - 1;
    tail[last] ^= 1;
    write(&tail);
    assert_eq!(load_err(&p, None), LoadError::Checksum);

    let mut version = good.clone();
    version[8..12].copy_from_slice(&2u32.to_le_bytes());
    write(&version);
    assert_eq!(load_err(&p, None), LoadError::Version { found: 2 });

    write(&good);
    let other = toy(&["train.stages=1", "seed=12"]);
    assert_eq!(load_err(&p, Some(&other.hash())), LoadError::ConfigHash);
    assert!(checkpoint::load(&p, Some(&cfg.hash())).is_ok());

    let mut pool = read(&pool_path(&out.checkpoint));
    pool[0] ^= 1;
    fs::write(pool_path(&out.checkpoint), pool).unwrap();
    assert!(matches!(load_err(&p, None), LoadError::PoolChecksum(_)));
}

#[test]
fn identical_runs_write_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = toy(&[]);
    train_run(&cfg, a.path(), None, &every_stage()).unwrap();
    train_run(&cfg, b.path(), None, &every_stage()).unwrap();
    for f in [METRICS_FILE, ROUNDS_FILE, "config.toml", "stage-4/samples.csv"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    assert_eq!(read(&checkpoint_path(a.path(), 1, 4)), read(&checkpoint_path(b.path(), 1, 4)));
    let rows = String::from_utf8(read(&a.path().join(METRICS_FILE))).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4 * 3);
    assert!(metrics::verify_manifest(a.path()).unwrap().is_empty());

    let other = tempfile::tempdir().unwrap();
    train_run(&toy(&["seed=12"]), other.path(), None, &every_stage()).unwrap();
    assert_ne!(read(&a.path().join(METRICS_FILE)), read(&other.path().join(METRICS_FILE)));
}

fn resume_matches(overrides: &[&str], stop: (usize, usize), last: (usize, usize)) {
    let cfg = toy(overrides);
    let (full, part) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_run(&cfg, full.path(), None, &every_stage()).unwrap();
    let stopped = train_run(
        &cfg,
        part.path(),
        None,
        &TrainOptions {
            stop_after: Some(stop),
            ..every_stage()
        },
    )
    .unwrap();
    assert!(stopped.stopped_early);
    assert_eq!(stopped.checkpoint, checkpoint_path(part.path(), stop.0, stop.1));
    let resumed = train_run(&cfg, part.path(), Some(&stopped.checkpoint), &every_stage()).unwrap();
    assert!(!resumed.stopped_early);
    for f in [METRICS_FILE, ROUNDS_FILE] {
        assert_eq!(read(&full.path().join(f)), read(&part.path().join(f)), "{f}");
    }
    assert_eq!(
        read(&checkpoint_path(full.path(), last.0, last.1)),
        read(&checkpoint_path(part.path(), last.0, last.1))
    );
    assert!(metrics::verify_manifest(part.path()).unwrap().is_empty());
}

#[test]
fn resume_matches_the_uninterrupted_run() {
    resume_matches(&[], (1, 2), (1, 4));
}

#[test]
fn resume_inside_a_later_cascade() {
    resume_matches(&["train.cascades=2", "train.stages=2"], (2, 1), (2, 2));
}

#[test]
fn resume_under_another_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(&["train.stages=2"]);
    let out = train_run(&cfg, dir.path(), None, &every_stage()).unwrap();
    let err = train_run(&toy(&["train.stages=3"]), dir.path(), Some(&out.checkpoint), &every_stage()).unwrap_err();
    assert!(err.is_usage(), "{err}");
}
