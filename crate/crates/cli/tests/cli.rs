use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use polsar_cli::commands::{
    classify_map_command, evaluate_command, preprocess, synth_command, train_command, CHECKPOINT_FILE, EPOCH_LOG_FILE,
};
use polsar_cli::config::RunConfig;
use polsar_mcnn::formats::Raster;
use polsar_mcnn::models::Variant;
use polsar_mcnn::polsar::{CubeForm, LabelMap, COHERENCY_PLANES};
use polsar_mcnn::synth::SynthSpec;
use tempfile::TempDir;

fn polsar(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polsar")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec { height: 40, width: 40, block: 10, ..SynthSpec::three_class(seed) }
}

/// Scene, amp_phase cube and a tiny training config inside a temp dir.
fn setup(variant: Variant) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    synth_command(&small_spec(2), &dir.path().join("scene")).unwrap();
    preprocess(&dir.path().join("scene/scene.ptc1"), CubeForm::AmpPhase, 3, &dir.path().join("cube")).unwrap();
    let cfg = format!(
        "schema = 1\nraster = cube/cube.ptc1\nlabels = scene/labels.plbl1\nvariant = {variant}\nwidths = 4,6,6\nfc_width = 16\n\
         growth = 2\nmultiplier = 2\nepochs = 2\nbatch_size = 16\nper_class = 20\neval_subsample = 40\nseed = 5\n"
    );
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, cfg).unwrap();
    (dir, path)
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> =
        std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn synth_files_parse_back_and_repeat_exactly() {
    let dir = TempDir::new().unwrap();
    for sub in ["a", "b"] {
        let o = polsar(&["synth", "--seed", "4", "--out", sub], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let labels = LabelMap::read(&dir.path().join("a/labels.plbl1")).unwrap();
    assert_eq!(labels.num_classes(), 3);
    assert_eq!((labels.height, labels.width), (128, 128));
    let raster = Raster::read(&dir.path().join("a/scene.ptc1")).unwrap();
    assert!(raster.is_scattering());
    for f in ["scene.ptc1", "labels.plbl1", "synth.txt"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn synth_rejects_an_invalid_spec() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.txt"), "schema = 1\nclass = only 1 1 1 0 0\n").unwrap();
    let o = polsar(&["synth", "--spec", "bad.txt", "--out", "x"], dir.path());
    assert_ne!(code(&o), 0);
    assert!(!dir.path().join("x").exists());
}

#[test]
fn preprocess_scattering_to_amp_phase_is_repeatable() {
    let dir = TempDir::new().unwrap();
    synth_command(&small_spec(1), &dir.path().join("s")).unwrap();
    for sub in ["p1", "p2"] {
        let o =
            polsar(&["preprocess", "--input", "s/scene.ptc1", "--form", "amp_phase", "--window", "3", "--out", sub], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let cube = Raster::read(&dir.path().join("p1/cube.ptc1")).unwrap();
    assert_eq!(cube.planes.len(), 9);
    assert_eq!(cube.plane_names(), CubeForm::AmpPhase.plane_names().map(String::from).to_vec());
    for f in ["cube.ptc1", "cube_stats.txt"] {
        assert_eq!(std::fs::read(dir.path().join("p1").join(f)).unwrap(), std::fs::read(dir.path().join("p2").join(f)).unwrap());
    }
}

#[test]
fn preprocess_reorders_coherency_planes_for_real_imag() {
    let dir = TempDir::new().unwrap();
    let planes: Vec<(String, Vec<f32>)> =
        COHERENCY_PLANES.iter().enumerate().rev().map(|(i, n)| (n.to_string(), vec![i as f32 + 0.5; 12])).collect();
    Raster { height: 3, width: 4, planes }.write(&dir.path().join("t.ptc1")).unwrap();
    let out = preprocess(&dir.path().join("t.ptc1"), CubeForm::RealImag, 1, &dir.path().join("o")).unwrap();
    let cube = Raster::read(&out.cube).unwrap();
    assert_eq!(cube.plane_names(), COHERENCY_PLANES.map(String::from).to_vec());
    for (i, (_, p)) in cube.planes.iter().enumerate() {
        assert!(p.iter().all(|&v| v == i as f32 + 0.5));
    }
}

#[test]
fn malformed_raster_is_a_data_error_with_offset() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("junk.ptc1"), b"PTC1\x02\x00").unwrap();
    let o = polsar(&["preprocess", "--input", "junk.ptc1", "--out", "o"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte"), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("o/cube.ptc1").exists());
}

#[test]
fn train_writes_log_checkpoint_and_config_copy() {
    let (dir, cfg) = setup(Variant::Mcnn);
    let o = polsar(&["--config", cfg.to_str().unwrap(), "train", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    assert_eq!(files_in(&run), ["checkpoint.pckpt", "config.txt", "epochs.csv"]);
    let log = std::fs::read_to_string(run.join(EPOCH_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1 + 2);
    assert!(log.starts_with("epoch,loss,train_oa,test_oa\n"));
    let copy = RunConfig::load(&run.join("config.txt")).unwrap();
    assert_eq!(copy.model.classes, 3);
    assert_eq!(copy.train.seed, 5);
}

#[test]
fn seed_flag_overrides_config() {
    let (dir, cfg) = setup(Variant::M1);
    let o = polsar(&["--config", cfg.to_str().unwrap(), "--seed", "77", "train", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(RunConfig::load(&dir.path().join("run/config.txt")).unwrap().train.seed, 77);
}

#[test]
fn training_twice_gives_identical_bytes() {
    let (dir, cfg) = setup(Variant::Dmcnn);
    let cfg = RunConfig::load(&cfg).unwrap();
    train_command(&cfg, &dir.path().join("r1")).unwrap();
    train_command(&cfg, &dir.path().join("r2")).unwrap();
    for f in [CHECKPOINT_FILE, EPOCH_LOG_FILE, "config.txt"] {
        assert!(
            std::fs::read(dir.path().join("r1").join(f)).unwrap() == std::fs::read(dir.path().join("r2").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn cnn_on_amp_phase_cube_fails_before_training() {
    let (dir, cfg) = setup(Variant::CnnV1);
    let o = polsar(&["--config", cfg.to_str().unwrap(), "train", "--out", "run"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("real_imag"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn nan_loss_exits_with_numerical_code() {
    let (dir, cfg) = setup(Variant::M4);
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text.push_str("lr = 1e38\nepochs = 6\n");
    std::fs::write(&cfg, text).unwrap();
    let o = polsar(&["--config", cfg.to_str().unwrap(), "train", "--out", "run"], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("run/checkpoint.pckpt").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&polsar(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&polsar(&["train"], dir.path())), 1);
    assert_eq!(code(&polsar(&["evaluate"], dir.path())), 1);
    std::fs::write(dir.path().join("c.cfg"), "schema = 9\n").unwrap();
    assert_eq!(code(&polsar(&["--config", "c.cfg", "train"], dir.path())), 1);
    assert_eq!(code(&polsar(&["--help"], dir.path())), 0);
}

#[test]
fn evaluate_reports_class_columns_and_repeats() {
    let (dir, cfg) = setup(Variant::Mcnn);
    train_command(&RunConfig::load(&cfg).unwrap(), &dir.path().join("run")).unwrap();
    let ckpt = dir.path().join("run").join(CHECKPOINT_FILE);
    let a = evaluate_command(&ckpt, None, None, &dir.path().join("e1")).unwrap();
    let b = evaluate_command(&ckpt, None, None, &dir.path().join("e2")).unwrap();
    assert_eq!(a.text, b.text);
    let header = a.text.lines().next().unwrap().split_whitespace().count();
    assert_eq!(header, 3 + 4);
    assert_eq!(a.report.samples, 40 * 40);
    let kv = std::fs::read_to_string(dir.path().join("e1/metrics.txt")).unwrap();
    for key in ["AA=", "OA=", "Kappa=", "F1=", "F1_macro=", "class3_accuracy="] {
        assert!(kv.contains(key), "{key}");
    }
}

#[test]
fn evaluate_rejects_class_count_mismatch() {
    let (dir, cfg) = setup(Variant::M3);
    train_command(&RunConfig::load(&cfg).unwrap(), &dir.path().join("run")).unwrap();
    let four = SynthSpec {
        classes: {
            let mut c = small_spec(2).classes;
            c.push(c[0].clone());
            c[3].name = "extra".into();
            c
        },
        ..small_spec(2)
    };
    synth_command(&four, &dir.path().join("four")).unwrap();
    let o =
        polsar(&["evaluate", "--checkpoint", "run/checkpoint.pckpt", "--labels", "four/labels.plbl1", "--out", "e"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("class-count mismatch"));
}

#[test]
fn classify_map_writes_png_and_label_map() {
    let (dir, cfg) = setup(Variant::Dmcnn);
    train_command(&RunConfig::load(&cfg).unwrap(), &dir.path().join("run")).unwrap();
    let ckpt = dir.path().join("run").join(CHECKPOINT_FILE);
    let res = classify_map_command(&ckpt, None, None, false, &dir.path().join("m")).unwrap();
    assert_eq!(LabelMap::read(&res.map_path).unwrap(), res.map);
    assert!(res.map.labels.iter().all(|&l| (1..=3).contains(&l)));
    let decoder = png::Decoder::new(std::fs::File::open(&res.png_path).unwrap());
    let reader = decoder.read_info().unwrap();
    assert_eq!((reader.info().width, reader.info().height), (40, 40));
}

#[test]
fn overlay_blacks_out_unlabeled_ground_truth() {
    let (dir, cfg) = setup(Variant::Mcnn);
    train_command(&RunConfig::load(&cfg).unwrap(), &dir.path().join("run")).unwrap();
    let mut gt = LabelMap::read(&dir.path().join("scene/labels.plbl1")).unwrap();
    for r in 0..10 {
        for c in 0..40 {
            gt.labels[r * 40 + c] = 0;
        }
    }
    gt.write(&dir.path().join("gt.plbl1")).unwrap();
    let o = polsar(
        &["classify-map", "--checkpoint", "run/checkpoint.pckpt", "--ground-truth", "gt.plbl1", "--overlay", "--out", "m"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let decoder = png::Decoder::new(std::fs::File::open(dir.path().join("m/map.png")).unwrap());
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size()];
    reader.next_frame(&mut buf).unwrap();
    for px in 0..40 * 40 {
        let rgb = &buf[px * 3..px * 3 + 3];
        assert_eq!(rgb == [0, 0, 0], px < 400, "pixel {px}");
    }
    let map = LabelMap::read(&dir.path().join("m/map.plbl1")).unwrap();
    assert!(map.labels.iter().all(|&l| l != 0));
}

#[test]
fn gradient_check_passes() {
    let dir = TempDir::new().unwrap();
    let o = polsar(&["gradient-check", "--out", "g"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(table.lines().count(), 1 + 27);
    assert!(!table.contains("FAIL"));
    assert!(dir.path().join("g/gradcheck.txt").exists());
}

#[test]
fn ablation_has_six_rows_and_m5_matches_mcnn() {
    let (dir, cfg) = setup(Variant::Mcnn);
    let o = polsar(&["--config", cfg.to_str().unwrap(), "ablate", "--out", "abl"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("abl/ablation.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0].split_whitespace().collect::<Vec<_>>(), ["variant", "AA", "OA", "Kappa", "F1", "F1_macro"]);
    for (line, name) in lines[1..].iter().zip(["M1", "M2", "M3", "M4", "M5", "M6"]) {
        let cells: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0], name);
    }
    let mcnn = RunConfig::load(&cfg).unwrap();
    let alone = train_command(&mcnn, &dir.path().join("mcnn")).unwrap();
    let ckpt = dir.path().join("mcnn").join(CHECKPOINT_FILE);
    let eval = evaluate_command(&ckpt, None, None, &dir.path().join("mcnn_eval")).unwrap();
    let m5 = std::fs::read_to_string(dir.path().join("abl/M5/metrics.txt")).unwrap();
    assert_eq!(eval.report.to_key_values(), m5);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(dir.path().join("abl/M5").join(CHECKPOINT_FILE)).unwrap());
    assert_eq!(alone.log.len(), 2);
}
