use std::path::Path;
use std::process::{Command, Output};

use hqnoise::edn::{write_checkpoint, EdnConfig, EdnModel};
use hqnoise::format::NoisePairFile;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hqnoise"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("HQNOISE_WORKERS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "{args:?}: {stderr}");
    stderr
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn collect_roundtrips_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&a, &["collect", "--seed", "1", "--count", "10"]);
    ok(&b, &["collect", "--seed", "1", "--count", "10"]);
    let bytes = std::fs::read(a.join("pairs.ednp")).unwrap();
    assert_eq!(bytes, std::fs::read(b.join("pairs.ednp")).unwrap());
    let file: NoisePairFile<f32> = NoisePairFile::from_bytes(&bytes).unwrap();
    assert_eq!(file.pairs.len(), 10);
    assert_eq!(file.pairs.iter().map(|p| p.seed).collect::<Vec<_>>(), (1..11).collect::<Vec<u64>>());
    assert_eq!(file.to_bytes().unwrap(), bytes);
}

#[test]
fn preset_is_echoed_in_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", "[collection]\npreset = \"sv3d\"\n");
    ok(dir.path(), &["collect", "--config", &cfg, "--count", "1"]);
    let log = std::fs::read_to_string(dir.path().join("collect.log")).unwrap();
    assert!(log.contains("preset sv3d: n=16, gamma1 triangular 6 -> 2.5, gamma2 0"), "{log}");
    assert!(log.contains("q=700.0007"), "{log}");
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = run(&blocker.join("sub"), &["collect", "--count", "1"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn filter_reports_rates_and_skips_unscored_records() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["collect", "--count", "3"]);
    let scores = write(dir.path(), "scores.csv", "seed,s_rd,s_hq\n0,0.5,0.3\n1,0.3,0.5\n");
    let stderr = ok(dir.path(), &["filter", "--scores", &scores]);
    assert!(stderr.contains("no score for seed 2"), "{stderr}");
    assert!(stderr.contains("1/2 retained (50.00%)"), "{stderr}");
    let kept: NoisePairFile<f64> = NoisePairFile::load(&dir.path().join("filtered.ednp")).unwrap();
    assert_eq!(kept.pairs.len(), 1);
    assert_eq!((kept.pairs[0].seed, kept.pairs[0].s_rd, kept.pairs[0].s_hq), (0, Some(0.5), Some(0.3)));

    let stderr = ok(dir.path(), &["filter", "--threshold", "10"]);
    assert!(stderr.contains("0/3 retained (0.00%)"), "{stderr}");
}

#[test]
fn negative_threshold_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", "[filter]\nthreshold = -0.1\n");
    assert_eq!(code(&run(dir.path(), &["filter", "--config", &cfg])), 2);
    let bad = write(dir.path(), "bad.toml", "[filter]\nthreshhold = 0.1\n");
    assert_eq!(code(&run(dir.path(), &["collect", "--config", &bad])), 2);
    assert_eq!(code(&run(dir.path(), &["collect", "--config", "missing.toml"])), 2);
}

#[test]
fn training_writes_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["collect", "--count", "1"]);
    let pairs = dir.path().join("pairs.ednp");
    let cfg = write(dir.path(), "run.toml", "[train]\nchannels = [8, 8, 16]\n");
    ok(dir.path(), &["train", "--config", &cfg, "--input", pairs.to_str().unwrap()]);
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "epoch,lr,mean_loss");
    assert_eq!(rows.len(), 601);
    assert!(rows[202].starts_with("201,0.00024,"), "{}", rows[202]);
    assert!(rows[401].starts_with("400,0.000192,"), "{}", rows[401]);
    assert!(dir.path().join("edn.ednm").is_file());
}

#[test]
fn empty_dataset_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["collect", "--count", "2"]);
    ok(dir.path(), &["filter", "--threshold", "10"]);
    assert_eq!(code(&run(dir.path(), &["train"])), 2);
}

#[test]
fn zero_checkpoint_reproduces_standard_inference() {
    let dir = tempfile::tempdir().unwrap();
    let mut zero = EdnModel::<f64>::zeros(EdnConfig::micro(16, 16)).unwrap();
    let ckpt = dir.path().join("zero.ednm");
    std::fs::write(&ckpt, write_checkpoint(&mut zero, Vec::new()).unwrap()).unwrap();
    let ckpt = ckpt.to_str().unwrap();
    ok(dir.path(), &["infer", "--seed", "5", "--count", "3"]);
    ok(dir.path(), &["infer", "--seed", "5", "--count", "3", "--mode", "with-edn", "--checkpoint", ckpt]);
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("metrics_standard.csv"), read("metrics_with-edn.csv"));
    assert_eq!(read("latents_standard.ednl"), read("latents_with-edn.ednl"));
    let csv = String::from_utf8(read("metrics_standard.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("seed,view,psnr,ssim,proxy"));
    assert_eq!(csv.lines().count(), 1 + 3 * 4);

    let again = tempfile::tempdir().unwrap();
    ok(again.path(), &["infer", "--seed", "5", "--count", "3"]);
    assert_eq!(std::fs::read(again.path().join("metrics_standard.csv")).unwrap(), read("metrics_standard.csv"));
}

#[test]
fn checkpoint_mode_mismatch_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write(dir.path(), "x.ednm", "");
    assert_eq!(code(&run(dir.path(), &["infer", "--mode", "standard", "--checkpoint", &ckpt])), 2);
    assert_eq!(code(&run(dir.path(), &["infer", "--mode", "with-edn"])), 2);
    assert_eq!(code(&run(dir.path(), &["infer", "--mode", "sideways"])), 2);
    let corrupt = run(dir.path(), &["infer", "--mode", "with-edn", "--checkpoint", &ckpt]);
    assert_eq!(code(&corrupt), 3);
}

#[test]
fn verify_passes_and_catches_a_coefficient_bug() {
    let dir = tempfile::tempdir().unwrap();
    let good = run(dir.path(), &["verify"]);
    assert_eq!(code(&good), 0, "{}", String::from_utf8_lossy(&good.stderr));
    let report = std::fs::read_to_string(dir.path().join("verify.txt")).unwrap();
    assert!(report.contains("epsilon") && report.contains("v_prediction"), "{report}");
    assert!(report.contains("overall: PASS"));

    let bad = run(dir.path(), &["verify", "--coefficient-scale", "1.001"]);
    assert_eq!(code(&bad), 4);
    let report = std::fs::read_to_string(dir.path().join("verify.txt")).unwrap();
    assert!(report.contains("overall: FAIL"), "{report}");
    assert!(report.contains("max"), "{report}");
}

#[test]
fn worker_env_override_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hqnoise"))
        .args(["collect", "--count", "1", "--out"])
        .arg(dir.path())
        .env("HQNOISE_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
