use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use harmonize::manifest::Manifest;
use harmonize::{run, Cli, VariantArg};
use proptest::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn tiny_config() -> Value {
    json!({
        "seed": 7,
        "model": {
            "height": 4, "width": 4, "latent_dim": 8, "context_dim": 8, "attention_dim": 8, "ff_dim": 16,
            "encoder_blocks": 1, "middle_blocks": 1, "decoder_blocks": 3
        },
        "prompt": [
            {"text": "a", "role": "article"},
            {"text": "<s>", "role": "subject"},
            {"text": "cat", "role": "class_name"},
            {"text": "in", "role": "regular"},
            {"text": "snow", "role": "regular"}
        ],
        "image": {"grid": [[0.1, 0.9, 0.2, 0.8], [0.3, 0.7, 0.4, 0.6], [0.5, 0.5, 0.6, 0.4], [0.7, 0.3, 0.8, 0.2]]},
        "visual_tokens": 2,
        "scheduler": {"steps": 6},
        "swap": {"start_step": 3}
    })
}

fn write_config(dir: &Path, config: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(config).unwrap()).unwrap();
    path
}

fn cli(config: PathBuf, out: PathBuf) -> Cli {
    Cli { config, out: Some(out), seed: None, variant: VariantArg::All, steps: None, validate_only: false }
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_harmonize"))
}

fn read_manifest(dir: &Path) -> Manifest {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn reruns_are_byte_identical_and_hashes_match() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&cli(config.clone(), a.clone()), None).unwrap();
    run(&cli(config, b.clone()), None).unwrap();
    let manifest = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(manifest, fs::read(b.join("manifest.json")).unwrap());

    let m = read_manifest(&a);
    assert_eq!(m.variants.len(), 4);
    assert!(m.files.iter().any(|f| f.path == "metrics.csv"));
    for f in &m.files {
        let bytes = fs::read(a.join(&f.path)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), f.sha256, "{}", f.path);
    }
    // swap steps 3..=6 for both dual variants, plus four final masks
    let masks = fs::read_dir(a.join("masks")).unwrap().count();
    assert_eq!(masks, 2 * 4 + 4);
}

#[test]
fn single_variant_emits_one_image_and_no_metrics() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("out");
    let mut c = cli(config, out.clone());
    c.variant = VariantArg::Baseline;
    run(&c, None).unwrap();
    let images: Vec<_> = fs::read_dir(out.join("images")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(images, ["baseline.pgm"]);
    assert!(!out.join("metrics.csv").exists());
    let m = read_manifest(&out);
    assert_eq!(m.images.len(), 1);
    assert_eq!(m.variants[0].label, "Baseline");
}

#[test]
fn overrides_are_echoed() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("out");
    let mut c = cli(config, out.clone());
    c.seed = Some(99);
    c.steps = Some(4);
    c.variant = VariantArg::Orchestration;
    run(&c, None).unwrap();
    let m = read_manifest(&out);
    assert_eq!((m.seed, m.config.seed, m.config.scheduler.steps), (99, 99, 4));
}

#[test]
fn environment_overrides_out_flag() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let (flag, env) = (tmp.path().join("flag"), tmp.path().join("env"));
    let status = binary()
        .args(["--variant", "baseline", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&flag)
        .env("HARMONIZE_OUT", &env)
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(env.join("manifest.json").exists());
    assert!(!flag.exists());
}

#[test]
fn validation_exit_codes_and_paths() {
    let tmp = TempDir::new().unwrap();
    let validate = |config: &Value| {
        let path = write_config(tmp.path(), config);
        let out = binary().arg("--validate-only").arg("--config").arg(path).output().unwrap();
        (out.status.code(), String::from_utf8_lossy(&out.stderr).into_owned())
    };

    assert_eq!(validate(&tiny_config()).0, Some(0));

    let mut c = tiny_config();
    c["mask"] = json!({"threshold": 1.5});
    let (code, err) = validate(&c);
    assert_eq!(code, Some(2));
    assert!(err.contains("mask.threshold"), "{err}");

    let mut c = tiny_config();
    c["swap"]["layers"] = json!([4, 5]);
    let (code, err) = validate(&c);
    assert_eq!(code, Some(2));
    assert!(err.contains("swap.layers: layer id 5 >= block count 5"), "{err}");

    let mut c = tiny_config();
    c["scheduler"]["warmup"] = json!(3);
    let (code, err) = validate(&c);
    assert_eq!(code, Some(2));
    assert!(err.contains("scheduler.warmup"), "{err}");

    let out = binary().args(["--validate-only", "--config"]).arg(tmp.path().join("missing.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_output_directory_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let out = binary().arg("--config").arg(config).env_remove("HARMONIZE_OUT").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("output_dir"));
}

#[test]
fn failed_write_removes_partial_outputs() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("out");
    fs::create_dir(&out).unwrap();
    // a plain file where the masks directory should go
    fs::write(out.join("masks"), b"").unwrap();
    let status = binary().arg("--config").arg(&config).arg("--out").arg(&out).output().unwrap();
    assert_eq!(status.status.code(), Some(1));
    let left: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, ["masks"]);
}

#[test]
fn sample_config_is_valid() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/ds_default.json");
    let out = binary().arg("--validate-only").arg("--config").arg(config).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn validate_accepts_exactly_what_run_accepts(
        threshold in -0.5f64..1.5,
        start in 0usize..9,
        layers in prop::collection::vec(0usize..7, 0..3),
        tokens in 0usize..5,
    ) {
        let tmp = TempDir::new().unwrap();
        let mut c = tiny_config();
        c["mask"] = json!({"threshold": threshold});
        c["swap"] = json!({"start_step": start, "layers": layers});
        c["visual_tokens"] = json!(tokens);
        c["scheduler"]["steps"] = json!(3);
        let config = write_config(tmp.path(), &c);
        let mut check = cli(config.clone(), tmp.path().join("out"));
        check.validate_only = true;
        let valid = run(&check, None).is_ok();
        let ran = run(&cli(config, tmp.path().join("out")), None);
        prop_assert_eq!(valid, ran.is_ok(), "{:?}", ran.err());
    }
}
