use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("refgaze-exit-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn refgaze(dir: &PathBuf, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refgaze")).arg("--out").arg(dir.join("out")).args(args).output().unwrap()
}

fn synth(dir: &PathBuf) -> String {
    let cfg = dir.join("synth.json");
    fs::write(&cfg, r#"{"n_records": 2}"#).unwrap();
    let out = refgaze(dir, &["--config", cfg.to_str().unwrap(), "synth"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("out/corpus.jsonl").to_string_lossy().into_owned()
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let dir = scratch("config");
    let cfg = dir.join("bad.json");
    fs::write(&cfg, r#"{"n_records": 2, "colour": 1}"#).unwrap();
    let out = refgaze(&dir, &["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_corpus_is_a_data_error() {
    let dir = scratch("data");
    let corpus = dir.join("corpus.jsonl");
    fs::write(&corpus, "{\"trial_id\": 1}\n").unwrap();
    let out = refgaze(&dir, &["eval", "--corpus", corpus.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let missing = dir.join("missing.jsonl");
    let out = refgaze(&dir, &["eval", "--corpus", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn failed_gradcheck_is_a_numeric_error() {
    let dir = scratch("numeric");
    let corpus = synth(&dir);
    let cfg = dir.join("grad.json");
    let model = r#"{"d": 8, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1, "d_ff": 8, "d_lang_stub": 4, "d_vis_stub": 4}"#;
    fs::write(&cfg, format!(r#"{{"model": {model}, "tolerance": 1e-30}}"#)).unwrap();
    let out = refgaze(&dir, &["--config", cfg.to_str().unwrap(), "gradcheck", "--corpus", &corpus]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("out/gradcheck.json").exists());
}
