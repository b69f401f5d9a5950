use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn selfreeze(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selfreeze"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &str = r#"
run_id = "c"
[data]
general_size = 300
domain_size = 200
choice_items = 40
[general]
epochs = 1
[domain]
epochs = 1
strategy = "selective"
[output]
dir = "out"
"#;

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn config_errors_exit_2_and_list_every_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "bad.toml", "[domain]\nstrategy = \"full\"\nlr = -1\n[importance]\nrho = 1.3\n[data]\nskew = 2.0\n");
    let out = selfreeze(&["validate", "--config", "bad.toml"], d);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    for key in ["domain.lr", "importance.rho", "data.skew"] {
        assert!(err.contains(key), "{err}");
    }

    write(d, "unknown.toml", "[domain]\nstrategy = \"nope\"\n");
    assert_eq!(code(&selfreeze(&["validate", "-c", "unknown.toml"], d)), 2);
    write(d, "missing.toml", "run_id = \"x\"\n");
    assert_eq!(code(&selfreeze(&["validate", "-c", "missing.toml"], d)), 2);
    assert_eq!(code(&selfreeze(&["validate", "-c", "absent.toml"], d)), 2);
}

#[test]
fn validate_echoes_a_normalised_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "c.toml", SMALL);
    let out = selfreeze(&["validate", "-c", "c.toml"], d);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("rho = 0.1"), "{text}");
    write(d, "echo.toml", &text);
    let again = selfreeze(&["validate", "-c", "echo.toml"], d);
    assert_eq!(stdout(&again), text);
}

#[test]
fn stepwise_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "c.toml", SMALL);
    let ok = |args: &[&str]| {
        let out = selfreeze(args, d);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        stdout(&out)
    };
    ok(&["gen-data", "-c", "c.toml", "--out", "data"]);
    for f in selfreeze::config::DATA_FILES {
        assert!(d.join("data").join(f).is_file(), "{f}");
    }
    ok(&["train-general", "-c", "c.toml"]);
    ok(&["estimate-importance", "-c", "c.toml", "--checkpoint", "out/general.ckpt", "--out", "imp.ckpt", "--estimator", "fisher"]);
    assert!(d.join("imp.summary.json").is_file());
    assert!(d.join("imp.scores.csv").is_file());
    let part = ok(&["partition", "--checkpoint", "imp.ckpt", "--rho", "0.25", "--out", "mask.ckpt"]);
    assert!(part.contains("core "), "{part}");
    let ft = ok(&["finetune", "-c", "c.toml", "--general", "out/general.ckpt"]);
    assert!(ft.contains("delta_general_ppl"), "{ft}");
    let eval = ok(&["eval", "-c", "c.toml", "--checkpoint", "out/final.ckpt"]);
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert!(v["domain"]["ppl"].as_f64().unwrap() > 1.0);
    let cost = ok(&["cost", "-c", "c.toml", "--samples", "10", "--out", "cost"]);
    assert!(cost.contains("grad_ms"), "{cost}");
    assert!(d.join("cost/cost.json").is_file());
}

#[test]
fn data_and_checkpoint_errors_have_their_own_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "c.toml", SMALL);
    assert_eq!(code(&selfreeze(&["cost", "-c", "c.toml", "--samples", "0"], d)), 3);

    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = selfreeze(&["eval", "-c", "c.toml", "--checkpoint", "junk.ckpt"], d);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
    assert_eq!(code(&selfreeze(&["eval", "-c", "c.toml", "--checkpoint", "none.ckpt"], d)), 5);

    // a corpus with a symbol outside the model's 16-token vocabulary
    write(d, "c.toml", SMALL);
    assert_eq!(code(&selfreeze(&["gen-data", "-c", "c.toml", "--out", "data"], d)), 0);
    let vocab: String = ('a'..='u').map(|c| format!("{c}\n")).collect();
    write(&d.join("data"), "general.train.txt.vocab", &vocab);
    write(d, "dir.toml", &SMALL.replace("[data]", "[data]\ndir = \"data\""));
    let out = selfreeze(&["pipeline", "-c", "dir.toml"], d);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn divergence_exits_4_with_stage_and_step() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "c.toml", &SMALL.replace("[general]", "[general]\nlr = 1e300\noptimizer = \"sgd\""));
    let out = selfreeze(&["pipeline", "-c", "c.toml"], d);
    assert_eq!(code(&out), 4);
    let err = stderr(&out);
    assert!(err.contains("stage general") && err.contains("step"), "{err}");
}

#[test]
fn help_documents_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let out = selfreeze(&["--help"], tmp.path());
    let text = stdout(&out);
    for key in ["domain.strategy", "selective_mode", "record_timing", "Exit codes"] {
        assert!(text.contains(key), "{key}");
    }
}
