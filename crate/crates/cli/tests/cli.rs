use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("qep-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn qep(args: &[&str], env_dir: Option<&PathBuf>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qep"));
    cmd.args(args).env_remove("QEP_OUTPUT_DIR");
    if let Some(d) = env_dir {
        cmd.env("QEP_OUTPUT_DIR", d);
    }
    cmd.output().unwrap()
}

#[test]
fn env_sets_default_output_dir() {
    let dir = scratch("env");
    let out = qep(&["sample-prior", "--n", "20", "--draws", "2"], Some(&dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("ts_step_qep_1_0.prior.csv").exists());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn flags_override_config_file() {
    let dir = scratch("precedence");
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, "# small run\nprior = gp\nn = 20\nseed = 4\ndraws = 2\n").unwrap();
    let out = qep(
        &["sample-prior", "-c", cfg.to_str().unwrap(), "--set", "seed=5", "--prior", "besov", "-o", dir.to_str().unwrap()],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // prior from the flag, seed from --set, both over the file
    assert!(dir.join("ts_step_besov_1_5.prior.csv").exists());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn errors_are_reported_without_partial_output() {
    let dir = scratch("errors");
    let out = qep(&["deblur", "--experiment", "ts_step", "-o", dir.to_str().unwrap()], None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error["));
    assert_eq!(fs::read_dir(&dir).unwrap().count(), 0);

    let out = qep(&["fit-map", "--set", "no_such_key=1", "-o", dir.to_str().unwrap()], None);
    assert!(!out.status.success());
    let out = qep(&["fit-map", "--q", "-1", "-o", dir.to_str().unwrap()], None);
    assert!(!out.status.success());
    fs::remove_dir_all(&dir).unwrap();
}
