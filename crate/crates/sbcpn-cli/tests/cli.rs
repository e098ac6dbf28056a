//! End-to-end tests that drive the compiled binary the way a user would:
//! generate an instance, run a config, inspect the files it leaves behind.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sbcpn")
}

/// Fresh per-test directory under the system temp dir.
fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sbcpn-cli-{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("spawning the cli binary")
}

fn run_expect_success(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout:\n{}\nstderr:\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

/// Parses one column of a trial CSV (skipping the header) as f64.
fn csv_column(path: &Path, col: usize) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|line| line.split(',').nth(col).unwrap().parse::<f64>().unwrap())
        .collect()
}

fn dir_entries(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

const EXPECTED_HEADER: &str =
    "iter,time_s,phi,resid_norm,step_size,ls_trials,block_size,inner_iters,cert_norm,step_norm";

#[test]
fn students_t_run_outputs_complete_and_deterministic() {
    let dir = scratch("st-run");
    let inst = dir.join("inst.bin");
    run_expect_success(&[
        "gen-students-t",
        "--n",
        "64",
        "--seed",
        "7",
        "--out",
        inst.to_str().unwrap(),
    ]);

    let config = |out_dir: &str| {
        format!(
            r#"
[problem]
family = "students-t"
instance = "inst.bin"

[sampling]
strategy = "topk"
units = 16

[run]
trials = 2
seed_base = 5
output_dir = "{out_dir}"
timing = "none"
"#
        )
    };
    write(&dir.join("a.toml"), &config("out_a"));
    write(&dir.join("b.toml"), &config("out_b"));

    run_expect_success(&["run", dir.join("a.toml").to_str().unwrap()]);
    let out_a = dir.join("out_a");
    assert_eq!(
        dir_entries(&out_a),
        vec![
            "average.csv",
            "distance_to_reference.csv",
            "meta.txt",
            "trial_000.csv",
            "trial_001.csv"
        ]
    );

    let trial0 = out_a.join("trial_000.csv");
    let text = std::fs::read_to_string(&trial0).unwrap();
    assert_eq!(text.lines().next().unwrap(), EXPECTED_HEADER);

    // Accepted steps decrease the objective; zero-direction skips hold it.
    let phi0 = csv_column(&trial0, 2);
    assert!(phi0.len() >= 2);
    for w in phi0.windows(2) {
        assert!(w[1] <= w[0], "objective rose from {} to {}", w[0], w[1]);
    }

    // With timing = none the time column must be exactly zero.
    for t in csv_column(&trial0, 1) {
        assert_eq!(t, 0.0);
    }

    // average.csv holds the rowwise mean of the trial objectives.
    let phi1 = csv_column(&out_a.join("trial_001.csv"), 2);
    let avg = csv_column(&out_a.join("average.csv"), 2);
    let rows = phi0.len().min(phi1.len());
    assert_eq!(avg.len(), rows);
    for i in 0..rows {
        let mean = (phi0[i] + phi1[i]) / 2.0;
        assert!(
            (avg[i] - mean).abs() <= 1e-14 * mean.abs().max(1.0),
            "average row {i}: {} vs {mean}",
            avg[i]
        );
    }

    // The distance column tracks progress toward the high-accuracy anchor.
    let dist = csv_column(&out_a.join("distance_to_reference.csv"), 1);
    assert!(dist.len() >= 2);
    assert!(dist.last().unwrap() < dist.first().unwrap());

    // A second run from an identical config reproduces every byte.
    run_expect_success(&["run", dir.join("b.toml").to_str().unwrap()]);
    let out_b = dir.join("out_b");
    for name in dir_entries(&out_a) {
        let a = std::fs::read(out_a.join(&name)).unwrap();
        let b = std::fs::read(out_b.join(&name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn classification_families_consume_libsvm_data() {
    let dir = scratch("libsvm-run");
    // Ten features, twelve samples, one comment line. Positive samples load
    // the low coordinates, negatives the high ones.
    let data = "\
# toy classification set
+1 1:1.0 2:0.8 3:0.2
+1 1:0.9 3:0.7
+1 2:1.1 4:0.6
+1 1:0.4 2:0.5 5:0.9
+1 3:1.2 5:0.3
+1 1:0.7 4:1.0
-1 6:1.0 7:0.8 8:0.2
-1 6:0.9 8:0.7
-1 7:1.1 9:0.6
-1 6:0.4 7:0.5 10:0.9
-1 8:1.2 10:0.3
-1 6:0.7 9:1.0
";
    write(&dir.join("data.txt"), data);

    write(
        &dir.join("gm.toml"),
        r#"
[problem]
family = "geman-mcclure"
n = 10
data = "data.txt"
m_select = 10

[solver]
stop_tol = 1e-6
max_outer = 2000

[sampling]
strategy = "cyc-contig"
units = 4

[run]
output_dir = "gm_out"
timing = "none"
"#,
    );
    run_expect_success(&["run", dir.join("gm.toml").to_str().unwrap()]);
    let meta = std::fs::read_to_string(dir.join("gm_out/meta.txt")).unwrap();
    assert!(
        meta.contains("data = "),
        "meta.txt should echo the data file:\n{meta}"
    );
    assert!(
        meta.contains("m_select = 10 of 12"),
        "meta.txt should echo the subsample:\n{meta}"
    );
    assert!(
        meta.contains("status = Converged"),
        "trial should converge:\n{meta}"
    );

    write(
        &dir.join("bw.toml"),
        r#"
[problem]
family = "biweight-group"
n = 10
data = "data.txt"

[sampling]
strategy = "uniform"
units = 1

[run]
output_dir = "bw_out"
timing = "none"
"#,
    );
    run_expect_success(&["run", dir.join("bw.toml").to_str().unwrap()]);
    let meta = std::fs::read_to_string(dir.join("bw_out/meta.txt")).unwrap();
    assert!(
        meta.contains("status = Converged"),
        "trial should converge:\n{meta}"
    );
}

#[test]
fn check_subcommand_validates_a_config() {
    let dir = scratch("check");
    write(
        &dir.join("st.toml"),
        r#"
[problem]
family = "students-t"
n = 64
gen_seed = 3

[sampling]
strategy = "cyc-perm"
units = 16

[run]
timing = "none"
"#,
    );
    let stdout = run_expect_success(&["check", dir.join("st.toml").to_str().unwrap()]);
    assert!(
        stdout.contains("ok - gradient"),
        "missing gradient check line:\n{stdout}"
    );
    assert!(
        stdout.contains("ok - block residual"),
        "missing residual check line:\n{stdout}"
    );
    assert!(!stdout.contains("FAIL"), "a check failed:\n{stdout}");
}

#[test]
fn unconverged_run_exits_nonzero() {
    let dir = scratch("maxiter");
    write(
        &dir.join("st.toml"),
        r#"
[problem]
family = "students-t"
n = 64
gen_seed = 3

[solver]
max_outer = 1
stop_tol = 1e-12

[sampling]
strategy = "full"

[run]
output_dir = "out"
timing = "none"
"#,
    );
    let out = run(&["run", dir.join("st.toml").to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "one outer iteration cannot reach 1e-12"
    );
    // Outputs are still written so the failed run can be inspected.
    let meta = std::fs::read_to_string(dir.join("out/meta.txt")).unwrap();
    assert!(
        meta.contains("status = MaxIter"),
        "meta should record the stop reason:\n{meta}"
    );
}
