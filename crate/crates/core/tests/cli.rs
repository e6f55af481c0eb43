use std::fs;
use std::path::Path;
use std::process::Command;

use fedloc::experiment::{read_results, ExperimentConfig, NO_DATA};

const CONFIG: &str = r#"
name = "smoke"
problem = "quadratic"
algorithms = ["alg1_smooth", "alg4_subgrad", "one_pass_baseline"]
n_silos = 4
available = [4, 3]
n = [64, 128]
dim = 3
epsilons = [1.0, inf]
seeds = [0, 1]
multipliers = [0.5, 1.0]
inner_repeats = 2
"#;

fn fedloc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fedloc")).args(args).output().unwrap()
}

fn write_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let path = dir.join("smoke.toml");
    fs::write(&path, format!("{CONFIG}output_dir = {:?}\n", out.to_str().unwrap())).unwrap();
    path
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let cfg = write_config(tmp.path(), out);
        let o = fedloc(&["run", "--config", cfg.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ra = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(ra, fs::read(b.join("results.csv")).unwrap());
    assert!(a.join("timings.csv").exists());

    let rows = read_results(&a.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 3 * 2 * 2 * 2 * 2);
    for r in &rows {
        assert!(r.final_excess_risk.is_some_and(|v| v >= -1e-12));
        assert!(r.test_error.is_none());
        // Counters of one run equal the schedule's total rounds.
        assert_eq!(r.comm_rounds, r.scheduled_rounds, "{r:?}");
        assert!(r.grad_calls >= r.comm_rounds);
    }
}

#[test]
fn report_writes_summaries_and_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("res");
    let cfg = write_config(tmp.path(), &out);
    assert!(fedloc(&["run", "--config", cfg.to_str().unwrap()]).status.success());
    let rep = tmp.path().join("rep");
    let o = fedloc(&["report", "--input", out.join("results.csv").to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(rep.join("summary.csv")).unwrap();
    assert!(summary.starts_with("algorithm,epsilon,count,median,std"));
    assert!(summary.contains("alg1_smooth,inf,"));
    let plot = fs::read_to_string(rep.join("plot_alg4_subgrad.dat")).unwrap();
    assert_eq!(plot.lines().filter(|l| !l.starts_with('#')).count(), 2);
    assert!(fs::read_to_string(rep.join("slopes.csv")).unwrap().contains("alg1_smooth"));
}

#[test]
fn report_on_empty_results_emits_no_data_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str(CONFIG).unwrap();
    assert!(!cfg.cells().is_empty());
    let header = "algorithm,epsilon,delta,N,M,n,d,seed,multiplier,final_excess_risk,test_error,train_loss,comm_rounds,grad_calls,scheduled_rounds,theory_risk_ref,theory_comm_lb\n";
    let input = tmp.path().join("results.csv");
    fs::write(&input, header).unwrap();
    let rep = tmp.path().join("rep");
    let o = fedloc(&["report", "--input", input.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(rep.join("plot_empty.dat")).unwrap().trim(), NO_DATA);
}

#[test]
fn report_rejects_foreign_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("results.csv");
    fs::write(&input, "a,b\n1,2\n").unwrap();
    let o = fedloc(&["report", "--input", input.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn schedule_prints_phase_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tmp.path().join("unused"));
    let o = fedloc(&["schedule", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("# alg1_smooth N=4 M=3 n=128"));
    assert!(text.contains("# alg4_subgrad"));
}

#[test]
fn bad_configs_are_rejected() {
    for bad in [
        "name = \"x\"\nproblem = \"quadratic\"\nalgorithms = \"alg1_smooth\"\nn_silos = 4\nn = 64\nepsilons = 1.0\nseeds = 0\n",
        "name = \"x\"\nproblem = \"quadratic\"\nalgorithms = \"alg1_smooth\"\nn_silos = 4\nn = 64\ndim = 2\nepsilons = 1.0\nseeds = 0\ntypo = 1\n",
        "name = \"x\"\nproblem = \"quadratic\"\nalgorithms = \"alg1_smooth\"\nn_silos = 4\navailable = 5\nn = 64\ndim = 2\nepsilons = 1.0\nseeds = 0\n",
        "name = \"x\"\nproblem = \"quadratic\"\nalgorithms = \"alg1_smooth\"\nn_silos = 4\nn = 64\ndim = 2\nepsilons = -1.0\nseeds = 0\n",
    ] {
        assert!(ExperimentConfig::from_toml_str(bad).is_err(), "{bad}");
    }
}

#[test]
fn selftest_passes() {
    let o = fedloc(&["selftest"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}
