use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/samuelson.json")
}

fn mjls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mjls"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not json ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn fixture_value() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixture()).unwrap()).unwrap()
}

fn write(dir: &tempfile::TempDir, name: &str, value: &Value) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, serde_json::to_string(value).unwrap()).unwrap();
    path
}

fn scalar_problem(a: &[f64], vertices: Value) -> Value {
    let modes: Vec<Value> = a
        .iter()
        .map(|&ai| json!({ "A": [[ai]], "B": [[1.0]], "C": [[1.0], [0.0]], "D": [[0.0], [1.0]] }))
        .collect();
    json!({
        "n_modes": a.len(),
        "dims": { "nx": 1, "nu": 1, "nz": 2 },
        "modes": modes,
        "tpm_vertices": vertices,
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn validate_accepts_fixture() {
    let out = mjls(&["validate", p(&fixture())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = mjls(&["validate", p(&fixture()), "--json"]);
    let v = stdout_json(&out);
    assert_eq!(v["valid"], json!(true));
    assert_eq!(v["vertices"], json!(4));
}

#[test]
fn validate_reports_bad_row_sum() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = fixture_value();
    v["tpm_vertices"][1][2] = json!([0.5, 0.3, 0.1]);
    let path = write(&dir, "bad.json", &v);
    let out = mjls(&["validate", p(&path)]);
    assert_eq!(code(&out), 1);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("vertex 2, row 3"), "{text}");
}

#[test]
fn missing_or_malformed_file_is_a_parse_error() {
    assert_eq!(code(&mjls(&["validate", "/nonexistent/problem.json"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, "{ \"n_modes\": 3, ").unwrap();
    let out = mjls(&["validate", p(&path)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
}

#[test]
fn invalid_flags_are_usage_errors() {
    let f = fixture();
    assert_eq!(code(&mjls(&["finite", p(&f), "-T", "0"])), 2);
    assert_eq!(code(&mjls(&["finite", p(&f), "-T", "3", "--tol", "-1"])), 2);
    assert_eq!(code(&mjls(&["finite", p(&f), "-T", "3", "--x0", "1,1", "--theta0", "1", "--p0", "1,0,0"])), 2);
    assert_eq!(code(&mjls(&["finite", p(&f), "-T", "3", "--x0", "1,1,1", "--theta0", "1"])), 2);
    assert_eq!(code(&mjls(&["finite", p(&f), "-T", "3", "--x0", "1,1", "--theta0", "4"])), 2);
    assert_eq!(code(&mjls(&["simulate", p(&f), "-T", "3", "--adversary", "vertex:0"])), 2);
}

#[test]
fn stability_of_fixture_is_unstable() {
    let out = mjls(&["stability", p(&fixture()), "--json"]);
    assert_eq!(code(&out), 1);
    let v = stdout_json(&out);
    assert_eq!(v["verdict"], json!("unstable"));
    let radii = v["vertex_radii"].as_array().unwrap();
    assert_eq!(radii.len(), 4);
    assert!((radii[3].as_f64().unwrap() - 38.910).abs() < 1e-3);
}

#[test]
fn stability_of_contracting_scalar_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(&dir, "s.json", &scalar_problem(&[0.5], json!([[[1.0]]])));
    let out = mjls(&["stability", p(&path)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn shallow_search_can_be_undecided() {
    let dir = tempfile::tempdir().unwrap();
    let vertices = json!([
        [[0.08, 0.92], [0.07, 0.93]],
        [[0.85, 0.15], [0.64, 0.36]]
    ]);
    let path = write(&dir, "u.json", &scalar_problem(&[1.0114, 0.8422], vertices));
    let out = mjls(&["stability", p(&path), "--jsr-depth", "1", "--jsr-gap", "1e-12"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn infinite_reports_published_cost() {
    let out = mjls(&["infinite", p(&fixture()), "--x0", "1,1", "--theta0", "1", "--json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let cost = v["cost"]["value"].as_f64().unwrap();
    assert!((cost - 495.715).abs() <= 1e-3 * 495.715, "{cost}");
    assert_eq!(v["selected_vertex"], json!(3));
    let sources: Vec<i64> = v["branches"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["vertex"].as_i64().unwrap())
        .collect();
    assert!(sources.contains(&3) && sources.contains(&4), "{sources:?}");
}

#[test]
fn finite_reports_published_cost() {
    let out = mjls(&["finite", p(&fixture()), "-T", "8", "--x0", "1,1", "--theta0", "3", "--json"]);
    assert_eq!(code(&out), 0);
    let cost = stdout_json(&out)["cost"]["value"].as_f64().unwrap();
    assert!((cost - 591.344).abs() <= 1e-3 * 591.344, "{cost}");
}

#[test]
fn human_and_json_carry_the_same_numbers() {
    let f = fixture();
    let args = ["finite", p(&f), "-T", "5", "--x0", "1,1", "--theta0", "2"];
    let human = mjls(&args);
    let mut with_json = args.to_vec();
    with_json.push("--json");
    let json_cost = stdout_json(&mjls(&with_json))["cost"]["value"].as_f64().unwrap();
    let text = String::from_utf8_lossy(&human.stdout);
    let line = text.lines().find(|l| l.starts_with("cost J = ")).unwrap();
    let printed: f64 = line["cost J = ".len()..].split(' ').next().unwrap().parse().unwrap();
    assert_eq!(printed.to_bits(), json_cost.to_bits());
}

#[test]
fn finite_budget_exceeded_is_a_solver_failure() {
    let out = mjls(&["finite", p(&fixture()), "-T", "8", "--budget", "10"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn out_file_matches_stdout_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let out = mjls(&["stability", p(&fixture()), "--json", "--out", p(&path)]);
    let file: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(file, stdout_json(&out));
}

#[test]
fn simulate_from_controller_file() {
    let dir = tempfile::tempdir().unwrap();
    let ctl = dir.path().join("ctl.json");
    assert_eq!(code(&mjls(&["infinite", p(&fixture()), "--out", p(&ctl)])), 0);
    let csv = dir.path().join("run.csv");
    let out = mjls(&[
        "simulate", p(&fixture()), "-T", "20", "--controller", p(&ctl), "--seed", "3", "--out", p(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("k,theta,vertex,"));
    assert_eq!(text.lines().count(), 22);
}

#[test]
fn simulate_rejects_uncertified_controller() {
    let dir = tempfile::tempdir().unwrap();
    let ctl = dir.path().join("ctl.json");
    assert_eq!(code(&mjls(&["infinite", p(&fixture()), "--out", p(&ctl)])), 0);
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&ctl).unwrap()).unwrap();
    v["branches"][0]["certificate"]["upper"] = json!(1.5);
    v["certified"] = json!(false);
    let bad = write(&dir, "bad.json", &v);
    let out = mjls(&["simulate", p(&fixture()), "-T", "5", "--controller", p(&bad)]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_is_reproducible_per_seed() {
    let run = |seed: &str| {
        let out = mjls(&[
            "simulate", p(&fixture()), "-T", "30", "--adversary", "mixture", "--seed", seed, "--json",
        ]);
        assert_eq!(code(&out), 0);
        stdout_json(&out)
    };
    assert_eq!(run("11"), run("11"));
    assert_ne!(run("11"), run("12"));
}

#[test]
fn monte_carlo_summary() {
    let out = mjls(&[
        "simulate", p(&fixture()), "-T", "8", "--runs", "200", "--adversary", "vertex:2", "--json",
    ]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert_eq!(v["summary"]["n_runs"], json!(200));
    assert!(v["summary"]["mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn reproduce_example_flags_failing_cells() {
    let out = mjls(&["reproduce-example", "--json"]);
    let v = stdout_json(&out);
    let cells = v["cells"].as_array().unwrap();
    let pass = cells.iter().all(|c| c["pass"] == json!(true));
    assert_eq!(v["pass"], json!(pass));
    assert_eq!(code(&out), if pass { 0 } else { 4 });
    let cell = |q: &str| {
        cells
            .iter()
            .find(|c| c["case"] == json!("4-vertex") && c["quantity"] == json!(q))
            .unwrap_or_else(|| panic!("cell {q}"))
    };
    assert_eq!(cell("P3 K_2[1]")["pass"], json!(true));
    assert_eq!(cell("J_inf(theta=2) selected vertex")["pass"], json!(true));

    let strict = mjls(&["reproduce-example", "--tol", "1e-9", "--json"]);
    assert_eq!(code(&strict), 4);
    let v = stdout_json(&strict);
    let gain_fail = v["cells"]
        .as_array()
        .unwrap()
        .iter()
        .any(|c| c["quantity"] == json!("P3 K_2[1]") && c["pass"] == json!(false));
    assert!(gain_fail);
}
