use graze_cli::config::{Experiment, ExperimentConfig};
use graze_cli::ConstantsReport;
use std::path::Path;
use std::process::{Command, Output};

fn graze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graze")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn classify_on_the_ball_has_no_concave_grazes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "domain_name = \"ball\"\n[classify]\nsamples = 100\n");
    let out = tmp.path().join("out");
    let o = graze(&["classify", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out, "classify.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "x1,x2,x3,v1,v2,v3,kind,t_b_fwd,t_b_bwd,n_dot_v");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| !r.contains("graze_singular")));
    assert!(rows.iter().any(|r| r.contains("graze_convex")));

    let manifest: serde_json::Value = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    let files = manifest["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"classify.csv") && names.contains(&"config.json"));
    for f in files {
        let bytes = std::fs::read(out.join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), graze_cli::output::sha256_hex(&bytes));
    }
}

#[test]
fn peanut_classification_finds_the_witness_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = graze(&["classify", "--out", out.to_str().unwrap(), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(read(&out, "classify.csv").contains("graze_singular"));
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    let cfg = write_config(tmp.path(), "domain_name = \"ball\"\nsede = 3\n");
    assert_eq!(graze(&["classify", "--config", &cfg, "--out", out]).status.code(), Some(1));
    let cfg = write_config(tmp.path(), "[solver]\ntime_nodez = 3\n");
    assert_eq!(graze(&["classify", "--config", &cfg, "--out", out]).status.code(), Some(1));
    let cfg = write_config(tmp.path(), "domain_name = \"torus\"\n");
    assert_eq!(graze(&["classify", "--config", &cfg, "--out", out]).status.code(), Some(1));
    assert_eq!(graze(&["classify", "--experiment", "cycle", "--out", out]).status.code(), Some(1));
    assert_eq!(graze(&["run", "--experiment", "nothing", "--out", out]).status.code(), Some(1));
    assert!(!Path::new(out).exists());
}

#[test]
fn experiment_names_round_trip() {
    for e in Experiment::ALL {
        assert_eq!(e.as_str().parse::<Experiment>().unwrap(), e);
    }
    assert_eq!("continuity-scan".parse::<Experiment>().unwrap(), Experiment::ContinuityScan);
    let cfg = ExperimentConfig::from_toml("experiment = \"exit_time\"\n").unwrap();
    assert_eq!(cfg.experiment, Experiment::ExitTime);
    assert!(ExperimentConfig::from_toml("experiment = \"exit-time\"\n").is_err());
}

#[test]
fn cycle_on_the_ball_chord() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "domain_name = \"ball\"\nexperiment = \"cycle\"\n[cycle]\nt = 3.5\n");
    let out = tmp.path().join("out");
    let o = graze(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = read(&out, "cycle.csv");
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "k,t_k,x1,x2,x3,v1,v2,v3");
    assert_eq!(rows[1], "0,3.5,0.0,0.0,0.0,1.0,0.0,0.0");
    assert_eq!(rows[2], "1,2.5,-1.0,0.0,0.0,-1.0,-0.0,-0.0");
    assert_eq!(rows.len(), 1 + 4);
}

#[test]
fn exit_time_reports_the_witness_probes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = graze(&["exit-time", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&read(&out, "exit_time_probes.json")).unwrap();
    assert_eq!(r["singular"]["pass"], true);
    assert_eq!(r["inflection_in"]["pass"], true);
}

#[test]
fn solve_reads_a_query_file() {
    let tmp = tempfile::tempdir().unwrap();
    let q = tmp.path().join("q.csv");
    std::fs::write(&q, "t,x1,x2,x3,v1,v2,v3\n0,0.1,0,0,1,0,0\n0.2,0,0.1,0,0.5,0.5,0\n").unwrap();
    let cfg = write_config(
        tmp.path(),
        "domain_name = \"ball\"\n[solver]\ncollisions = \"free\"\n[data.initial]\nkind = \"equilibrium\"\namplitude = 1.0\n[data.initial.profile]\nkind = \"constant\"\n[data.inflow]\nkind = \"maxwellian\"\namplitude = 1.0\n[data.inflow.profile]\nkind = \"constant\"\n",
    );
    let out = tmp.path().join("out");
    let o = graze(&["solve", "--config", &cfg, "--queries", q.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out, "solve.csv");
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    // free transport of the global equilibrium keeps h = w√μ
    let w = graze::collision_ops::WeightSet::default();
    let v = graze::Vec3::new(1.0, 0.0, 0.0);
    let expect = 1.0 / w.w_tilde(&v);
    assert!((rows[0][7].parse::<f64>().unwrap() - expect).abs() < 1e-12);
    assert_eq!(rows[0][8], "ok");
}

#[test]
fn formation_reports_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let consts = ConstantsReport {
        C_nu: 1.6,
        C_k: 5.9,
        C_Gamma: 0.47,
        C_w: 5.9,
        C_beta_tilde: 0.68,
        C_prime: 1.0,
        fit_ranges: graze_cli::FitRanges {
            domain: "peanut".into(),
            v_max: 8.0,
            speed_samples: 17,
            rho_values: vec![0.5, 1.0, 2.0, 4.0, 1.0],
            c_prime_queries: 40,
            c_prime_t_max: 0.5,
        },
        node_counts: graze::mild_solver::SolverConfig::coarse().vel_quad,
    };
    let cpath = tmp.path().join("constants.json");
    std::fs::write(&cpath, serde_json::to_vec(&consts).unwrap()).unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("domain_name = \"peanut\"\nbc = \"inflow\"\n[constants]\nfile = {:?}\n", cpath.to_str().unwrap()),
    );
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let oa = graze(&["formation", "--config", &cfg, "--seed", "5", "--out", a.to_str().unwrap()]);
    let ob = graze(&["formation", "--config", &cfg, "--seed", "5", "--jobs", "1", "--out", b.to_str().unwrap()]);
    assert_eq!(oa.status.code(), Some(0), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(ob.status.code(), Some(0));
    let manifest = read(&a, "manifest.json");
    assert_eq!(manifest, read(&b, "manifest.json"));
    let m: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    for f in m["files"].as_array().unwrap() {
        let name = f["name"].as_str().unwrap();
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert!(m["constants_sha256"].is_string());
    let report: serde_json::Value = serde_json::from_str(&read(&a, "formation.json")).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(read(&a, "formation.csv").lines().next().unwrap(), "t,jump,uncertainty");
}

#[test]
fn constants_fit_writes_the_named_constants() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "[constants]\nqueries = 8\n");
    let o = graze(&["constants-fit", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&read(&out, "constants.json")).unwrap();
    for key in ["C_nu", "C_k", "C_Gamma", "C_w", "C_beta_tilde"] {
        assert!(v[key].as_f64().unwrap() > 0.0, "{key}");
    }
    assert!(v["fit_ranges"].is_object() && v["node_counts"].is_object());
    // the file loads back as a constants source
    let back: ConstantsReport = serde_json::from_value(v).unwrap();
    assert!(back.C_prime >= 1.0);
}
