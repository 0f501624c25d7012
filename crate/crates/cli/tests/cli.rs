use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drmiss::sim::{generate_with_oracle, DgpParams};

fn drmiss() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_drmiss"));
    cmd.env_remove("DRMISS_SEED");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(out.status.success(), "failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(name)
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Rows of a CSV keyed by the values of `key_cols`.
fn csv_rows(path: &Path, key_cols: &[&str]) -> HashMap<Vec<String>, HashMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let row: HashMap<String, String> = headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect();
        out.insert(key_cols.iter().map(|k| row[*k].clone()).collect(), row);
    }
    out
}

fn num(row: &HashMap<String, String>, col: &str) -> f64 {
    row[col].parse().unwrap_or_else(|_| panic!("column {col} = `{}`", row[col]))
}

#[test]
fn complete_data_collapses_dr_onto_full() {
    let dir = tempfile::tempdir().unwrap();
    let (_, full) = generate_with_oracle(&DgpParams::scenario1(), 800, 17);
    let input = dir.path().join("complete.csv");
    full.write_csv(std::fs::File::create(&input).unwrap()).unwrap();
    ok(drmiss().args(["estimate", "--estimators", "full,dr", "--out"]).arg(dir.path().join("out")).arg("--input").arg(&input));
    let rows = csv_rows(&dir.path().join("out/estimates.csv"), &["estimator"]);
    let (dr, fl) = (&rows[&vec!["DR".to_string()]], &rows[&vec!["Full".to_string()]]);
    assert_eq!(dr["status"], "ok");
    assert!((num(dr, "psi_hat") - num(fl, "psi_hat")).abs() <= 1e-10);
}

#[test]
fn exported_replicate_reproduces_simulated_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "n = 600\nreplicates = 3\nm_imputations = 8\nestimators = [\"dr\", \"naive\", \"cc\", \"ipcw\", \"mcdlm\", \"full\"]\n\
         [[scenario]]\npreset = \"a\"\n[[scenario]]\npreset = \"f\"\n",
    );
    let sim = dir.path().join("sim");
    ok(drmiss().arg("simulate").arg("--config").arg(&cfg).arg("--out").arg(&sim).args(["--export-replicate", "2"]));
    let results = csv_rows(&sim.join("results.csv"), &["scenario", "replicate", "estimator"]);
    for scenario in ["a", "f"] {
        let stem = format!("replicate_{scenario}_2");
        let est = dir.path().join(format!("est_{scenario}"));
        ok(drmiss()
            .args(["estimate", "--estimators", "dr,naive,cc,ipcw,mcdlm,full"])
            .arg("--input")
            .arg(sim.join(format!("{stem}.csv")))
            .arg("--oracle")
            .arg(sim.join(format!("{stem}_full.csv")))
            .arg("--seed-file")
            .arg(sim.join(format!("{stem}.seed")))
            .arg("--out")
            .arg(&est));
        let estimates = csv_rows(&est.join("estimates.csv"), &["estimator"]);
        assert_eq!(estimates.len(), 6);
        for (key, row) in &estimates {
            let sim_row = &results[&vec![scenario.to_string(), "2".to_string(), key[0].clone()]];
            for col in ["psi_hat", "theta_hat", "att_hat"] {
                assert!((num(row, col) - num(sim_row, col)).abs() <= 1e-10, "{scenario} {key:?} {col}");
            }
            if key[0] == "DR" {
                assert!((num(row, "sandwich_se") - num(sim_row, "se")).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn simulate_is_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n = 400\nreplicates = 6\nm_imputations = 5\n[[scenario]]\npreset = \"a\"\n");
    let outputs: Vec<PathBuf> = ["1", "4"]
        .iter()
        .map(|threads| {
            let out = dir.path().join(format!("t{threads}"));
            ok(drmiss().env("RAYON_NUM_THREADS", threads).arg("simulate").arg("--config").arg(&cfg).arg("--out").arg(&out));
            out
        })
        .collect();
    for file in ["results.csv", "summary.csv", "boxplot_a.csv", "failures.csv"] {
        let a = std::fs::read(outputs[0].join(file)).unwrap();
        let b = std::fs::read(outputs[1].join(file)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn estimate_with_bootstrap_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (observed, _) = generate_with_oracle(&DgpParams::scenario1(), 400, 5);
    let input = dir.path().join("obs.csv");
    observed.write_csv(std::fs::File::create(&input).unwrap()).unwrap();
    let outs: Vec<Vec<u8>> = ["1", "3"]
        .iter()
        .map(|threads| {
            let out = dir.path().join(format!("o{threads}"));
            ok(drmiss()
                .env("RAYON_NUM_THREADS", threads)
                .args(["estimate", "--estimators", "dr,ipcw", "--bootstrap-b", "50", "--seed", "99", "--input"])
                .arg(&input)
                .arg("--out")
                .arg(&out));
            std::fs::read(out.join("estimates.csv")).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let text = String::from_utf8(outs[0].clone()).unwrap();
    let dr = text.lines().find(|l| l.contains(",DR,")).unwrap();
    let fields: Vec<&str> = dr.split(',').collect();
    assert!(fields[6..10].iter().all(|f| f.parse::<f64>().is_ok()), "{dr}");
}

#[test]
fn seed_comes_from_the_environment_when_not_given() {
    let dir = tempfile::tempdir().unwrap();
    let (observed, _) = generate_with_oracle(&DgpParams::scenario1(), 300, 8);
    let input = dir.path().join("obs.csv");
    observed.write_csv(std::fs::File::create(&input).unwrap()).unwrap();
    let read = |out: &Path| std::fs::read(out.join("estimates.csv")).unwrap();
    let (env_out, flag_out, other_out) = (dir.path().join("env"), dir.path().join("flag"), dir.path().join("other"));
    let base = |cmd: &mut Command| {
        cmd.args(["estimate", "--estimators", "mcdlm", "--imputations", "5", "--label", "x", "--input"]).arg(&input);
    };
    let mut cmd = drmiss();
    base(&mut cmd);
    ok(cmd.env("DRMISS_SEED", "42").arg("--out").arg(&env_out));
    let mut cmd = drmiss();
    base(&mut cmd);
    ok(cmd.args(["--seed", "42", "--out"]).arg(&flag_out));
    let mut cmd = drmiss();
    base(&mut cmd);
    ok(cmd.args(["--seed", "43", "--out"]).arg(&other_out));
    assert_eq!(read(&env_out), read(&flag_out));
    assert_ne!(read(&env_out), read(&other_out));
}

#[test]
fn missing_column_is_a_parse_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("no_r.csv");
    std::fs::write(&input, "y,a,c,l\n0.1,1,0.2,0.3\n").unwrap();
    let out = run(drmiss().arg("estimate").arg("--input").arg(&input).arg("--out").arg(dir.path().join("o")));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`r`"));
}

#[test]
fn malformed_rows_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    std::fs::write(&input, "y,a,c,l,r\n0.1,1,0.2,0.3,1\n0.1,2,0.2,0.3,1\n").unwrap();
    let out = run(drmiss().arg("estimate").arg("--input").arg(&input).arg("--out").arg(dir.path().join("o")));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_replicates_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let in_file = write_config(dir.path(), "[[scenario]]\npreset = \"a\"\nreplicates = 0\n");
    let out = run(drmiss().arg("simulate").arg("--config").arg(&in_file).arg("--out").arg(dir.path().join("o")));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replicates"));
    assert!(!dir.path().join("o").exists());

    let in_file = write_config(dir.path(), "[[scenario]]\npreset = \"a\"\n");
    let out = run(drmiss()
        .arg("simulate")
        .arg("--config")
        .arg(&in_file)
        .args(["--replicates", "0", "--out"])
        .arg(dir.path().join("o")));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes_distinguish_estimation_and_positivity_failures() {
    let dir = tempfile::tempdir().unwrap();
    let (observed, _) = generate_with_oracle(&DgpParams::scenario1(), 300, 3);
    let input = dir.path().join("obs.csv");
    observed.write_csv(std::fs::File::create(&input).unwrap()).unwrap();
    // the benchmark estimator needs every confounder
    let out = run(drmiss().args(["estimate", "--estimators", "full", "--input"]).arg(&input).arg("--out").arg(dir.path().join("f")));
    assert_eq!(out.status.code(), Some(3));
    let table = std::fs::read_to_string(dir.path().join("f/estimates.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().contains(",Full,failed,"));

    // treatment determined by C: fitted propensities reach 0 and 1
    let mut text = String::from("y,a,c,l,r\n");
    for i in 0..200 {
        let c = (i as f64 - 99.5) / 40.0;
        let a = u8::from(c > 0.0);
        let l = 0.5 * c + ((i * 37 % 11) as f64 - 5.0) / 10.0;
        let y = l + f64::from(a) + ((i * 13 % 7) as f64 - 3.0) / 5.0;
        if i % 3 == 0 {
            text.push_str(&format!("{y},{a},{c},,0\n"));
        } else {
            text.push_str(&format!("{y},{a},{c},{l},1\n"));
        }
    }
    let sep = dir.path().join("separated.csv");
    std::fs::write(&sep, text).unwrap();
    let out = run(drmiss().args(["estimate", "--estimators", "dr,ipcw", "--input"]).arg(&sep).arg("--out").arg(dir.path().join("s")));
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    // one estimator succeeding is enough for a zero exit
    let out = run(drmiss().args(["estimate", "--estimators", "full,naive", "--input"]).arg(&input).arg("--out").arg(dir.path().join("m")));
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn unit_quantile_svg_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("plot.svg");
    ok(drmiss().arg("report").arg("--summary").arg(fixture("fixtures/unit_quantiles.csv")).arg("--svg").arg(&svg));
    let golden = std::fs::read_to_string(fixture("golden/unit_quantiles.svg")).unwrap();
    assert_eq!(std::fs::read_to_string(&svg).unwrap(), golden);
}

#[test]
fn report_orders_boxes_like_the_figure() {
    let dir = tempfile::tempdir().unwrap();
    let summary = dir.path().join("summary.csv");
    std::fs::copy(fixture("fixtures/shuffled.csv"), &summary).unwrap();
    let out = ok(drmiss().arg("report").arg("--summary").arg(&summary).arg("--svg"));
    let svg = std::fs::read_to_string(dir.path().join("boxplot.svg")).unwrap();
    assert_eq!(svg.matches("<g ").count(), 1);
    let labels: Vec<&str> = ["DR", "Naive", "CC", "IPCW", "MCDLM"]
        .into_iter()
        .filter(|name| svg.contains(&format!(">{name}</text>")))
        .collect();
    assert_eq!(labels.len(), 5);
    let positions: Vec<usize> = labels.iter().map(|name| svg.find(&format!(">{name}</text>")).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]), "boxes out of order");
    let text = String::from_utf8(out.stdout).unwrap();
    let order: Vec<&str> = text.lines().skip(2).map(|l| l.split_whitespace().nth(1).unwrap()).collect();
    assert_eq!(order, ["DR", "Naive", "CC", "IPCW", "MCDLM"]);
}

#[test]
fn empty_or_malformed_summaries_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "scenario,estimator,truth,min,q1,median,q3,max\n").unwrap();
    let out = run(drmiss().arg("report").arg("--summary").arg(&empty));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty report"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "scenario,estimator,min,q1,median,q3,max\na,DR,1,2,oops,4,5\n").unwrap();
    let out = run(drmiss().arg("report").arg("--summary").arg(&bad));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}
