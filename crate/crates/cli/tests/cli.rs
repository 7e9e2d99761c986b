use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nvtrans::experiments::spearman;

fn nvtrans(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvtrans"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// Model `m.nvtx`, corpus `c.txt` and priors `p.json`.
    fn new(seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let s = seed.to_string();
        assert_eq!(code(&nvtrans(dir.path(), &["init-model", "--seed", &s, "--out", "m.nvtx"])), 0);
        assert_eq!(
            code(&nvtrans(dir.path(), &["synth-corpus", "--sequences", "100", "--seed", &s, "--out", "c.txt"])),
            0
        );
        let out = nvtrans(dir.path(), &["estimate-prior", "--model", "m.nvtx", "--corpus", "c.txt", "--out", "p.json"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Output {
        nvtrans(self.path(), args)
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path().join(name)
    }
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn init_model_is_seeded_and_reloadable() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvtrans(dir.path(), &["init-model", "--seed", "4", "--out", "a.nvtx"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("parameters: "));
    nvtrans(dir.path(), &["init-model", "--seed", "4", "--out", "b.nvtx"]);
    let a = fs::read(dir.path().join("a.nvtx")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.nvtx")).unwrap());
    let w = nvtrans::format::load_weights(dir.path().join("a.nvtx")).unwrap();
    assert_eq!(w.config, nvtrans::ModelConfig::default());
    assert_eq!(stdout(&out).lines().next().unwrap(), format!("parameters: {}", w.parameter_count()));
}

#[test]
fn init_model_config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.txt"), "vocab = 40\nd = 8\nh = 2\n").unwrap();
    let out = nvtrans(dir.path(), &["init-model", "--config", "cfg.txt", "--h", "4", "--out", "m.nvtx"]);
    assert_eq!(code(&out), 0);
    let w = nvtrans::format::load_weights(dir.path().join("m.nvtx")).unwrap();
    assert_eq!((w.config.vocab, w.config.d, w.config.h), (40, 8, 4));

    let bad = nvtrans(dir.path(), &["init-model", "--h", "3", "--out", "x.nvtx"]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("not divisible"));
    assert!(!dir.path().join("x.nvtx").exists());
}

#[test]
fn estimate_prior_outputs_and_errors() {
    let f = Fixture::new(1);
    let again = f.run(&["estimate-prior", "--model", "m.nvtx", "--corpus", "c.txt", "--out", "q.json", "--report", "r.csv"]);
    assert_eq!(code(&again), 0);
    assert_eq!(fs::read(f.file("p.json")).unwrap(), fs::read(f.file("q.json")).unwrap());
    let report = fs::read_to_string(f.file("r.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 6);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert!(["encoder", "cross", "decoder"].contains(&cells[1]), "{row}");
        assert!(cells[2..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }

    fs::write(f.file("empty.txt"), "\n# nothing\n").unwrap();
    let empty = f.run(&["estimate-prior", "--model", "m.nvtx", "--corpus", "empty.txt", "--out", "e.json"]);
    assert_eq!(code(&empty), 3);
    let zero = f.run(&["estimate-prior", "--model", "m.nvtx", "--corpus", "c.txt", "--fraction", "0", "--out", "e.json"]);
    assert_eq!(code(&zero), 2);
    fs::write(f.file("junk.txt"), "3 4 x\n").unwrap();
    let junk = f.run(&["estimate-prior", "--model", "m.nvtx", "--corpus", "junk.txt", "--out", "e.json"]);
    assert_eq!(code(&junk), 3);
    let missing = f.run(&["estimate-prior", "--model", "nope.nvtx", "--corpus", "c.txt", "--out", "e.json"]);
    assert_eq!(code(&missing), 3);
}

#[test]
fn subsampled_priors_still_certify() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    nvtrans(p, &["init-model", "--seed", "2", "--out", "m.nvtx"]);
    nvtrans(p, &["synth-corpus", "--sequences", "10000", "--seed", "3", "--out", "big.txt"]);
    let sub = nvtrans(
        p,
        &["estimate-prior", "--model", "m.nvtx", "--corpus", "big.txt", "--fraction", "0.001", "--seed", "9", "--out", "s.json"],
    );
    assert_eq!(code(&sub), 0);
    let again = nvtrans(
        p,
        &["estimate-prior", "--model", "m.nvtx", "--corpus", "big.txt", "--fraction", "0.001", "--seed", "9", "--out", "t.json"],
    );
    assert_eq!(stdout(&sub), stdout(&again));
    let cert = nvtrans(p, &["certify", "--model", "m.nvtx", "--priors", "s.json"]);
    assert_eq!(code(&cert), 0, "{}", stdout(&cert));
}

#[test]
fn certify_exit_codes() {
    let f = Fixture::new(3);
    let pass = f.run(&["certify", "--model", "m.nvtx", "--priors", "p.json", "--tau-alpha", "10", "--tau-sigma", "1e-38"]);
    assert_eq!(code(&pass), 0);
    let text = stdout(&pass);
    assert!(text.contains("decode overlap: 100.00%"), "{text}");
    assert!(text.trim_end().ends_with("PASS"));

    let fail = f.run(&["certify", "--model", "m.nvtx", "--priors", "p.json", "--tau-sigma", "0.5"]);
    assert_eq!(code(&fail), 1);
    assert!(stdout(&fail).trim_end().ends_with("FAIL"));

    assert_eq!(code(&f.run(&["certify", "--model", "m.nvtx", "--priors", "p.json", "--trials", "0"])), 2);
    assert_eq!(code(&f.run(&["certify", "--model", "m.nvtx"])), 3);
    assert_eq!(code(&f.run(&["certify", "--model", "m.nvtx", "--priors", "p.json", "--tau-sigma", "0"])), 2);
}

#[test]
fn sweep_interpolation_trend_and_identity() {
    let f = Fixture::new(4);
    let out = f.run(&["sweep", "--model", "m.nvtx", "--priors", "p.json", "--grid", "interp:10", "--out", "s.csv"]);
    assert_eq!(code(&out), 0);
    let (header, rows) = read_csv(&f.file("s.csv"));
    assert_eq!(header.len(), 12);
    assert_eq!(rows.len(), 10);
    let overlap: Vec<f64> = rows.iter().map(|r| r[7]).collect();
    let steps: Vec<f64> = (0..10).map(f64::from).collect();
    assert!(spearman(&steps, &overlap).unwrap() < 0.0, "{overlap:?}");
    assert!(rows.iter().flatten().all(|x| x.is_finite()));

    f.run(&["sweep", "--model", "m.nvtx", "--priors", "p.json", "--grid", "identity", "--out", "i.csv"]);
    let (_, id) = read_csv(&f.file("i.csv"));
    assert_eq!(id.len(), 1);
    assert!(id[0][6] <= 1e-5);
    assert_eq!(id[0][7], 100.0);
}

#[test]
fn sweep_random_is_reproducible() {
    let f = Fixture::new(5);
    let args = |out: &'static str| ["sweep", "--model", "m.nvtx", "--priors", "p.json", "--grid", "random:5", "--seed", "11", "--inputs", "4", "--out", out];
    assert_eq!(code(&f.run(&args("a.csv"))), 0);
    assert_eq!(code(&f.run(&args("b.csv"))), 0);
    assert_eq!(fs::read(f.file("a.csv")).unwrap(), fs::read(f.file("b.csv")).unwrap());
    let (_, rows) = read_csv(&f.file("a.csv"));
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!((-15.0..=10.0).contains(&r[0]) && (1e-38..=0.5).contains(&r[3]));
    }
    for bad in ["random:", "grid:1,2", "interp:0", "nope"] {
        let out = f.run(&["sweep", "--model", "m.nvtx", "--priors", "p.json", "--grid", bad, "--out", "c.csv"]);
        assert_eq!(code(&out), 2, "{bad}");
    }
}

#[test]
fn attention_dumps() {
    let f = Fixture::new(6);
    let dump = |extra: &[&str], out: &str| {
        let mut args = vec!["attn-dump", "--model", "m.nvtx", "--priors", "p.json", "--input", "5 9 13 17", "--out", out];
        args.extend_from_slice(extra);
        f.run(&args)
    };
    for group in ["encoder", "cross", "decoder"] {
        assert_eq!(code(&dump(&["--layer", "1", "--group", group], "id.csv")), 0);
        let (header, rows) = read_csv(&f.file("id.csv"));
        assert_eq!(header.last().unwrap(), "[P]");
        for r in &rows {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(*r.last().unwrap() < 1e-6);
        }

        assert_eq!(code(&dump(&["--layer", "0", "--group", group, "--tau-alpha", "-30"], "col.csv")), 0);
        let (_, rows) = read_csv(&f.file("col.csv"));
        assert!(rows.iter().all(|r| *r.last().unwrap() > 0.99));
    }
    let (header, rows) = {
        dump(&["--layer", "0", "--group", "cross", "--target", "3 4"], "x.csv");
        read_csv(&f.file("x.csv"))
    };
    assert_eq!(header.len(), 5);
    assert_eq!(rows.len(), 3);

    assert_eq!(code(&dump(&["--layer", "2", "--group", "encoder"], "bad.csv")), 2);
    assert_eq!(code(&dump(&["--layer", "0", "--group", "middle"], "bad.csv")), 2);
}
