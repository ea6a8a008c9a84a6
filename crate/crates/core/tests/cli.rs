use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ptgraphreg::pipeline::CSV_HEADER;

const SMALL_CONFIG: &str = "\
[features]
esf_sample_count = 2000

[solver]
restarts = 2

[source]
points_target = 1200
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptgraphreg")).args(args).env("RUST_LOG", "error").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self { dir: tempfile::tempdir().unwrap() };
        std::fs::write(ws.path("small.toml"), SMALL_CONFIG).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn gen_perturb_graph_register() {
    let ws = Workspace::new();
    let (cfg, src, dst) = (ws.arg("small.toml"), ws.arg("src.xyz"), ws.arg("dst.ply"));
    assert_eq!(code(&run(&["gen", "--config", &cfg, "--out", &src])), 0);
    assert_eq!(read(&ws.path("src.xyz")).lines().count(), 1200);

    let out = run(&["perturb", "--in", &src, "--out", &dst, "--rotate-xy-deg", "90"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let graph = ws.arg("g.txt");
    assert_eq!(code(&run(&["graph", "--in", &src, "--out", &graph, "--config", &cfg])), 0);
    let text = read(&ws.path("g.txt"));
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "v" => {
                assert_eq!(fields.len(), 7, "{line}");
                assert!(fields[6] == "0" || fields[6] == "1");
            }
            "e" => assert_eq!(fields.len(), 4, "{line}"),
            other => panic!("unexpected record {other}"),
        }
    }
    assert!(text.lines().any(|l| l.starts_with("e ")));

    for method in ["graph", "icp"] {
        let t = ws.arg(&format!("{method}.txt"));
        let report = ws.arg("report.json");
        let out = run(&[
            "register", "--src", &src, "--dst", &dst, "--config", &cfg, "--out", &t, "--method", method, "--report",
            &report,
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let rows: Vec<Vec<f64>> = read(&ws.path(&format!("{method}.txt")))
            .lines()
            .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.len() == 4));
        if method == "graph" {
            // A quarter turn: R[0][1] = -1, R[1][0] = 1.
            assert!((rows[0][1] + 1.0).abs() < 1e-3 && (rows[1][0] - 1.0).abs() < 1e-3, "{rows:?}");
            assert!(read(&ws.path("report.json")).contains("n_inliers"));
        }
    }
}

#[test]
fn transform_file_keeps_twelve_significant_digits() {
    let ws = Workspace::new();
    let (cfg, src, dst) = (ws.arg("small.toml"), ws.arg("a.xyz"), ws.arg("b.xyz"));
    assert_eq!(code(&run(&["gen", "--config", &cfg, "--out", &src])), 0);
    assert_eq!(code(&run(&["perturb", "--in", &src, "--out", &dst, "--rotate-xy-deg", "1"])), 0);
    let t = ws.arg("t.txt");
    assert_eq!(
        code(&run(&["register", "--src", &src, "--dst", &dst, "--config", &cfg, "--out", &t, "--method", "icp"])),
        0
    );
    let text = read(&ws.path("t.txt"));
    let cos = text.split_whitespace().next().unwrap();
    let digits = cos.trim_start_matches('-').chars().filter(char::is_ascii_digit).skip_while(|&c| c == '0').count();
    assert!(digits >= 12, "{cos}");
}

#[test]
fn bench_then_plot() {
    let ws = Workspace::new();
    let (cfg, csv, svg) = (ws.arg("small.toml"), ws.arg("r.csv"), ws.arg("f.svg"));
    let out = run(&["bench", "--config", &cfg, "--out", &csv]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = read(&ws.path("r.csv"));
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
    assert_eq!(lines.count(), 16);
    assert_eq!(code(&run(&["plot", "--in", &csv, "--out", &svg])), 0);
    let svg = read(&ws.path("f.svg"));
    assert_eq!(svg.matches(r#"class="group""#).count(), 8);
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    let (cfg, src) = (ws.arg("small.toml"), ws.arg("src.xyz"));
    assert_eq!(code(&run(&["gen", "--config", &cfg, "--out", &src])), 0);

    // Configuration errors.
    std::fs::write(ws.path("bad.toml"), "[solver]\nrestart = 3\n").unwrap();
    assert_eq!(code(&run(&["gen", "--config", &ws.arg("bad.toml"), "--out", &ws.arg("x.xyz")])), 2);
    std::fs::write(ws.path("neg.toml"), "[solver]\nrestarts = 0\n").unwrap();
    assert_eq!(code(&run(&["bench", "--config", &ws.arg("neg.toml"), "--out", &ws.arg("r.csv")])), 2);
    assert_eq!(code(&run(&["perturb", "--in", &src, "--out", &ws.arg("p.xyz"), "--keep", "0"])), 2);

    // IO errors.
    assert_eq!(code(&run(&["graph", "--in", &ws.arg("missing.xyz"), "--out", &ws.arg("g.txt")])), 4);
    std::fs::write(ws.path("junk.xyz"), "1 2\n").unwrap();
    assert_eq!(code(&run(&["register", "--src", &src, "--dst", &ws.arg("junk.xyz"), "--out", &ws.arg("t.txt")])), 4);
    assert_eq!(code(&run(&["plot", "--in", &ws.arg("missing.csv"), "--out", &ws.arg("f.svg")])), 4);

    // Registration failure: too few destination clusters for RANSAC.
    let few: String = read(&ws.path("src.xyz")).lines().take(5).map(|l| format!("{l}\n")).collect();
    std::fs::write(ws.path("few.xyz"), few).unwrap();
    let out =
        run(&["register", "--src", &src, "--dst", &ws.arg("few.xyz"), "--config", &cfg, "--out", &ws.arg("t.txt")]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
