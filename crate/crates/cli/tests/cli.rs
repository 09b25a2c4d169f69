use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neurachip_core::compiler::read_image;
use neurachip_core::sparse::{load_matrix_market, write_matrix_market, Layout, SparseMatrix};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neurachip"));
    c.env_remove("NEURACHIP_OUT");
    c
}

fn neurachip(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_mtx(dir: &Path, name: &str, m: &SparseMatrix<f64>) -> String {
    let path = dir.join(name);
    let mut f = fs::File::create(&path).unwrap();
    write_matrix_market(m, &mut f).unwrap();
    path.to_string_lossy().into_owned()
}

fn hand_pair(dir: &Path) -> (String, String) {
    let a = SparseMatrix::from_dense(&[vec![1.0, 0.0, 2.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 4.0]], Layout::Csr);
    let b = SparseMatrix::from_dense(&[vec![1.0, 1.0, 0.0], vec![0.0, 2.0, 0.0], vec![5.0, 0.0, 6.0]], Layout::Csr);
    (write_mtx(dir, "a.mtx", &a), write_mtx(dir, "b.mtx", &b))
}

fn karate() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/karate.mtx").to_string_lossy().into_owned()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn identity_run_returns_identity() {
    let t = tempfile::tempdir().unwrap();
    let id = write_mtx(t.path(), "id4.mtx", &SparseMatrix::identity(4, Layout::Csr));
    let out = p(t.path(), "run");
    let o = neurachip(&["run", "--a", &id, "--b", &id, "--preset", "tile4", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c: SparseMatrix<f64> = load_matrix_market(Path::new(&out).join("result.mtx"), Layout::Csr).unwrap();
    assert_eq!(c, SparseMatrix::identity(4, Layout::Csr));
    for f in ["manifest.json", "metrics.json", "config.txt", "trace.csv", "mmh_cpi.csv", "hacc_cpi.csv", "heatmap.csv"] {
        assert!(Path::new(&out).join(f).is_file(), "missing {f}");
    }
}

#[test]
fn unknown_preset_is_a_validation_error() {
    let t = tempfile::tempdir().unwrap();
    let id = write_mtx(t.path(), "id4.mtx", &SparseMatrix::identity(4, Layout::Csr));
    let o = neurachip(&["run", "--a", &id, "--preset", "tile99", "--out", &p(t.path(), "x")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("tile99"));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(code(&neurachip(&["run"])), 1);
    assert_eq!(code(&neurachip(&["frobnicate"])), 1);
    assert_eq!(code(&neurachip(&["run", "--a", "x.mtx", "--gcn"])), 1);
    assert_eq!(code(&neurachip(&["--help"])), 0);
}

#[test]
fn missing_input_is_a_validation_error() {
    let t = tempfile::tempdir().unwrap();
    let o = neurachip(&["run", "--a", &p(t.path(), "absent.mtx"), "--out", &p(t.path(), "x")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("absent.mtx"));
}

#[test]
fn config_file_overrides_and_names_bad_fields() {
    let t = tempfile::tempdir().unwrap();
    let id = write_mtx(t.path(), "id.mtx", &SparseMatrix::identity(8, Layout::Csr));
    let good = p(t.path(), "good.conf");
    fs::write(&good, "# slower network\npreset = tile4\nhop_latency = 3\neviction = barrier\n").unwrap();
    let out = p(t.path(), "run");
    let o = neurachip(&["run", "--a", &id, "--config", &good, "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = fs::read_to_string(Path::new(&out).join("config.txt")).unwrap();
    assert!(cfg.contains("hop_latency = 3"));
    assert!(cfg.contains("eviction = barrier"));
    assert!(cfg.contains("name = tile4"));

    let bad = p(t.path(), "bad.conf");
    fs::write(&bad, "engines = 3\n").unwrap();
    let o = neurachip(&["run", "--a", &id, "--config", &bad, "--out", &p(t.path(), "y")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("engines"), "{}", stderr(&o));

    fs::write(&bad, "warp_drive = 1\n").unwrap();
    let o = neurachip(&["run", "--a", &id, "--config", &bad, "--out", &p(t.path(), "z")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("warp_drive"));
}

#[test]
fn show_config_round_trips_through_a_config_file() {
    let t = tempfile::tempdir().unwrap();
    let o = neurachip(&["show-config", "--preset", "tile64", "--eviction", "barrier"]);
    assert_eq!(code(&o), 0);
    let path = p(t.path(), "c.conf");
    fs::write(&path, &o.stdout).unwrap();
    let again = neurachip(&["show-config", "--config", &path]);
    assert_eq!(again.stdout, o.stdout);
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let t = tempfile::tempdir().unwrap();
    let id = write_mtx(t.path(), "id.mtx", &SparseMatrix::identity(4, Layout::Csr));
    let root = t.path().join("runs");
    let o = bin()
        .args(["run", "--a", &id, "--preset", "tile4", "--mapping", "ring"])
        .env("NEURACHIP_OUT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(root.join("tile4-ring-rolling-w4-seed1").join("manifest.json").is_file());
}

#[test]
fn gcn_layer_runs_two_checked_stages() {
    let t = tempfile::tempdir().unwrap();
    let x = SparseMatrix::from_dense(&(0..34).map(|r| (0..3).map(|c| ((r * 7 + c * 3) % 5) as f64 - 2.0).collect()).collect::<Vec<_>>(), Layout::Csr);
    let w = SparseMatrix::from_dense(&[vec![1.0, -1.0], vec![2.0, 0.0], vec![-1.0, 1.0]], Layout::Csr);
    let (xp, wp) = (write_mtx(t.path(), "x.mtx", &x), write_mtx(t.path(), "w.mtx", &w));
    let out = p(t.path(), "gcn");
    let o = neurachip(&["run", "--gcn", "--a", &karate(), "--x", &xp, "--w", &wp, "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(Path::new(&out).join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["aggregate"]["total_cycles"].as_u64().unwrap() > 0);
    assert!(metrics["combine"]["total_cycles"].as_u64().unwrap() > 0);
    assert!(Path::new(&out).join("combine_trace.csv").is_file());
    let c: SparseMatrix<f64> = load_matrix_market(Path::new(&out).join("result.mtx"), Layout::Csr).unwrap();
    assert!(c.values().iter().all(|&v| v >= 0.0));
}

#[test]
fn sweep_writes_sorted_rows_and_replays_identically() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = hand_pair(t.path());
    let sweep = |root: &str, jobs: &str| {
        let o = neurachip(&[
            "sweep", "--a", &a, "--b", &b, "--presets", "tile16,tile4", "--mappings", "ring", "--evictions", "rolling,barrier",
            "--jobs", jobs, "--out", root,
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read_to_string(Path::new(root).join("sweep.csv")).unwrap()
    };
    let first = sweep(&p(t.path(), "s1"), "1");
    let rows: Vec<&str> = first.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    let keys: Vec<String> = rows.iter().map(|r| r.split(',').take(3).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(keys, ["tile16,ring,barrier", "tile16,ring,rolling", "tile4,ring,barrier", "tile4,ring,rolling"]);
    assert_eq!(sweep(&p(t.path(), "s2"), "1"), first);
    assert_eq!(sweep(&p(t.path(), "s3"), "3"), first);
    assert!(Path::new(&p(t.path(), "s1")).join("tile4-ring-barrier-w4-seed1/manifest.json").is_file());
}

#[test]
fn sweep_rejects_a_width_a_preset_cannot_hold() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = hand_pair(t.path());
    let o = neurachip(&["sweep", "--a", &a, "--b", &b, "--presets", "tile4", "--width", "8", "--out", &p(t.path(), "s")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn replay_matches_and_detects_changes() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = hand_pair(t.path());
    let out = p(t.path(), "run");
    assert_eq!(code(&neurachip(&["run", "--a", &a, "--b", &b, "--seed", "9", "--out", &out])), 0);
    assert_eq!(code(&neurachip(&["replay", &out, "--threads", "2"])), 0);

    // A doctored metrics hash is an integrity failure.
    let mpath = Path::new(&out).join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
    m["outputs"]["metrics.json"] = "00".into();
    fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();
    assert_eq!(code(&neurachip(&["replay", &out])), 3);

    // A changed input is refused.
    fs::write(&b, "%%MatrixMarket matrix coordinate real general\n3 3 1\n1 1 1\n").unwrap();
    assert_eq!(code(&neurachip(&["replay", &out])), 2);
}

#[test]
fn bloat_reports_table_columns() {
    let t = tempfile::tempdir().unwrap();
    let id = write_mtx(t.path(), "id.mtx", &SparseMatrix::identity(4, Layout::Csr));
    let o = neurachip(&["bloat", &id]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "dataset,nodes,edges,sparsity_percent,bloat_percent,pp_interim,nnz_output");
    assert_eq!(lines.next().unwrap(), "id,4,4,75.0000,0.0000,4,4");

    let (a, b) = hand_pair(t.path());
    let o = neurachip(&["bloat", &a, "--b", &b]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "a,3,4,55.5556,16.6667,7,6");

    let empty = write_mtx(t.path(), "z.mtx", &SparseMatrix::empty(3, 3, Layout::Csr));
    let o = neurachip(&["bloat", &empty]);
    assert!(String::from_utf8(o.stdout).unwrap().contains(",undefined,"));
}

#[test]
fn compile_writes_readable_artifacts() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = hand_pair(t.path());
    let out = p(t.path(), "c");
    let o = neurachip(&["compile", "--a", &a, "--b", &b, "--width", "2", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, header) = read_image(fs::File::open(Path::new(&out).join("image.bin")).unwrap()).unwrap();
    assert_eq!((header.out_rows, header.out_cols, header.width), (3, 3, 2));
    let program = fs::File::open(Path::new(&out).join("program.bin")).unwrap();
    let instrs = neurachip_core::isa::read_instruction_stream(program).unwrap();
    assert!(!instrs.is_empty());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(PathBuf::from(&out).join("workload.json")).unwrap()).unwrap();
    assert_eq!(summary["expected_pp_count"], 7);
    assert_eq!(summary["instructions"].as_u64().unwrap() as usize, instrs.len());
}
