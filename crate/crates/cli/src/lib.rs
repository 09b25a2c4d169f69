//! Command-line driver: compile workloads, run and sweep simulations,
//! replay recorded runs and report partial-product bloat.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid input or configuration,
//! 3 simulation integrity failure.

pub mod error;
pub mod output;
pub mod pipeline;
pub mod sweep;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use neurachip_core::compiler::{write_image, ImageHeader};
use neurachip_core::isa::{write_instruction_stream, MmhWidth};
use neurachip_core::mapping::MappingKind;
use neurachip_core::sparse::{bloat_analysis, Layout};
use neurachip_sim::{EvictionMode, MetricsReport, RunOptions, TileConfig};
use serde_json::json;

pub use error::{CmdResult, Failure};
use output::{InputFile, Manifest, RunFiles, RunKind};

#[derive(Debug, Parser)]
#[command(name = "neurachip", version, about = "Cycle-level simulator of the NeuraChip sparse accelerator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Lower A x B to a memory image and an MMH instruction stream.
    Compile(CompileArgs),
    /// Simulate A x B (or a GCN layer), check it against the oracle and
    /// write a run directory.
    Run(RunArgs),
    /// Run every preset x mapping x eviction combination on one workload.
    Sweep(sweep::SweepArgs),
    /// Print node count, edge count, sparsity and bloat percent per matrix.
    Bloat(BloatArgs),
    /// Re-execute a run directory and compare its metrics byte for byte.
    Replay(ReplayArgs),
    /// Print a resolved configuration in the config-file format.
    ShowConfig(ConfigArgs),
}

/// Hardware selection shared by `run`, `sweep` and `show-config`.
#[derive(Debug, Clone, Args, Default)]
pub struct ConfigArgs {
    /// tile4, tile16, tile64 or tile64-hbm256.
    #[arg(long)]
    pub preset: Option<String>,
    /// key = value file applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mapping: Option<MappingKind>,
    #[arg(long)]
    pub eviction: Option<EvictionMode>,
    /// MMH width: 1, 2, 4 or 8.
    #[arg(long)]
    pub width: Option<MmhWidth>,
}

impl ConfigArgs {
    /// Preset (tile16 by default), then the config file, then the flags.
    pub fn resolve(&self) -> CmdResult<TileConfig> {
        let mut cfg = TileConfig::preset(self.preset.as_deref().unwrap_or("tile16")).map_err(Failure::validation)?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Validation(anyhow!("reading {}: {e}", path.display())))?;
            cfg = TileConfig::parse_overrides(&text, cfg).map_err(|e| Failure::Validation(anyhow!("{}: {e}", path.display())))?;
        }
        if let Some(m) = self.mapping {
            cfg.mapping = m;
        }
        if let Some(e) = self.eviction {
            cfg.eviction = e;
        }
        if let Some(w) = self.width {
            cfg.mmh_width = w;
        }
        cfg.validate().map_err(Failure::validation)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    #[arg(long)]
    pub a: PathBuf,
    /// Right operand; defaults to A.
    #[arg(long)]
    pub b: Option<PathBuf>,
    #[arg(long, default_value = "4")]
    pub width: MmhWidth,
    /// Directory for image.bin, program.bin and workload.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Left operand, or the graph adjacency with --gcn.
    #[arg(long)]
    pub a: PathBuf,
    /// Right operand; defaults to A.
    #[arg(long, conflicts_with = "gcn")]
    pub b: Option<PathBuf>,
    /// Simulate relu(A X W) as two chained products.
    #[arg(long, requires_all = ["x", "w"])]
    pub gcn: bool,
    /// Node features for --gcn.
    #[arg(long, requires = "gcn")]
    pub x: Option<PathBuf>,
    /// Layer weights for --gcn.
    #[arg(long, requires = "gcn")]
    pub w: Option<PathBuf>,
    #[command(flatten)]
    pub hw: ConfigArgs,
    /// Seeds the mapping policy.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Run directory. Defaults to a named directory under $NEURACHIP_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BloatArgs {
    /// Matrix Market files; each is multiplied by --b, or by itself.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    #[arg(long)]
    pub b: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("neurachip: {f}");
            f.code()
        }
    }
}

pub fn execute(cmd: Command) -> CmdResult {
    match cmd {
        Command::Compile(a) => cmd_compile(&a),
        Command::Run(a) => cmd_run(&a).map(|_| ()),
        Command::Sweep(a) => sweep::cmd_sweep(&a).map(|_| ()),
        Command::Bloat(a) => cmd_bloat(&a, &mut std::io::stdout().lock()),
        Command::Replay(a) => cmd_replay(&a),
        Command::ShowConfig(a) => {
            print!("{}", a.resolve()?.to_config_text());
            Ok(())
        }
    }
}

fn write_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Validation(anyhow!("writing {}: {e}", path.display()))
}

pub fn cmd_compile(args: &CompileArgs) -> CmdResult {
    let a = pipeline::load(&args.a, Layout::Csc)?;
    let b = match &args.b {
        Some(p) => pipeline::load(p, Layout::Csr)?,
        None => a.to_csr(),
    };
    let cfg = TileConfig {
        mmh_width: args.width,
        ..TileConfig::tile16()
    };
    let w = pipeline::compile(&a, &b, &cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| write_err(&args.out, e))?;
    let header = ImageHeader {
        out_rows: w.out_rows as u32,
        out_cols: w.out_cols as u32,
        width: w.width.lanes() as u8,
    };
    let mut image = Vec::new();
    write_image(&w.image, header, &mut image).map_err(Failure::validation)?;
    let mut program = Vec::new();
    let instrs: Vec<_> = w.instructions.iter().map(|m| neurachip_core::isa::Instruction::Mmh(*m)).collect();
    write_instruction_stream(&instrs, &mut program).map_err(Failure::validation)?;
    let summary = json!({
        "out_rows": w.out_rows,
        "out_cols": w.out_cols,
        "mmh_width": w.width.lanes(),
        "instructions": w.instructions.len(),
        "row_blocks": w.row_blocks.len(),
        "expected_pp_count": w.expected_pp_count,
        "expected_output_nnz": w.expected_output_nnz,
        "image_bytes": w.image.total_size(),
    });
    for (name, bytes) in [
        ("image.bin", image),
        ("program.bin", program),
        ("workload.json", (serde_json::to_string_pretty(&summary).expect("json") + "\n").into_bytes()),
    ] {
        let path = args.out.join(name);
        fs::write(&path, bytes).map_err(|e| write_err(&path, e))?;
    }
    println!(
        "{} MMH{} instructions, {} partial products, {} output nonzeros -> {}",
        w.instructions.len(),
        w.width.lanes(),
        w.expected_pp_count,
        w.expected_output_nnz,
        args.out.display()
    );
    Ok(())
}

/// Name of a run directory under the output root.
pub fn run_label(cfg: &TileConfig, seed: u64) -> String {
    format!("{}-{}-{}-w{}-seed{seed}", cfg.name, cfg.mapping, cfg.eviction, cfg.mmh_width)
}

/// Rendered run directory plus the metrics of each simulated stage.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub files: RunFiles,
    pub reports: Vec<MetricsReport>,
}

/// Simulates one run and renders its directory contents.
pub fn simulate(
    kind: RunKind,
    inputs: &std::collections::BTreeMap<String, PathBuf>,
    cfg: &TileConfig,
    opts: &RunOptions,
) -> CmdResult<Simulated> {
    let input = |role: &str| inputs.get(role).ok_or_else(|| Failure::Usage(format!("missing input '{role}'")));
    let a = pipeline::load(input("a")?, Layout::Csc)?;
    let mut files = RunFiles::default();
    let mut reports = Vec::new();
    files.add_config(&cfg.to_config_text());
    match kind {
        RunKind::Spgemm => {
            let b = match inputs.get("b") {
                Some(p) => pipeline::load(p, Layout::Csr)?,
                None => a.to_csr(),
            };
            let r = pipeline::simulate_spgemm(&a, &b, cfg, opts)?;
            files.add_metrics(r.result.metrics.to_json());
            files.add_stage("", &r.result);
            files.add_result(&r.result.output);
            reports.push(r.result.metrics);
        }
        RunKind::Gcn => {
            let x = pipeline::load(input("x")?, Layout::Csr)?;
            let w = pipeline::load(input("w")?, Layout::Csr)?;
            let g = pipeline::simulate_gcn(&a, &x, &w, cfg, opts)?;
            let both = json!({ "aggregate": g.aggregate.result.metrics, "combine": g.combine.result.metrics });
            files.add_metrics(serde_json::to_string_pretty(&both).expect("metrics serialize"));
            files.add_stage("aggregate_", &g.aggregate.result);
            files.add_stage("combine_", &g.combine.result);
            files.add_result(&g.output);
            reports.push(g.aggregate.result.metrics);
            reports.push(g.combine.result.metrics);
        }
    }
    Ok(Simulated { files, reports })
}

pub(crate) fn manifest(kind: RunKind, inputs: &std::collections::BTreeMap<String, PathBuf>, cfg: &TileConfig, seed: u64, files: &RunFiles) -> CmdResult<Manifest> {
    let mut hashed = std::collections::BTreeMap::new();
    for (role, path) in inputs {
        let f = InputFile::hash(path).map_err(|e| Failure::Validation(anyhow!("reading {}: {e}", path.display())))?;
        hashed.insert(role.clone(), f);
    }
    Ok(Manifest {
        tool: "neurachip".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        kind,
        inputs: hashed,
        seed,
        config: cfg.to_config_text(),
        outputs: files.hashes(),
    })
}

/// Runs, checks and writes one run directory; returns its path.
pub fn cmd_run(args: &RunArgs) -> CmdResult<PathBuf> {
    let cfg = args.hw.resolve()?;
    let mut inputs = std::collections::BTreeMap::new();
    inputs.insert("a".to_string(), args.a.clone());
    let kind = if args.gcn {
        inputs.insert("x".into(), args.x.clone().expect("clap requires --x"));
        inputs.insert("w".into(), args.w.clone().expect("clap requires --w"));
        RunKind::Gcn
    } else {
        if let Some(b) = &args.b {
            inputs.insert("b".into(), b.clone());
        }
        RunKind::Spgemm
    };
    let opts = RunOptions {
        seed: args.seed,
        threads: args.threads,
    };
    let Simulated { files, reports } = simulate(kind, &inputs, &cfg, &opts)?;
    let m = manifest(kind, &inputs, &cfg, args.seed, &files)?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| output::out_root(None).join(run_label(&cfg, args.seed)));
    files.write(&dir, &m).map_err(|e| write_err(&dir, e))?;
    for s in &reports {
        println!(
            "{} {} {} MMH{}: {} cycles, {} partial products, {:.3} GOP/s",
            cfg.name, cfg.mapping, cfg.eviction, cfg.mmh_width, s.total_cycles, s.expected_pp_count, s.gops
        );
    }
    println!("oracle check passed; results in {}", dir.display());
    Ok(dir)
}

pub fn cmd_replay(args: &ReplayArgs) -> CmdResult {
    let m = output::read_manifest(&args.dir).map_err(Failure::Validation)?;
    let mut inputs = std::collections::BTreeMap::new();
    for (role, f) in &m.inputs {
        let now = InputFile::hash(&f.path).map_err(|e| Failure::Validation(anyhow!("reading {}: {e}", f.path.display())))?;
        if now.sha256 != f.sha256 {
            return Err(Failure::Validation(anyhow!("input {} changed since the run", f.path.display())));
        }
        inputs.insert(role.clone(), f.path.clone());
    }
    let cfg = TileConfig::parse_overrides(&m.config, TileConfig::tile16()).map_err(Failure::validation)?;
    let opts = RunOptions {
        seed: m.seed,
        threads: args.threads,
    };
    let now = simulate(m.kind, &inputs, &cfg, &opts)?.files.hashes();
    let differing: Vec<&String> = m.outputs.iter().filter(|(k, v)| now.get(*k) != Some(v)).map(|(k, _)| k).collect();
    if !differing.is_empty() {
        return Err(Failure::Integrity(anyhow!("replay differs in {differing:?}")));
    }
    println!("replay identical: {} files", now.len());
    Ok(())
}

/// One line of `bloat` output.
#[derive(Debug, Clone, PartialEq)]
pub struct BloatRow {
    pub dataset: String,
    pub nodes: usize,
    pub edges: usize,
    pub sparsity_percent: f64,
    pub pp_interim: u64,
    pub nnz_output: u64,
    pub bloat_percent: Option<f64>,
}

pub fn bloat_rows(args: &BloatArgs) -> CmdResult<Vec<BloatRow>> {
    let b = args.b.as_deref().map(|p| pipeline::load(p, Layout::Csr)).transpose()?;
    args.paths
        .iter()
        .map(|path| {
            let a = pipeline::load(path, Layout::Csr)?;
            let r = bloat_analysis(&a, b.as_ref().unwrap_or(&a)).map_err(Failure::validation)?;
            Ok(BloatRow {
                dataset: path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned()),
                nodes: a.n_rows(),
                edges: a.nnz(),
                sparsity_percent: a.sparsity_percent(),
                pp_interim: r.pp_interim,
                nnz_output: r.nnz_output,
                bloat_percent: r.is_defined().then_some(r.bloat_percent),
            })
        })
        .collect()
}

pub fn cmd_bloat(args: &BloatArgs, out: &mut impl Write) -> CmdResult {
    let rows = bloat_rows(args)?;
    let io = |e: std::io::Error| Failure::Validation(anyhow!("writing output: {e}"));
    writeln!(out, "dataset,nodes,edges,sparsity_percent,bloat_percent,pp_interim,nnz_output").map_err(io)?;
    for r in rows {
        let bloat = r.bloat_percent.map_or("undefined".to_string(), |b| format!("{b:.4}"));
        writeln!(
            out,
            "{},{},{},{:.4},{},{},{}",
            r.dataset, r.nodes, r.edges, r.sparsity_percent, bloat, r.pp_interim, r.nnz_output
        )
        .map_err(io)?;
    }
    Ok(())
}
