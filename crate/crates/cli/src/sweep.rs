//! Cross-product sweeps over presets, mapping policies and eviction modes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::anyhow;
use clap::Args;
use neurachip_core::isa::MmhWidth;
use neurachip_core::mapping::MappingKind;
use neurachip_sim::{EvictionMode, MetricsReport, RunOptions, TileConfig};
use rayon::prelude::*;

use crate::error::{CmdResult, Failure};
use crate::output::{self, RunKind};

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub a: PathBuf,
    /// Right operand; defaults to A.
    #[arg(long)]
    pub b: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "tile4,tile16,tile64")]
    pub presets: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "ring,prime-modular,random-table,drhm-lower,drhm-upper")]
    pub mappings: Vec<MappingKind>,
    #[arg(long, value_delimiter = ',', default_value = "rolling,barrier")]
    pub evictions: Vec<EvictionMode>,
    #[arg(long, default_value = "4")]
    pub width: MmhWidth,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Simulations run at once; output does not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output root. Defaults to $NEURACHIP_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub preset: String,
    pub mapping: MappingKind,
    pub eviction: EvictionMode,
    pub metrics: MetricsReport,
}

pub const CSV_HEADER: &str = "preset,mapping,eviction,mmh_width,seed,total_cycles,gops,mean_mmh_cpi,mean_hacc_cpi,peak_occupancy,mean_occupancy,haccs,evictions,noc_mean_latency,misroutes";

pub fn render_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        let latency = if m.noc.delivered == 0 {
            0.0
        } else {
            m.noc.latency_sum as f64 / m.noc.delivered as f64
        };
        writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{:.6},{},{},{:.6},{}",
            r.preset,
            r.mapping,
            r.eviction,
            m.mmh_width,
            m.seed,
            m.total_cycles,
            m.gops,
            m.mean_mmh_cpi(),
            m.mean_hacc_cpi(),
            m.peak_occupancy,
            m.mean_occupancy,
            m.haccs_emitted,
            m.evictions,
            latency,
            m.noc.misroutes
        )
        .expect("string write");
    }
    s
}

/// Runs the sweep, writes one run directory per combination plus
/// `sweep.csv`, and returns the rows sorted by (preset, mapping, eviction).
pub fn cmd_sweep(args: &SweepArgs) -> CmdResult<Vec<SweepRow>> {
    let mut combos = Vec::new();
    for preset in &args.presets {
        let base = TileConfig::preset(preset).map_err(Failure::validation)?;
        for &mapping in &args.mappings {
            for &eviction in &args.evictions {
                let cfg = TileConfig {
                    mapping,
                    eviction,
                    mmh_width: args.width,
                    ..base.clone()
                };
                cfg.validate().map_err(|e| Failure::Validation(anyhow!("{preset}: {e}")))?;
                combos.push((preset.clone(), cfg));
            }
        }
    }
    combos.sort_by(|x, y| (&x.0, x.1.mapping.name(), x.1.eviction.name()).cmp(&(&y.0, y.1.mapping.name(), y.1.eviction.name())));

    let mut inputs = BTreeMap::new();
    inputs.insert("a".to_string(), args.a.clone());
    if let Some(b) = &args.b {
        inputs.insert("b".to_string(), b.clone());
    }
    let opts = RunOptions {
        seed: args.seed,
        threads: 1,
    };
    let one = |cfg: &TileConfig| crate::simulate(RunKind::Spgemm, &inputs, cfg, &opts);
    let done: Vec<CmdResult<crate::Simulated>> = if args.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build()
            .map_err(|e| Failure::Validation(anyhow!("starting {} jobs: {e}", args.jobs)))?;
        pool.install(|| combos.par_iter().map(|(_, cfg)| one(cfg)).collect())
    } else {
        combos.iter().map(|(_, cfg)| one(cfg)).collect()
    };

    let root = output::out_root(args.out.as_deref());
    let mut rows = Vec::with_capacity(combos.len());
    for ((preset, cfg), done) in combos.iter().zip(done) {
        let crate::Simulated { files, mut reports } = done?;
        let manifest = crate::manifest(RunKind::Spgemm, &inputs, cfg, args.seed, &files)?;
        let dir = root.join(crate::run_label(cfg, args.seed));
        files.write(&dir, &manifest).map_err(|e| Failure::Validation(anyhow!("writing {}: {e}", dir.display())))?;
        let metrics = reports.pop().expect("one stage");
        rows.push(SweepRow {
            preset: preset.clone(),
            mapping: cfg.mapping,
            eviction: cfg.eviction,
            metrics,
        });
    }
    let csv = render_csv(&rows);
    let path = root.join("sweep.csv");
    fs::create_dir_all(&root).and_then(|_| fs::write(&path, &csv)).map_err(|e| Failure::Validation(anyhow!("writing {}: {e}", path.display())))?;
    print!("{csv}");
    Ok(rows)
}
