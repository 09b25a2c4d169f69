//! Compile, simulate and check against the functional oracle.

use std::path::Path;

use anyhow::{anyhow, Context};
use neurachip_core::compiler::{compile_spgemm_with, CompileOptions, CompiledWorkload};
use neurachip_core::sparse::{bloat_analysis, load_matrix_market, oracle_spgemm, relu, Layout, SparseMatrix};
use neurachip_sim::{run, RunOptions, RunResult, TileConfig};

use crate::error::{CmdResult, Failure};

pub fn load(path: &Path, layout: Layout) -> CmdResult<SparseMatrix<f64>> {
    load_matrix_market(path, layout)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Validation)
}

pub fn compile(a: &SparseMatrix<f64>, b: &SparseMatrix<f64>, cfg: &TileConfig) -> CmdResult<CompiledWorkload> {
    let opts = CompileOptions {
        width: cfg.mmh_width,
        ..Default::default()
    };
    compile_spgemm_with(a, b, opts).map_err(Failure::validation)
}

/// One simulated SpGEMM.
#[derive(Debug, Clone)]
pub struct SpgemmRun {
    pub workload: CompiledWorkload,
    pub result: RunResult,
}

/// Checks a finished run against the oracle and the conservation laws.
pub fn verify(a: &SparseMatrix<f64>, b: &SparseMatrix<f64>, r: &RunResult) -> CmdResult {
    let expected = oracle_spgemm(a, b).map_err(Failure::validation)?;
    let bloat = bloat_analysis(a, b).map_err(Failure::validation)?;
    let m = &r.metrics;
    let fail = |msg: String| Err(Failure::Integrity(anyhow!(msg)));
    if r.output != expected {
        let wrong = expected
            .triplets()
            .find(|&(i, j, v)| r.output.get(i, j) != Some(v))
            .map_or("extra output entries".to_string(), |(i, j, v)| {
                format!("C[{i},{j}] = {:?}, expected {v}", r.output.get(i, j))
            });
        return fail(format!("simulated output differs from the oracle: {wrong}"));
    }
    if m.haccs_emitted != bloat.pp_interim || m.haccs_received != bloat.pp_interim {
        return fail(format!(
            "HACCs emitted {} / received {} but the operands generate {} partial products",
            m.haccs_emitted, m.haccs_received, bloat.pp_interim
        ));
    }
    if m.evictions != expected.nnz() as u64 {
        return fail(format!("{} evictions for {} output nonzeros", m.evictions, expected.nnz()));
    }
    if m.sum_evicted != m.sum_hacc_data {
        return fail(format!("evicted sum {} differs from HACC payload sum {}", m.sum_evicted, m.sum_hacc_data));
    }
    if m.noc.injected != m.noc.delivered {
        return fail(format!("{} packets injected, {} delivered", m.noc.injected, m.noc.delivered));
    }
    Ok(())
}

pub fn simulate_spgemm(a: &SparseMatrix<f64>, b: &SparseMatrix<f64>, cfg: &TileConfig, opts: &RunOptions) -> CmdResult<SpgemmRun> {
    let workload = compile(a, b, cfg)?;
    let result = run(&workload, cfg, opts)?;
    verify(a, b, &result)?;
    Ok(SpgemmRun { workload, result })
}

/// A GCN layer `relu(A X W)`: the aggregation runs first and the combination
/// consumes its simulated output.
#[derive(Debug, Clone)]
pub struct GcnRun {
    pub aggregate: SpgemmRun,
    pub combine: SpgemmRun,
    pub output: SparseMatrix<f64>,
}

pub fn simulate_gcn(
    a: &SparseMatrix<f64>,
    x: &SparseMatrix<f64>,
    w: &SparseMatrix<f64>,
    cfg: &TileConfig,
    opts: &RunOptions,
) -> CmdResult<GcnRun> {
    let aggregate = simulate_spgemm(a, x, cfg, opts)?;
    let p = aggregate.result.output.to_csc();
    let combine = simulate_spgemm(&p, w, cfg, opts)?;
    let output = relu(&combine.result.output);
    let reference = relu(&oracle_spgemm(&oracle_spgemm(a, x).map_err(Failure::validation)?, w).map_err(Failure::validation)?);
    if output != reference {
        return Err(Failure::Integrity(anyhow!("GCN layer output differs from the oracle chain")));
    }
    Ok(GcnRun {
        aggregate,
        combine,
        output,
    })
}
