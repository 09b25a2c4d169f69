use neurachip_core::compiler::{compile_spgemm, compile_spgemm_with, CompileOptions, CompiledWorkload};
use neurachip_core::isa::MmhWidth;
use neurachip_core::mapping::MappingKind;
use neurachip_core::rng::XorShift64Star;
use neurachip_core::sparse::{oracle_spgemm, Layout, SparseMatrix};
use neurachip_sim::{run, EvictionMode, RunOptions, RunResult, SimError, TileConfig};
use proptest::prelude::*;

fn dense(n: usize, m: usize, seed: u64) -> SparseMatrix<f64> {
    let mut rng = XorShift64Star::new(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| (rng.next_below(9) + 1) as f64).collect())
        .collect();
    SparseMatrix::from_dense(&rows, Layout::Csr)
}

fn random(n: usize, m: usize, density: f64, seed: u64) -> SparseMatrix<f64> {
    let mut rng = XorShift64Star::new(seed);
    let mut t = Vec::new();
    for r in 0..n {
        for c in 0..m {
            if (rng.next_below(1_000_000) as f64) < density * 1e6 {
                t.push((r, c, rng.next_below(19) as f64 - 9.0));
            }
        }
    }
    SparseMatrix::from_triplets(n, m, Layout::Csr, t).unwrap()
}

fn run_with(w: &CompiledWorkload, cfg: &TileConfig, opts: &RunOptions) -> RunResult {
    run(w, cfg, opts).unwrap()
}

/// Runs and checks the output against the oracle plus the conservation laws.
fn check(w: &CompiledWorkload, a: &SparseMatrix<f64>, b: &SparseMatrix<f64>, cfg: &TileConfig) -> RunResult {
    let r = run_with(w, cfg, &RunOptions::default());
    assert_eq!(r.output, oracle_spgemm(a, b).unwrap());
    let m = &r.metrics;
    assert_eq!(m.haccs_emitted, w.expected_pp_count);
    assert_eq!(m.haccs_received, w.expected_pp_count);
    assert_eq!(m.haccs_executed, w.expected_pp_count);
    assert_eq!(m.evictions, w.expected_output_nnz);
    assert_eq!(m.writes_landed, w.expected_output_nnz);
    assert_eq!(m.sum_evicted, m.sum_hacc_data);
    assert_eq!(m.noc.injected, m.noc.delivered);
    assert_eq!(m.noc.latency_violations, 0);
    r
}

fn dense_pair(n: usize) -> (SparseMatrix<f64>, SparseMatrix<f64>, CompiledWorkload) {
    let a = dense(n, n, 1);
    let b = dense(n, n, 2);
    let w = compile_spgemm(&a, &b).unwrap();
    (a, b, w)
}

#[test]
fn identity_on_tile4() {
    let i = SparseMatrix::identity(4, Layout::Csr);
    let w = compile_spgemm(&i, &i).unwrap();
    let r = check(&w, &i, &i, &TileConfig::tile4());
    assert_eq!(r.output, i);
    assert_eq!(r.metrics.evictions, 4);
}

#[test]
fn hand_example() {
    let a = SparseMatrix::from_dense(&[vec![1.0, 0.0, 2.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 4.0]], Layout::Csc);
    let b = SparseMatrix::from_dense(&[vec![1.0, 1.0, 0.0], vec![0.0, 2.0, 0.0], vec![5.0, 0.0, 6.0]], Layout::Csr);
    let w = compile_spgemm(&a, &b).unwrap();
    for eviction in EvictionMode::ALL {
        let cfg = TileConfig {
            eviction,
            ..TileConfig::tile4()
        };
        let r = check(&w, &a, &b, &cfg);
        assert_eq!(r.metrics.haccs_emitted, 7);
    }
}

#[test]
fn every_preset_policy_and_mode_matches_oracle() {
    let a = random(24, 20, 0.3, 11);
    let b = random(20, 28, 0.3, 12);
    let w = compile_spgemm(&a, &b).unwrap();
    for base in [TileConfig::tile4(), TileConfig::tile16(), TileConfig::tile64(), TileConfig::tile64_hbm256()] {
        for mapping in MappingKind::ALL {
            for eviction in EvictionMode::ALL {
                let cfg = TileConfig {
                    mapping,
                    eviction,
                    ..base.clone()
                };
                check(&w, &a, &b, &cfg);
            }
        }
    }
}

#[test]
fn every_width_matches_oracle() {
    let a = random(13, 9, 0.5, 3);
    let b = random(9, 11, 0.5, 4);
    for width in MmhWidth::ALL {
        let w = compile_spgemm_with(&a, &b, CompileOptions { width, ..Default::default() }).unwrap();
        let cfg = TileConfig {
            mmh_width: width,
            ..TileConfig::tile16()
        };
        check(&w, &a, &b, &cfg);
    }
}

#[test]
fn width_mismatch_is_rejected() {
    let (_, _, w) = dense_pair(4);
    let cfg = TileConfig {
        mmh_width: MmhWidth::W2,
        ..TileConfig::tile16()
    };
    assert!(run(&w, &cfg, &RunOptions::default()).is_err());
}

#[test]
fn empty_product_finishes() {
    let a = SparseMatrix::from_triplets(4, 4, Layout::Csr, vec![(0, 0, 1.0)]).unwrap();
    let b = SparseMatrix::from_triplets(4, 4, Layout::Csr, vec![(3, 3, 1.0)]).unwrap();
    let w = compile_spgemm(&a, &b).unwrap();
    let r = check(&w, &a, &b, &TileConfig::tile4());
    assert_eq!(r.metrics.evictions, 0);
}

#[test]
fn repeated_and_threaded_runs_are_identical() {
    let a = random(32, 32, 0.4, 5);
    let b = random(32, 32, 0.4, 6);
    let w = compile_spgemm(&a, &b).unwrap();
    for mapping in [MappingKind::DrhmLower, MappingKind::RandomTable] {
        let cfg = TileConfig {
            mapping,
            ..TileConfig::tile16()
        };
        let opts = RunOptions { seed: 42, threads: 1 };
        let first = run_with(&w, &cfg, &opts).metrics.to_json();
        for _ in 0..2 {
            assert_eq!(run_with(&w, &cfg, &opts).metrics.to_json(), first);
        }
        let threaded = RunOptions { seed: 42, threads: 4 };
        assert_eq!(run_with(&w, &cfg, &threaded).metrics.to_json(), first);
    }
}

#[test]
fn seed_only_moves_seeded_policies() {
    let (_, _, w) = dense_pair(16);
    let ring = TileConfig {
        mapping: MappingKind::Ring,
        ..TileConfig::tile16()
    };
    let a = run_with(&w, &ring, &RunOptions { seed: 1, threads: 1 }).metrics;
    let b = run_with(&w, &ring, &RunOptions { seed: 2, threads: 1 }).metrics;
    assert_eq!(a.total_cycles, b.total_cycles);
    assert_eq!(a.heatmap, b.heatmap);
    let drhm = TileConfig {
        mapping: MappingKind::DrhmLower,
        ..TileConfig::tile16()
    };
    let a = run_with(&w, &drhm, &RunOptions { seed: 1, threads: 1 }).metrics;
    let b = run_with(&w, &drhm, &RunOptions { seed: 2, threads: 1 }).metrics;
    assert_ne!(a.heatmap, b.heatmap);
}

#[test]
fn heatmap_rows_sum_to_core_haccs() {
    let (a, b, w) = dense_pair(12);
    let r = check(&w, &a, &b, &TileConfig::tile16());
    let m = &r.metrics;
    for (row, core) in m.heatmap.iter().zip(&m.cores) {
        assert_eq!(row.iter().sum::<u64>(), core.haccs);
    }
    let per_mem: Vec<u64> = (0..m.mems.len()).map(|j| m.heatmap.iter().map(|row| row[j]).sum()).collect();
    let received: Vec<u64> = m.mems.iter().map(|s| s.received).collect();
    assert_eq!(per_mem, received);
}

#[test]
fn every_component_accounts_for_every_cycle() {
    let (a, b, w) = dense_pair(12);
    for eviction in EvictionMode::ALL {
        let cfg = TileConfig {
            eviction,
            ..TileConfig::tile16()
        };
        let m = check(&w, &a, &b, &cfg).metrics;
        let t = m.total_cycles;
        for c in &m.cores {
            assert_eq!(c.busy_cycles + c.stall_cycles + c.idle_cycles, t);
        }
        for s in &m.mems {
            assert_eq!(s.busy_cycles + s.stall_cycles + s.idle_cycles, t);
        }
        for s in &m.controllers {
            assert_eq!(s.busy_cycles + s.stall_cycles + s.idle_cycles, t);
        }
    }
}

#[test]
fn single_instruction_cpi_is_one_traversal() {
    let a = SparseMatrix::from_triplets(1, 1, Layout::Csc, vec![(0, 0, 3.0)]).unwrap();
    let b = SparseMatrix::from_triplets(1, 1, Layout::Csr, vec![(0, 0, 5.0)]).unwrap();
    let w = compile_spgemm(&a, &b).unwrap();
    assert_eq!(w.instructions.len(), 1);
    let m = check(&w, &a, &b, &TileConfig::tile4()).metrics;
    assert_eq!(m.mmh_cpi.count, 1);
    assert!(m.mmh_cpi.min > 0);
    assert!(m.mmh_cpi.max < m.total_cycles);
}

#[test]
fn tile16_is_no_slower_than_tile4() {
    let (a, b, w) = dense_pair(8);
    let t4 = check(&w, &a, &b, &TileConfig::tile4()).metrics.total_cycles;
    let t16 = check(&w, &a, &b, &TileConfig::tile16()).metrics.total_cycles;
    assert!(t16 <= t4, "tile16 {t16} > tile4 {t4}");
}

#[test]
fn barrier_holds_more_lines_and_longer() {
    let (a, b, w) = dense_pair(8);
    assert_eq!(EvictionMode::ALL, [EvictionMode::Rolling, EvictionMode::Barrier]);
    let [rolling, barrier] = EvictionMode::ALL.map(|eviction| {
        let cfg = TileConfig {
            eviction,
            ..TileConfig::tile16()
        };
        check(&w, &a, &b, &cfg).metrics
    });
    assert!(barrier.peak_occupancy >= rolling.peak_occupancy);
    assert!(rolling.mean_occupancy < barrier.mean_occupancy);
    assert!(rolling.mean_hacc_cpi() < barrier.mean_hacc_cpi());
}

#[test]
fn wider_mmh_takes_longer_per_instruction() {
    let a = dense(16, 16, 1);
    let b = dense(16, 16, 2);
    let cpi: Vec<f64> = MmhWidth::ALL
        .iter()
        .map(|&width| {
            let w = compile_spgemm_with(&a, &b, CompileOptions { width, ..Default::default() }).unwrap();
            let cfg = TileConfig {
                mmh_width: width,
                ..TileConfig::tile16()
            };
            check(&w, &a, &b, &cfg).metrics.mean_mmh_cpi()
        })
        .collect();
    assert!(cpi.windows(2).all(|p| p[0] < p[1]), "{cpi:?}");
}

#[test]
fn watchdog_reports_stuck_state() {
    let (_, _, w) = dense_pair(8);
    let cfg = TileConfig {
        watchdog_cycles: 1,
        ..TileConfig::tile4()
    };
    match run(&w, &cfg, &RunOptions::default()) {
        Err(SimError::Watchdog { state, .. }) => assert!(!state.is_empty()),
        other => panic!("expected a watchdog trip, got {:?}", other.map(|r| r.metrics.total_cycles)),
    }
}

#[test]
fn trace_covers_the_run() {
    let (a, b, w) = dense_pair(8);
    let r = check(&w, &a, &b, &TileConfig::tile16());
    assert!(!r.trace.is_empty());
    assert!(r.trace.windows(2).all(|p| p[0].cycle < p[1].cycle));
    assert!(r.trace.last().unwrap().cycle <= r.metrics.total_cycles);
    assert_eq!(r.trace.iter().map(|s| s.hashpad_occupancy).max().unwrap(), r.metrics.peak_total_occupancy);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_pairs_match_oracle(
        m in 1usize..20,
        k in 1usize..20,
        n in 1usize..20,
        density in 0.05f64..1.0,
        seed in 0u64..1000,
        preset in 0usize..3,
        eviction in 0usize..2,
        mapping in 0usize..5,
    ) {
        let a = random(m, k, density, seed);
        let b = random(k, n, density, seed + 1);
        let w = compile_spgemm(&a, &b).unwrap();
        let base = [TileConfig::tile4(), TileConfig::tile16(), TileConfig::tile64()][preset].clone();
        let cfg = TileConfig {
            eviction: EvictionMode::ALL[eviction],
            mapping: MappingKind::ALL[mapping],
            ..base
        };
        check(&w, &a, &b, &cfg);
    }
}
