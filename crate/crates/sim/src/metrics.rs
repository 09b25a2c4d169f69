//! Run statistics and their JSON/CSV exports.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::Serialize;

use crate::memsys::McStats;
use crate::neuracore::CoreStats;
use crate::neuramem::MemStats;
use crate::noc::NocStats;

/// Histogram with one-cycle bins.
#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct Histogram {
    pub count: u64,
    pub sum: u64,
    pub min: u64,
    pub max: u64,
    pub bins: BTreeMap<u64, u64>,
}

impl Histogram {
    pub fn record(&mut self, v: u64) {
        if self.count == 0 || v < self.min {
            self.min = v;
        }
        self.max = self.max.max(v);
        self.count += 1;
        self.sum += v;
        *self.bins.entry(v).or_insert(0) += 1;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum as f64 / self.count as f64
        }
    }

    /// `value,count` rows in ascending value order.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "cycles,count")?;
        for (v, n) in &self.bins {
            writeln!(out, "{v},{n}")?;
        }
        Ok(())
    }
}

/// One sample of the occupancy/in-flight trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceSample {
    pub cycle: u64,
    pub hashpad_occupancy: u64,
    pub mc_inflight: u64,
    pub noc_in_flight: u64,
}

pub fn write_trace_csv<W: Write>(trace: &[TraceSample], mut out: W) -> io::Result<()> {
    writeln!(out, "cycle,hashpad_occupancy,mc_inflight,noc_in_flight")?;
    for s in trace {
        writeln!(out, "{},{},{},{}", s.cycle, s.hashpad_occupancy, s.mc_inflight, s.noc_in_flight)?;
    }
    Ok(())
}

/// Core-by-mem matrix of HACC counts, one row per core.
pub fn write_heatmap_csv<W: Write>(rows: &[Vec<u64>], mut out: W) -> io::Result<()> {
    let cols = rows.first().map_or(0, Vec::len);
    let header: Vec<String> = (0..cols).map(|m| format!("mem{m}")).collect();
    writeln!(out, "core,{}", header.join(","))?;
    for (c, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        writeln!(out, "{c},{}", cells.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    pub preset: String,
    pub mmh_width: u32,
    pub eviction: String,
    pub mapping: String,
    pub seed: u64,

    pub total_cycles: u64,
    pub frequency_ghz: f64,
    /// Two operations per partial product.
    pub gops: f64,

    pub expected_pp_count: u64,
    pub expected_output_nnz: u64,
    pub mmh_dispatched: u64,
    pub haccs_emitted: u64,
    pub haccs_received: u64,
    pub haccs_executed: u64,
    pub evictions: u64,
    pub writes_landed: u64,
    pub sum_hacc_data: f64,
    pub sum_evicted: f64,

    pub mmh_cpi: Histogram,
    pub hacc_cpi: Histogram,

    /// Highest single-pad occupancy.
    pub peak_occupancy: u64,
    /// Highest chip-wide occupancy at a cycle boundary.
    pub peak_total_occupancy: u64,
    /// Chip-wide occupancy averaged over all cycles.
    pub mean_occupancy: f64,
    pub mean_mc_inflight: f64,

    pub cores: Vec<CoreStats>,
    pub mems: Vec<MemStats>,
    pub controllers: Vec<McStats>,
    pub noc: NocStats,
    pub router_forwarded: Vec<u64>,
    /// HACCs per (core, mem).
    pub heatmap: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn mean_mmh_cpi(&self) -> f64 {
        self.mmh_cpi.mean()
    }

    pub fn mean_hacc_cpi(&self) -> f64 {
        self.hacc_cpi.mean()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins_by_cycle() {
        let mut h = Histogram::default();
        for v in [3, 5, 3, 9] {
            h.record(v);
        }
        assert_eq!((h.count, h.min, h.max, h.sum), (4, 3, 9, 20));
        assert_eq!(h.bins.get(&3), Some(&2));
        assert_eq!(h.mean(), 5.0);
        let mut csv = Vec::new();
        h.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "cycles,count\n3,2\n5,1\n9,1\n");
    }

    #[test]
    fn heatmap_csv_layout() {
        let mut out = Vec::new();
        write_heatmap_csv(&[vec![1, 2], vec![0, 5]], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "core,mem0,mem1\n0,1,2\n1,0,5\n");
    }
}
