//! Hardware configuration and the Tile-4/16/64 presets.

use std::fmt;
use std::str::FromStr;

use neurachip_core::isa::MmhWidth;
use neurachip_core::mapping::MappingKind;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("unknown preset '{0}' (expected tile4, tile16, tile64 or tile64-hbm256)")]
    UnknownPreset(String),
    #[error("unknown config field '{0}'")]
    UnknownField(String),
    #[error("field '{field}': {message}")]
    Invalid { field: String, message: String },
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvictionMode {
    /// Lines leave the HashPad the moment their counter reaches zero.
    #[default]
    Rolling,
    /// Completed lines are held until the next row-block barrier.
    Barrier,
}

impl EvictionMode {
    pub const ALL: [EvictionMode; 2] = [EvictionMode::Rolling, EvictionMode::Barrier];

    pub fn name(self) -> &'static str {
        match self {
            EvictionMode::Rolling => "rolling",
            EvictionMode::Barrier => "barrier",
        }
    }
}

impl fmt::Display for EvictionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvictionMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rolling" | "re" | "hacc-re" => Ok(EvictionMode::Rolling),
            "barrier" | "be" | "hacc-be" => Ok(EvictionMode::Barrier),
            other => Err(invalid("eviction", format!("'{other}' is not rolling or barrier"))),
        }
    }
}

/// Parametric HBM channel, one per tile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelModel {
    pub bandwidth_bytes_per_cycle: u32,
    pub base_latency: u32,
    pub max_inflight: u32,
}

/// Full knob set of one simulated chip.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TileConfig {
    pub name: String,
    pub tiles: u32,
    pub cores_per_tile: u32,
    pub mems_per_tile: u32,
    pub routers_per_tile: u32,

    pub pipelines: u32,
    /// 128-bit registers per pipeline; the core pools them.
    pub regs_per_pipeline: u32,
    pub multipliers: u32,
    pub addr_generators: u32,
    pub ports: u32,
    /// Instructions a core can hold before it is handed to a pipeline.
    pub instr_buffer: u32,

    /// Hash-lines per NeuraMem.
    pub hashlines: u32,
    pub engines: u32,
    /// TAG slots probed per engine per cycle on insertion.
    pub comparators: u32,
    pub accumulators: u32,
    /// Total HashPad capacity as listed for the preset, in MB. Reporting only.
    pub hashpad_mb: f64,

    /// Packets per port buffer (component egress and NeuraMem ingress).
    pub port_buffer: u32,
    /// Packets per router input link.
    pub router_buffer: u32,
    pub hop_latency: u32,

    pub mc_read_buffer: u32,
    pub mc_write_buffer: u32,
    pub coalesce_window: u32,
    pub line_bytes: u32,
    pub channel: ChannelModel,

    pub decode_latency: u32,
    pub dispatch_width: u32,
    /// Row blocks that may have instructions in flight at once.
    pub max_open_row_blocks: u32,

    #[serde(serialize_with = "as_display")]
    pub mmh_width: MmhWidth,
    pub eviction: EvictionMode,
    #[serde(serialize_with = "as_display")]
    pub mapping: MappingKind,
    pub drhm_k: u32,
    pub frequency_ghz: f64,

    pub watchdog_cycles: u64,
    /// Sample period of the occupancy and in-flight traces.
    pub trace_interval: u64,
}

fn as_display<S: serde::Serializer, T: fmt::Display>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

pub const PRESET_NAMES: [&str; 4] = ["tile4", "tile16", "tile64", "tile64-hbm256"];

impl TileConfig {
    fn base(name: &str) -> Self {
        Self {
            name: name.to_string(),
            tiles: 8,
            cores_per_tile: 1,
            mems_per_tile: 1,
            routers_per_tile: 4,
            pipelines: 2,
            regs_per_pipeline: 4,
            multipliers: 2,
            addr_generators: 1,
            ports: 4,
            instr_buffer: 4,
            hashlines: 4096,
            engines: 2,
            comparators: 2,
            accumulators: 128,
            hashpad_mb: 0.75,
            port_buffer: 4,
            router_buffer: 4,
            hop_latency: 1,
            mc_read_buffer: 64,
            mc_write_buffer: 64,
            coalesce_window: 16,
            line_bytes: 64,
            // 128 GB/s over 8 channels at 1 GHz.
            channel: ChannelModel {
                bandwidth_bytes_per_cycle: 16,
                base_latency: 40,
                max_inflight: 16,
            },
            decode_latency: 1,
            dispatch_width: 1,
            max_open_row_blocks: 4,
            mmh_width: MmhWidth::W4,
            eviction: EvictionMode::Rolling,
            mapping: MappingKind::DrhmLower,
            drhm_k: 16,
            frequency_ghz: 1.0,
            watchdog_cycles: 100_000,
            trace_interval: 1,
        }
    }

    pub fn tile4() -> Self {
        Self::base("tile4")
    }

    pub fn tile16() -> Self {
        Self {
            cores_per_tile: 4,
            mems_per_tile: 4,
            routers_per_tile: 8,
            pipelines: 4,
            regs_per_pipeline: 8,
            multipliers: 4,
            addr_generators: 2,
            hashlines: 2048,
            engines: 4,
            comparators: 4,
            accumulators: 256,
            hashpad_mb: 3.0,
            ..Self::base("tile16")
        }
    }

    pub fn tile64() -> Self {
        Self {
            cores_per_tile: 16,
            mems_per_tile: 16,
            routers_per_tile: 32,
            pipelines: 8,
            regs_per_pipeline: 16,
            multipliers: 8,
            addr_generators: 2,
            hashlines: 2048,
            engines: 8,
            comparators: 8,
            accumulators: 512,
            hashpad_mb: 12.0,
            ..Self::base("tile64")
        }
    }

    /// Tile-64 on dual-stacked HBM (256 GB/s).
    pub fn tile64_hbm256() -> Self {
        let mut c = Self::tile64();
        c.name = "tile64-hbm256".into();
        c.channel.bandwidth_bytes_per_cycle *= 2;
        c
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "tile4" | "tile-4" => Ok(Self::tile4()),
            "tile16" | "tile-16" => Ok(Self::tile16()),
            "tile64" | "tile-64" => Ok(Self::tile64()),
            "tile64-hbm256" | "tile-64-hbm256" => Ok(Self::tile64_hbm256()),
            _ => Err(ConfigError::UnknownPreset(name.to_string())),
        }
    }

    pub fn total_cores(&self) -> u32 {
        self.tiles * self.cores_per_tile
    }

    pub fn total_mems(&self) -> u32 {
        self.tiles * self.mems_per_tile
    }

    pub fn total_routers(&self) -> u32 {
        self.tiles * self.routers_per_tile
    }

    pub fn total_pipelines(&self) -> u32 {
        self.total_cores() * self.pipelines
    }

    pub fn register_pool(&self) -> u32 {
        self.pipelines * self.regs_per_pipeline
    }

    pub fn total_hash_engines(&self) -> u32 {
        self.total_mems() * self.engines
    }

    pub fn total_comparators(&self) -> u32 {
        self.total_hash_engines() * self.comparators
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim();
        let value = value.trim();
        fn num<T: FromStr>(field: &str, v: &str) -> Result<T, ConfigError> {
            v.parse().map_err(|_| invalid(field, format!("'{v}' is not a valid number")))
        }
        match key {
            "name" => self.name = value.to_string(),
            "tiles" => self.tiles = num(key, value)?,
            "cores_per_tile" => self.cores_per_tile = num(key, value)?,
            "mems_per_tile" => self.mems_per_tile = num(key, value)?,
            "routers_per_tile" => self.routers_per_tile = num(key, value)?,
            "pipelines" => self.pipelines = num(key, value)?,
            "regs_per_pipeline" => self.regs_per_pipeline = num(key, value)?,
            "multipliers" => self.multipliers = num(key, value)?,
            "addr_generators" => self.addr_generators = num(key, value)?,
            "ports" => self.ports = num(key, value)?,
            "instr_buffer" => self.instr_buffer = num(key, value)?,
            "hashlines" => self.hashlines = num(key, value)?,
            "engines" => self.engines = num(key, value)?,
            "comparators" => self.comparators = num(key, value)?,
            "accumulators" => self.accumulators = num(key, value)?,
            "hashpad_mb" => self.hashpad_mb = num(key, value)?,
            "port_buffer" => self.port_buffer = num(key, value)?,
            "router_buffer" => self.router_buffer = num(key, value)?,
            "hop_latency" => self.hop_latency = num(key, value)?,
            "mc_read_buffer" => self.mc_read_buffer = num(key, value)?,
            "mc_write_buffer" => self.mc_write_buffer = num(key, value)?,
            "coalesce_window" => self.coalesce_window = num(key, value)?,
            "line_bytes" => self.line_bytes = num(key, value)?,
            "bandwidth_bytes_per_cycle" => self.channel.bandwidth_bytes_per_cycle = num(key, value)?,
            "base_latency" => self.channel.base_latency = num(key, value)?,
            "max_inflight" => self.channel.max_inflight = num(key, value)?,
            "decode_latency" => self.decode_latency = num(key, value)?,
            "dispatch_width" => self.dispatch_width = num(key, value)?,
            "max_open_row_blocks" => self.max_open_row_blocks = num(key, value)?,
            "mmh_width" => {
                self.mmh_width = MmhWidth::from_str(value).map_err(|e| invalid(key, e.to_string()))?;
            }
            "eviction" => self.eviction = value.parse()?,
            "mapping" => self.mapping = value.parse().map_err(|e: neurachip_core::mapping::MappingError| invalid(key, e.to_string()))?,
            "drhm_k" => self.drhm_k = num(key, value)?,
            "frequency_ghz" => self.frequency_ghz = num(key, value)?,
            "watchdog_cycles" => self.watchdog_cycles = num(key, value)?,
            "trace_interval" => self.trace_interval = num(key, value)?,
            other => return Err(ConfigError::UnknownField(other.to_string())),
        }
        Ok(())
    }

    /// Parses a `key = value` config file. A `preset` key, if present, must
    /// come first and selects the starting point; otherwise `base` is used.
    /// Blank lines and `#` comments are ignored.
    pub fn parse_overrides(text: &str, base: TileConfig) -> Result<TileConfig, ConfigError> {
        let mut cfg = base;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            if k.trim() == "preset" {
                cfg = TileConfig::preset(v)?;
            } else {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks internal consistency; errors name the offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("tiles", self.tiles),
            ("cores_per_tile", self.cores_per_tile),
            ("mems_per_tile", self.mems_per_tile),
            ("routers_per_tile", self.routers_per_tile),
            ("pipelines", self.pipelines),
            ("regs_per_pipeline", self.regs_per_pipeline),
            ("multipliers", self.multipliers),
            ("addr_generators", self.addr_generators),
            ("ports", self.ports),
            ("instr_buffer", self.instr_buffer),
            ("hashlines", self.hashlines),
            ("engines", self.engines),
            ("comparators", self.comparators),
            ("port_buffer", self.port_buffer),
            ("mc_read_buffer", self.mc_read_buffer),
            ("mc_write_buffer", self.mc_write_buffer),
            ("coalesce_window", self.coalesce_window),
            ("bandwidth_bytes_per_cycle", self.channel.bandwidth_bytes_per_cycle),
            ("max_inflight", self.channel.max_inflight),
            ("hop_latency", self.hop_latency),
            ("decode_latency", self.decode_latency),
            ("dispatch_width", self.dispatch_width),
            ("max_open_row_blocks", self.max_open_row_blocks),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        if self.router_buffer < 2 {
            return Err(invalid("router_buffer", "must be at least 2 for bubble flow control"));
        }
        if self.ports > 8 {
            return Err(invalid("ports", "at most 8 ports are supported"));
        }
        if !self.hashlines.is_power_of_two() {
            return Err(invalid("hashlines", "must be a power of two"));
        }
        if !self.engines.is_power_of_two() || self.engines > self.hashlines {
            return Err(invalid("engines", "must be a power of two no larger than hashlines"));
        }
        if self.line_bytes < 16 || !self.line_bytes.is_power_of_two() {
            return Err(invalid("line_bytes", "must be a power of two of at least 16"));
        }
        if self.drhm_k >= 32 {
            return Err(invalid("drhm_k", "must be below 32"));
        }
        if !(self.frequency_ghz > 0.0) {
            return Err(invalid("frequency_ghz", "must be positive"));
        }
        if self.watchdog_cycles == 0 || self.trace_interval == 0 {
            return Err(invalid("watchdog_cycles", "watchdog and trace interval must be positive"));
        }
        let need = registers_needed(self.mmh_width);
        if need > self.register_pool() {
            return Err(invalid(
                "mmh_width",
                format!(
                    "MMH{} needs {need} registers but a core has {} ({} pipelines x {})",
                    self.mmh_width,
                    self.register_pool(),
                    self.pipelines,
                    self.regs_per_pipeline
                ),
            ));
        }
        Ok(())
    }

    /// `key = value` rendering that [`parse_overrides`](Self::parse_overrides)
    /// reads back to an equal config.
    pub fn to_config_text(&self) -> String {
        let c = &self.channel;
        let rows: Vec<(&str, String)> = vec![
            ("name", self.name.clone()),
            ("tiles", self.tiles.to_string()),
            ("cores_per_tile", self.cores_per_tile.to_string()),
            ("mems_per_tile", self.mems_per_tile.to_string()),
            ("routers_per_tile", self.routers_per_tile.to_string()),
            ("pipelines", self.pipelines.to_string()),
            ("regs_per_pipeline", self.regs_per_pipeline.to_string()),
            ("multipliers", self.multipliers.to_string()),
            ("addr_generators", self.addr_generators.to_string()),
            ("ports", self.ports.to_string()),
            ("instr_buffer", self.instr_buffer.to_string()),
            ("hashlines", self.hashlines.to_string()),
            ("engines", self.engines.to_string()),
            ("comparators", self.comparators.to_string()),
            ("accumulators", self.accumulators.to_string()),
            ("hashpad_mb", self.hashpad_mb.to_string()),
            ("port_buffer", self.port_buffer.to_string()),
            ("router_buffer", self.router_buffer.to_string()),
            ("hop_latency", self.hop_latency.to_string()),
            ("mc_read_buffer", self.mc_read_buffer.to_string()),
            ("mc_write_buffer", self.mc_write_buffer.to_string()),
            ("coalesce_window", self.coalesce_window.to_string()),
            ("line_bytes", self.line_bytes.to_string()),
            ("bandwidth_bytes_per_cycle", c.bandwidth_bytes_per_cycle.to_string()),
            ("base_latency", c.base_latency.to_string()),
            ("max_inflight", c.max_inflight.to_string()),
            ("decode_latency", self.decode_latency.to_string()),
            ("dispatch_width", self.dispatch_width.to_string()),
            ("max_open_row_blocks", self.max_open_row_blocks.to_string()),
            ("mmh_width", self.mmh_width.to_string()),
            ("eviction", self.eviction.to_string()),
            ("mapping", self.mapping.to_string()),
            ("drhm_k", self.drhm_k.to_string()),
            ("frequency_ghz", self.frequency_ghz.to_string()),
            ("watchdog_cycles", self.watchdog_cycles.to_string()),
            ("trace_interval", self.trace_interval.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// 128-bit registers an `MMH` of the given width occupies while in flight:
/// A values (64-bit lanes), B column indices (32-bit), B values (64-bit) and
/// the `width x width` block of 16-bit counters, each rounded up separately.
pub fn registers_needed(width: MmhWidth) -> u32 {
    let w = width.lanes() as u32;
    let regs = |bits: u32| bits.div_ceil(128);
    regs(64 * w) + regs(32 * w) + regs(64 * w) + regs(16 * w * w)
}
