//! Cache hierarchy shape, clocks, bus widths and energy constants.
//!
//! The default configuration models a 35 MB, 14-slice last-level cache:
//! each 2.5 MB slice has 20 ways of 4 banks, each bank holds 4 compute-capable
//! 8 KB arrays of 256 word lines by 256 bit lines. One way per slice is left
//! to the CPU and one is reserved for layer inputs/outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("geometry field `{0}` must be non-zero")]
    Zero(&'static str),
    #[error("reserved ways ({reserved}) must leave at least one compute way out of {ways}")]
    NoComputeWays { reserved: usize, ways: usize },
    #[error("intra-slice bus ({intra} bits) must be four quadrant buses of {quadrant} bits")]
    BusMismatch { intra: usize, quadrant: usize },
    #[error("bit lines per array ({0}) must be a multiple of 64")]
    LaneWidth(usize),
    #[error("calibration field `{0}` must be strictly positive")]
    NonPositive(&'static str),
    #[error("sense-amp cycling speedup must be >= 1, got {0}")]
    Speedup(f64),
    #[error("dram_bound_fraction must lie in (0, 1], got {0}")]
    DramFraction(f64),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// Shape of the simulated cache plus its clock and energy parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub num_slices: usize,
    pub ways_per_slice: usize,
    pub banks_per_way: usize,
    pub arrays_per_bank: usize,
    /// Rows per array; one bit per row per lane.
    pub wordlines_per_array: usize,
    /// Columns per array; each is one SIMD lane.
    pub bitlines_per_array: usize,
    pub reserved_cpu_ways: usize,
    /// Ways holding layer inputs and outputs.
    pub reserved_io_ways: usize,
    pub compute_freq_hz: f64,
    pub access_freq_hz: f64,
    pub intra_slice_bus_bits: usize,
    pub quadrant_bus_bits: usize,
    pub ring_bits_per_cycle: usize,
    /// Energy of one array access cycle (256 bits read or written).
    pub energy_access_pj: f64,
    /// Energy of one array compute cycle across all bit lines.
    pub energy_compute_pj: f64,
    /// Transpose units per slice, each moving one 64-bit column per access cycle.
    pub tmus_per_slice: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            num_slices: 14,
            ways_per_slice: 20,
            banks_per_way: 4,
            arrays_per_bank: 4,
            wordlines_per_array: 256,
            bitlines_per_array: 256,
            reserved_cpu_ways: 1,
            reserved_io_ways: 1,
            compute_freq_hz: 2.5e9,
            access_freq_hz: 4.0e9,
            intra_slice_bus_bits: 256,
            quadrant_bus_bits: 64,
            ring_bits_per_cycle: 256,
            energy_access_pj: 8.6,
            energy_compute_pj: 15.4,
            tmus_per_slice: 2,
        }
    }
}

impl GeometryConfig {
    /// Load a JSON geometry file; absent fields keep their defaults.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: GeometryConfig =
            serde_json::from_str(&text).map_err(|source| GeometryError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same cache with a different slice count (capacity scaling).
    pub fn with_slices(&self, slices: usize) -> Self {
        GeometryConfig {
            num_slices: slices,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let counts = [
            ("num_slices", self.num_slices),
            ("ways_per_slice", self.ways_per_slice),
            ("banks_per_way", self.banks_per_way),
            ("arrays_per_bank", self.arrays_per_bank),
            ("wordlines_per_array", self.wordlines_per_array),
            ("bitlines_per_array", self.bitlines_per_array),
            ("intra_slice_bus_bits", self.intra_slice_bus_bits),
            ("quadrant_bus_bits", self.quadrant_bus_bits),
            ("ring_bits_per_cycle", self.ring_bits_per_cycle),
            ("tmus_per_slice", self.tmus_per_slice),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(GeometryError::Zero(name));
            }
        }
        let reserved = self.reserved_cpu_ways + self.reserved_io_ways;
        if reserved >= self.ways_per_slice {
            return Err(GeometryError::NoComputeWays {
                reserved,
                ways: self.ways_per_slice,
            });
        }
        if self.intra_slice_bus_bits != 4 * self.quadrant_bus_bits {
            return Err(GeometryError::BusMismatch {
                intra: self.intra_slice_bus_bits,
                quadrant: self.quadrant_bus_bits,
            });
        }
        if self.bitlines_per_array % 64 != 0 {
            return Err(GeometryError::LaneWidth(self.bitlines_per_array));
        }
        for (name, v) in [
            ("compute_freq_hz", self.compute_freq_hz),
            ("access_freq_hz", self.access_freq_hz),
            ("energy_access_pj", self.energy_access_pj),
            ("energy_compute_pj", self.energy_compute_pj),
        ] {
            if !(v > 0.0) {
                return Err(GeometryError::NonPositive(name));
            }
        }
        Ok(())
    }

    pub fn arrays_per_way(&self) -> usize {
        self.banks_per_way * self.arrays_per_bank
    }

    pub fn array_bytes(&self) -> usize {
        self.wordlines_per_array * self.bitlines_per_array / 8
    }

    pub fn slice_bytes(&self) -> usize {
        self.ways_per_slice * self.arrays_per_way() * self.array_bytes()
    }

    pub fn total_bytes(&self) -> usize {
        self.num_slices * self.slice_bytes()
    }

    /// Capacity of the reserved input/output way(s) of one slice.
    pub fn io_way_bytes(&self) -> usize {
        self.reserved_io_ways * self.arrays_per_way() * self.array_bytes()
    }

    pub fn compute_ways_per_slice(&self) -> usize {
        self.ways_per_slice - self.reserved_cpu_ways - self.reserved_io_ways
    }

    pub fn compute_arrays_total(&self) -> usize {
        self.num_slices * compute_arrays_per_slice(self)
    }
}

/// Raw bit-line count over every way of every slice, reserved ways included.
pub fn total_compute_lanes(cfg: &GeometryConfig) -> usize {
    cfg.num_slices
        * cfg.ways_per_slice
        * cfg.banks_per_way
        * cfg.arrays_per_bank
        * cfg.bitlines_per_array
}

/// Arrays per slice available for computation once reserved ways are excluded.
pub fn compute_arrays_per_slice(cfg: &GeometryConfig) -> usize {
    cfg.compute_ways_per_slice() * cfg.banks_per_way * cfg.arrays_per_bank
}

/// Which constants drive reduction timing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionModel {
    /// `cycles_reduction_conv` measured for a reduction over
    /// `reduction_reference_channels` lanes, scaled per tree level.
    Scaled,
    /// Sum of lane moves and widening adds from the array microcode.
    Microcode,
}

/// Timing constants that the architecture does not pin down from first
/// principles, plus the data-movement parameters fitted to measured latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostCalibration {
    /// Cycles for one 8-bit multiply accumulated into a 24-bit partial sum.
    pub cycles_per_mac_8bit: u64,
    /// Fixed compute cycles per convolution before its MACs (partial-sum reset).
    pub mac_setup_cycles: u64,
    pub cycles_reduction_conv: u64,
    pub reduction_reference_channels: usize,
    pub reduction_model: ReductionModel,
    pub move_cycles_per_bit: f64,
    pub sense_amp_cycling_speedup: f64,
    /// DRAM-to-cache bytes delivered per access-clock cycle.
    pub dram_filter_bytes_per_cycle: f64,
    /// Share of DRAM transfer time (first-layer input, output spills) left exposed.
    pub dram_bound_fraction: f64,
    /// Access cycles per intra-slice bus transfer while streaming inputs.
    pub input_transfer_cycles: f64,
    /// Access cycles per intra-slice bus transfer while draining outputs.
    pub output_transfer_cycles: f64,
}

impl Default for CostCalibration {
    /// Published compute constants with movement parameters fitted to a
    /// 4.72 ms single-image Inception v3 run on the default geometry and
    /// 302 inferences/s at batch 128 (see `costmodel::calibrate`).
    fn default() -> Self {
        CostCalibration {
            cycles_per_mac_8bit: 236,
            mac_setup_cycles: 0,
            cycles_reduction_conv: 660,
            reduction_reference_channels: 32,
            reduction_model: ReductionModel::Scaled,
            move_cycles_per_bit: 1.0,
            sense_amp_cycling_speedup: 1.0,
            dram_filter_bytes_per_cycle: DEFAULT_DRAM_BYTES_PER_CYCLE,
            dram_bound_fraction: DEFAULT_DRAM_BOUND_FRACTION,
            input_transfer_cycles: DEFAULT_INPUT_TRANSFER_CYCLES,
            output_transfer_cycles: DEFAULT_OUTPUT_TRANSFER_CYCLES,
        }
    }
}

// Frozen output of `costmodel::calibrate` on the built-in Inception v3
// descriptor; `tests/calibration.rs` re-derives them.
pub const DEFAULT_DRAM_BYTES_PER_CYCLE: f64 = 2.764006;
pub const DEFAULT_DRAM_BOUND_FRACTION: f64 = 0.395959;
pub const DEFAULT_INPUT_TRANSFER_CYCLES: f64 = 68.195750;
pub const DEFAULT_OUTPUT_TRANSFER_CYCLES: f64 = 26.949821;

impl CostCalibration {
    /// Constants derived from the array microcode instead of published
    /// measurements: an 8-bit multiply (102 cycles) plus a 24-bit accumulate (25).
    pub fn microcode() -> Self {
        CostCalibration {
            cycles_per_mac_8bit: crate::bitarray::multiply_cycles(8, 8) + crate::bitarray::accumulate_cycles(24),
            mac_setup_cycles: 3,
            reduction_model: ReductionModel::Microcode,
            ..CostCalibration::default()
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cal: CostCalibration =
            serde_json::from_str(&text).map_err(|source| GeometryError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.cycles_per_mac_8bit == 0 {
            return Err(GeometryError::NonPositive("cycles_per_mac_8bit"));
        }
        if self.cycles_reduction_conv == 0 {
            return Err(GeometryError::NonPositive("cycles_reduction_conv"));
        }
        if self.reduction_reference_channels < 2
            || !self.reduction_reference_channels.is_power_of_two()
        {
            return Err(GeometryError::NonPositive("reduction_reference_channels"));
        }
        for (name, v) in [
            ("move_cycles_per_bit", self.move_cycles_per_bit),
            ("dram_filter_bytes_per_cycle", self.dram_filter_bytes_per_cycle),
            ("input_transfer_cycles", self.input_transfer_cycles),
            ("output_transfer_cycles", self.output_transfer_cycles),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(GeometryError::NonPositive(name));
            }
        }
        if !(self.sense_amp_cycling_speedup >= 1.0) {
            return Err(GeometryError::Speedup(self.sense_amp_cycling_speedup));
        }
        if !(self.dram_bound_fraction > 0.0 && self.dram_bound_fraction <= 1.0) {
            return Err(GeometryError::DramFraction(self.dram_bound_fraction));
        }
        Ok(())
    }

    /// Cycles to move `rows` word lines, honoring sense-amp cycling.
    pub fn move_cycles(&self, rows: usize) -> u64 {
        (self.move_cycles_per_bit * rows as f64 / self.sense_amp_cycling_speedup - 1e-9).ceil()
            as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_lane_count() {
        assert_eq!(total_compute_lanes(&GeometryConfig::default()), 1_146_880);
    }

    #[test]
    fn single_array_lane_count() {
        let cfg = GeometryConfig {
            num_slices: 1,
            ways_per_slice: 1,
            banks_per_way: 1,
            arrays_per_bank: 1,
            reserved_cpu_ways: 0,
            reserved_io_ways: 0,
            ..GeometryConfig::default()
        };
        assert_eq!(total_compute_lanes(&cfg), 256);
    }

    #[test]
    fn larger_cache_lane_count() {
        let cfg = GeometryConfig::default().with_slices(18);
        assert_eq!(total_compute_lanes(&cfg), 18 * 20 * 4 * 4 * 256);
        assert_eq!(total_compute_lanes(&cfg), 1_474_560);
    }

    #[test]
    fn compute_arrays() {
        let cfg = GeometryConfig::default();
        assert_eq!(compute_arrays_per_slice(&cfg), 288);
        let open = GeometryConfig {
            reserved_cpu_ways: 0,
            reserved_io_ways: 0,
            ..cfg.clone()
        };
        assert_eq!(compute_arrays_per_slice(&open), 320);
        let toy = GeometryConfig {
            ways_per_slice: 3,
            reserved_cpu_ways: 1,
            reserved_io_ways: 1,
            ..cfg
        };
        assert_eq!(compute_arrays_per_slice(&toy), 16);
    }

    #[test]
    fn capacity_identity() {
        let cfg = GeometryConfig::default();
        assert_eq!(cfg.array_bytes(), 8 * 1024);
        assert_eq!(cfg.slice_bytes(), 2560 * 1024);
        assert_eq!(cfg.total_bytes(), 35 * 1024 * 1024);
        assert_eq!(cfg.io_way_bytes(), 128 * 1024);
    }

    #[test]
    fn lanes_scale_with_slices() {
        let cfg = GeometryConfig::default();
        assert_eq!(
            total_compute_lanes(&cfg.with_slices(28)),
            2 * total_compute_lanes(&cfg)
        );
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut cfg = GeometryConfig::default();
        cfg.reserved_io_ways = 19;
        assert!(matches!(cfg.validate(), Err(GeometryError::NoComputeWays { .. })));
        let mut cfg = GeometryConfig::default();
        cfg.quadrant_bus_bits = 32;
        assert!(matches!(cfg.validate(), Err(GeometryError::BusMismatch { .. })));
        let mut cfg = GeometryConfig::default();
        cfg.banks_per_way = 0;
        assert!(matches!(cfg.validate(), Err(GeometryError::Zero("banks_per_way"))));
    }

    #[test]
    fn partial_json_keeps_defaults() {
        let cfg: GeometryConfig = serde_json::from_str(r#"{"num_slices": 24}"#).unwrap();
        assert_eq!(cfg.num_slices, 24);
        assert_eq!(cfg.ways_per_slice, 20);
        assert!(serde_json::from_str::<GeometryConfig>(r#"{"slices": 24}"#).is_err());
    }

    #[test]
    fn calibration_validation() {
        assert!(CostCalibration::default().validate().is_ok());
        let mut cal = CostCalibration::default();
        cal.sense_amp_cycling_speedup = 0.5;
        assert!(matches!(cal.validate(), Err(GeometryError::Speedup(_))));
        let mut cal = CostCalibration::default();
        cal.dram_filter_bytes_per_cycle = 0.0;
        assert!(cal.validate().is_err());
    }

    #[test]
    fn move_cycles_round_up() {
        let mut cal = CostCalibration::default();
        assert_eq!(cal.move_cycles(8), 8);
        cal.sense_amp_cycling_speedup = 3.0;
        assert_eq!(cal.move_cycles(8), 3);
        assert_eq!(cal.move_cycles(9), 3);
        assert_eq!(cal.move_cycles(0), 0);
    }
}
