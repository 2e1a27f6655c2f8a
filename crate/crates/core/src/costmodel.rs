//! Cycle, time and energy accounting for simulated runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{run_network, EngineError, ExecutionMode};
use crate::geometry::{CostCalibration, GeometryConfig};
use crate::mapper::LayerKind;
use crate::model_io::NetworkDescriptor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    FilterLoad,
    InputStream,
    OutputXfer,
    Mac,
    Reduction,
    Quantization,
    Pooling,
    Other,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::FilterLoad,
        Phase::InputStream,
        Phase::OutputXfer,
        Phase::Mac,
        Phase::Reduction,
        Phase::Quantization,
        Phase::Pooling,
        Phase::Other,
    ];

    pub fn domain(self) -> FrequencyDomain {
        match self {
            Phase::FilterLoad | Phase::InputStream | Phase::OutputXfer => FrequencyDomain::Access,
            _ => FrequencyDomain::Compute,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::FilterLoad => "filter_load",
            Phase::InputStream => "input_stream",
            Phase::OutputXfer => "output_xfer",
            Phase::Mac => "mac",
            Phase::Reduction => "reduction",
            Phase::Quantization => "quantization",
            Phase::Pooling => "pooling",
            Phase::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyDomain {
    Compute,
    Access,
}

impl FrequencyDomain {
    pub fn hz(self, cfg: &GeometryConfig) -> f64 {
        match self {
            FrequencyDomain::Compute => cfg.compute_freq_hz,
            FrequencyDomain::Access => cfg.access_freq_hz,
        }
    }

    pub fn energy_pj(self, cfg: &GeometryConfig) -> f64 {
        match self {
            FrequencyDomain::Compute => cfg.energy_compute_pj,
            FrequencyDomain::Access => cfg.energy_access_pj,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub cycles: u64,
    pub active_arrays: usize,
    pub frequency_domain: FrequencyDomain,
    pub energy_pj: f64,
}

impl PhaseReport {
    pub fn new(phase: Phase, cycles: u64, active_arrays: usize, cfg: &GeometryConfig) -> Self {
        let domain = phase.domain();
        PhaseReport {
            phase,
            cycles,
            active_arrays,
            frequency_domain: domain,
            energy_pj: cycles as f64 * active_arrays as f64 * domain.energy_pj(cfg),
        }
    }
}

pub fn phase_time(p: &PhaseReport, cfg: &GeometryConfig) -> f64 {
    p.cycles as f64 / p.frequency_domain.hz(cfg)
}

/// Phase accounting for one layer, summed over the whole batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub block: String,
    pub kind: LayerKind,
    pub serial_iterations: usize,
    pub utilization: f64,
    pub phases: Vec<PhaseReport>,
    /// Per-array compute cycles counted by the array model in functional runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_compute_cycles: Option<BTreeMap<Phase, u64>>,
}

impl LayerReport {
    pub fn latency_s(&self, cfg: &GeometryConfig) -> f64 {
        self.phases.iter().map(|p| phase_time(p, cfg)).sum()
    }

    pub fn energy_pj(&self) -> f64 {
        self.phases.iter().map(|p| p.energy_pj).sum()
    }

    pub fn cycles(&self, phase: Phase) -> u64 {
        self.phases.iter().filter(|p| p.phase == phase).map(|p| p.cycles).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTotal {
    pub phase: Phase,
    pub cycles: u64,
    pub seconds: f64,
    pub joules: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub batch_size: usize,
    pub num_slices: usize,
    pub per_layer: Vec<LayerReport>,
    pub phase_totals: Vec<PhaseTotal>,
    pub breakdown_fractions: BTreeMap<Phase, f64>,
    pub total_latency_s: f64,
    pub total_energy_j: f64,
    pub avg_power_w: f64,
    pub throughput_inferences_per_s: f64,
}

impl RunReport {
    pub fn phase_seconds(&self, phase: Phase) -> f64 {
        self.phase_totals.iter().find(|t| t.phase == phase).map_or(0.0, |t| t.seconds)
    }

    pub fn phase_cycles(&self, phase: Phase) -> u64 {
        self.phase_totals.iter().find(|t| t.phase == phase).map_or(0, |t| t.cycles)
    }

    pub fn fraction(&self, phase: Phase) -> f64 {
        self.breakdown_fractions.get(&phase).copied().unwrap_or(0.0)
    }
}

pub fn aggregate(per_layer: Vec<LayerReport>, batch_size: usize, cfg: &GeometryConfig) -> RunReport {
    let mut totals: BTreeMap<Phase, (u64, f64, f64)> = BTreeMap::new();
    for layer in &per_layer {
        for p in &layer.phases {
            let e = totals.entry(p.phase).or_default();
            e.0 += p.cycles;
            e.1 += phase_time(p, cfg);
            e.2 += p.energy_pj * 1e-12;
        }
    }
    let latency: f64 = totals.values().map(|t| t.1).sum();
    let energy: f64 = totals.values().map(|t| t.2).sum();
    let phase_totals: Vec<PhaseTotal> = Phase::ALL
        .iter()
        .map(|&phase| {
            let (cycles, seconds, joules) = totals.get(&phase).copied().unwrap_or_default();
            PhaseTotal {
                phase,
                cycles,
                seconds,
                joules,
                fraction: if latency > 0.0 { seconds / latency } else { 0.0 },
            }
        })
        .collect();
    let breakdown_fractions = phase_totals.iter().map(|t| (t.phase, t.fraction)).collect();
    RunReport {
        batch_size,
        num_slices: cfg.num_slices,
        per_layer,
        phase_totals,
        breakdown_fractions,
        total_latency_s: latency,
        total_energy_j: energy,
        avg_power_w: if latency > 0.0 { energy / latency } else { 0.0 },
        throughput_inferences_per_s: if latency > 0.0 { batch_size as f64 / latency } else { 0.0 },
    }
}

/// Single-image analytic latency of `net` on the same cache with `slices` slices.
pub fn scale_geometry(
    net: &NetworkDescriptor,
    cfg: &GeometryConfig,
    cal: &CostCalibration,
    slices: usize,
) -> Result<f64, EngineError> {
    let scaled = cfg.with_slices(slices);
    let run = run_network(net, &scaled, cal, &ExecutionMode::analytic(1), None)?;
    Ok(run.report.total_latency_s)
}

/// Shares of data-movement time (filter load, input streaming, output
/// transfer) used when fitting the movement parameters.
pub const MOVEMENT_SPLIT: [f64; 3] = [46.0, 15.0, 4.0];

/// Fit DRAM bandwidth and bus transfer costs so a single-image run of `net`
/// takes `target_latency_s`, with movement time divided as `split`.
///
/// Compute phases do not depend on the fitted parameters. Filter time scales
/// with 1/bandwidth; input and output time are affine in their transfer cost
/// plus a DRAM term, so three probe runs determine the solution.
pub fn calibrate_movement(
    net: &NetworkDescriptor,
    cfg: &GeometryConfig,
    base: &CostCalibration,
    target_latency_s: f64,
    split: [f64; 3],
) -> Result<CostCalibration, EngineError> {
    let probe = |d: f64, x: f64| -> Result<RunReport, EngineError> {
        let cal = CostCalibration {
            dram_filter_bytes_per_cycle: d,
            input_transfer_cycles: x,
            output_transfer_cycles: x,
            ..base.clone()
        };
        Ok(run_network(net, cfg, &cal, &ExecutionMode::analytic(1), None)?.report)
    };
    let r11 = probe(1.0, 1.0)?;
    let r12 = probe(1.0, 2.0)?;
    let r21 = probe(2.0, 1.0)?;
    let compute: f64 = [Phase::Mac, Phase::Reduction, Phase::Quantization, Phase::Pooling, Phase::Other]
        .iter()
        .map(|&p| r11.phase_seconds(p))
        .sum();
    let movement = target_latency_s - compute;
    if movement <= 0.0 {
        return Err(EngineError::Calibration(format!(
            "compute alone takes {compute:.6} s, beyond the {target_latency_s:.6} s target"
        )));
    }
    let total: f64 = split.iter().sum();
    let want = split.map(|s| movement * s / total);
    let affine = |phase: Phase| {
        let base = r11.phase_seconds(phase);
        let a = r12.phase_seconds(phase) - base;
        let b = 2.0 * (base - r21.phase_seconds(phase));
        (a, b, base - a - b)
    };
    let d = r11.phase_seconds(Phase::FilterLoad) / want[0];
    let (ai, bi, ci) = affine(Phase::InputStream);
    let (ao, bo, co) = affine(Phase::OutputXfer);
    let cal = CostCalibration {
        dram_filter_bytes_per_cycle: d,
        input_transfer_cycles: (want[1] - bi / d - ci) / ai,
        output_transfer_cycles: (want[2] - bo / d - co) / ao,
        ..base.clone()
    };
    cal.validate()
        .map_err(|e| EngineError::Calibration(format!("fitted parameters are invalid: {e}")))?;
    Ok(cal)
}

/// Batch size treated as the top of the throughput curve.
pub const PEAK_BATCH: usize = 128;
/// Single-socket throughput at `PEAK_BATCH`: half of 604 inferences/s on two sockets.
pub const PEAK_THROUGHPUT_PER_SOCKET: f64 = 302.0;

/// Fit the exposed share of DRAM spill and first-layer traffic so a batch of
/// `batch` images reaches `target_throughput`. Latency is affine in the share.
pub fn calibrate_dram_fraction(
    net: &NetworkDescriptor,
    cfg: &GeometryConfig,
    base: &CostCalibration,
    batch: usize,
    target_throughput: f64,
) -> Result<CostCalibration, EngineError> {
    let latency = |f: f64| -> Result<f64, EngineError> {
        let cal = CostCalibration {
            dram_bound_fraction: f,
            ..base.clone()
        };
        Ok(run_network(net, cfg, &cal, &ExecutionMode::analytic(batch), None)?.report.total_latency_s)
    };
    let full = latency(1.0)?;
    let slope = 2.0 * (full - latency(0.5)?);
    let want = batch as f64 / target_throughput;
    let f = if slope > 0.0 { 1.0 - (full - want) / slope } else { f64::NAN };
    if !(f > 0.0 && f <= 1.0) {
        return Err(EngineError::Calibration(format!(
            "no exposed DRAM share in (0, 1] gives {target_throughput} inferences/s at batch {batch}"
        )));
    }
    Ok(CostCalibration {
        dram_bound_fraction: f,
        ..base.clone()
    })
}

/// Alternate the movement and DRAM-share fits until both targets hold.
pub fn calibrate(
    net: &NetworkDescriptor,
    cfg: &GeometryConfig,
    base: &CostCalibration,
    target_latency_s: f64,
    split: [f64; 3],
    batch: usize,
    target_throughput: f64,
) -> Result<CostCalibration, EngineError> {
    let mut cal = base.clone();
    for _ in 0..6 {
        cal = calibrate_movement(net, cfg, &cal, target_latency_s, split)?;
        cal = calibrate_dram_fraction(net, cfg, &cal, batch, target_throughput)?;
    }
    calibrate_movement(net, cfg, &cal, target_latency_s, split)
}

/// One row per phase: phase, cycles, seconds, joules, fraction.
pub fn breakdown_rows(report: &RunReport) -> Vec<(String, u64, f64, f64, f64)> {
    report
        .phase_totals
        .iter()
        .map(|t| (t.phase.name().to_string(), t.cycles, t.seconds, t.joules, t.fraction))
        .collect()
}
