//! Layer-by-layer execution on the simulated cache.
//!
//! Every run produces analytic phase timing. Functional runs additionally
//! execute each layer bit-exactly on `BitArray`s and record the cycles the
//! arrays were charged, which must agree with the analytic compute phases
//! when the calibration is derived from the microcode.
//!
//! Functional layout of a convolution array (rows from the bottom):
//! filter bytes (`effective_rs * 8`), a 24-bit partial sum, a 16-bit
//! product, then one streamed 8-bit input byte. The reduction overlays the
//! partial sum and everything above it up to 64 rows. Post-processing (batch
//! norm, ReLU, min/max and requantization) runs on a companion array over
//! the same lanes that stands in for the output region.

use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitarray::{
    accumulate_cycles, add_cycles, divide_cycles, fold_tree_cycles, max_cycles, multiply_cycles, reduce_cycles,
    subtract_cycles, zero_rows_cycles, ArrayError, BitArray, Fold, MoveCost,
};
use crate::costmodel::{aggregate, LayerReport, Phase, PhaseReport, RunReport};
use crate::geometry::{CostCalibration, GeometryConfig, GeometryError, ReductionModel};
use crate::mapper::{plan_layer, LayerDescriptor, LayerKind, LayoutPlan, MapError, PARTIAL_SUM_BITS, SCRATCH_ROWS};
use crate::model_io::{execute, FlatLayer, ModelError, NetworkDescriptor, NetworkTensors, Tensor};
use crate::transpose::tmu_cycles;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("array operation failed: {0}")]
    Array(#[from] ArrayError),
    #[error("layer `{layer}`: {reason}")]
    Unsupported { layer: String, reason: String },
    #[error("functional run of `{layer}` needs {needed} bytes of array state, cap is {cap}")]
    MemoryBudget { layer: String, needed: usize, cap: usize },
    #[error("functional mode needs tensors")]
    MissingTensors,
    #[error("calibration failed: {0}")]
    Calibration(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    Functional,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionMode {
    pub fidelity: Fidelity,
    pub batch_size: usize,
    /// Cap on simulated array state held at once in functional mode.
    pub max_functional_bytes: usize,
}

pub const DEFAULT_MAX_FUNCTIONAL_BYTES: usize = 1 << 30;

impl ExecutionMode {
    pub fn analytic(batch_size: usize) -> Self {
        ExecutionMode {
            fidelity: Fidelity::Analytic,
            batch_size,
            max_functional_bytes: DEFAULT_MAX_FUNCTIONAL_BYTES,
        }
    }

    pub fn functional(batch_size: usize) -> Self {
        ExecutionMode {
            fidelity: Fidelity::Functional,
            ..ExecutionMode::analytic(batch_size)
        }
    }
}

/// Affine requantization of 32-bit accumulators to 8 bits:
/// `zero_point + ((v - layer_min) * multiplier >> shift)`, modulo 256.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantParams {
    pub layer_min: u32,
    pub layer_max: u32,
    pub multiplier: u16,
    pub shift: u32,
    pub zero_point: u8,
}

impl QuantParams {
    /// Host-side step: the largest shift whose multiplier still fits 16 bits.
    pub fn from_range(layer_min: u32, layer_max: u32, zero_point: u8) -> Self {
        assert!(layer_min <= layer_max, "min {layer_min} above max {layer_max}");
        let range = (layer_max - layer_min) as u64;
        let (multiplier, shift) = if range == 0 {
            (0, 0)
        } else {
            let mut shift = 0;
            while (255u64 << (shift + 1)) / range < 1 << 16 {
                shift += 1;
            }
            ((255u64 << shift) / range, shift)
        };
        QuantParams {
            layer_min,
            layer_max,
            multiplier: multiplier as u16,
            shift,
            zero_point,
        }
    }

    pub fn apply(&self, v: u32) -> u8 {
        let q = ((v - self.layer_min) as u64 * self.multiplier as u64) >> self.shift;
        (q as u8).wrapping_add(self.zero_point)
    }
}

/// Result of `run_network`.
#[derive(Debug, Clone)]
pub struct NetworkRun {
    pub report: RunReport,
    /// Functional runs: every layer output in execution order.
    pub trace: Vec<(String, Tensor)>,
    /// Functional runs: requantization parameters of each conv/fc layer.
    pub quant: Vec<(String, QuantParams)>,
    pub output: Option<Tensor>,
}

pub fn move_cost(cal: &CostCalibration) -> MoveCost {
    MoveCost {
        cycles_per_row: cal.move_cycles_per_bit,
        speedup: cal.sense_amp_cycling_speedup,
    }
}

const ACC_BITS: usize = 32;
const REQUANT_MULT_BITS: usize = 16;

fn ceil_u64(x: f64) -> u64 {
    (x - 1e-9).ceil().max(0.0) as u64
}

fn ring_cycles(bytes: usize, cfg: &GeometryConfig) -> u64 {
    (bytes * 8).div_ceil(cfg.ring_bits_per_cycle) as u64
}

/// Filter bytes fetched from DRAM once per layer and broadcast for free.
pub fn load_filters(layer: &LayerDescriptor, cal: &CostCalibration) -> u64 {
    ceil_u64(layer.filter_bytes() as f64 / cal.dram_filter_bytes_per_cycle)
}

/// Access cycles to stream one image's inputs into the arrays of a slice.
///
/// Each pixel group receives its first window in full and then only the
/// `R * min(U, S)` new bytes per channel for each later pixel. The 64-bit
/// bank latches halve bus time; slices stream in parallel. The first layer
/// also reads its input from DRAM through the transpose units.
pub fn stream_inputs(
    layer: &LayerDescriptor,
    plan: &LayoutPlan,
    cfg: &GeometryConfig,
    cal: &CostCalibration,
    first_layer: bool,
) -> u64 {
    let pix = plan.max_slice_pixels();
    let new = layer.r * layer.u.min(layer.s) * layer.c;
    let bytes = if layer.is_pool() {
        pix * new
    } else {
        let full = layer.r * layer.s * layer.c;
        let groups = (pix / plan.serial_iterations.max(1)).max(1);
        pix * new + groups * (full - new)
    };
    let bus = bytes as f64 * 8.0 / cfg.intra_slice_bus_bits as f64 / 2.0 * cal.input_transfer_cycles;
    let mut cycles = ceil_u64(bus);
    if first_layer {
        let image = layer.input_bytes();
        cycles += ceil_u64(image as f64 / cal.dram_filter_bytes_per_cycle * cal.dram_bound_fraction);
        cycles += tmu_cycles(image, cfg);
    }
    cycles
}

/// Access cycles to move one image's outputs to the I/O way, plus the ring
/// traffic for the `R x E` boundary pixels neighbouring slices need.
pub fn write_outputs(layer: &LayerDescriptor, plan: &LayoutPlan, cfg: &GeometryConfig, cal: &CostCalibration) -> u64 {
    let pix = plan.max_slice_pixels();
    let bus = (pix * layer.m) as f64 * 8.0 / cfg.intra_slice_bus_bits as f64 * cal.output_transfer_cycles;
    ceil_u64(bus) + ring_cycles(layer.r * layer.e * layer.m, cfg)
}

/// Access cycles to dump and reload batch outputs that overflow the I/O ways.
pub fn spill_cycles(layer: &LayerDescriptor, batch: usize, cfg: &GeometryConfig, cal: &CostCalibration) -> u64 {
    let capacity = cfg.num_slices * cfg.io_way_bytes();
    let total = batch * layer.output_bytes();
    if total <= capacity {
        return 0;
    }
    ceil_u64(2.0 * (total - capacity) as f64 / cal.dram_filter_bytes_per_cycle * cal.dram_bound_fraction)
}

pub fn mac_cycles(plan: &LayoutPlan, cal: &CostCalibration) -> u64 {
    plan.serial_iterations as u64 * (cal.mac_setup_cycles + plan.effective_rs as u64 * cal.cycles_per_mac_8bit)
}

pub fn reduction_cycles(plan: &LayoutPlan, cal: &CostCalibration) -> u64 {
    let ser = plan.serial_iterations as u64;
    match cal.reduction_model {
        ReductionModel::Scaled => {
            let levels = plan.reduction_levels() as u64;
            let reference = cal.reduction_reference_channels.trailing_zeros() as u64;
            (ser * levels * cal.cycles_reduction_conv).div_ceil(reference)
        }
        ReductionModel::Microcode => ser * reduce_cycles(PARTIAL_SUM_BITS, plan.padded_channels, move_cost(cal)),
    }
}

pub fn relu_cycles(plan: &LayoutPlan) -> u64 {
    plan.serial_iterations as u64 * (1 + zero_rows_cycles(ACC_BITS))
}

pub fn batchnorm_cycles(plan: &LayoutPlan) -> u64 {
    plan.serial_iterations as u64 * (multiply_cycles(ACC_BITS, REQUANT_MULT_BITS) + accumulate_cycles(ACC_BITS))
}

/// Access cycles of the cross-array and cross-slice min/max exchange.
fn quant_bus_access_cycles(plan: &LayoutPlan, cfg: &GeometryConfig) -> u64 {
    let pair = 2 * ACC_BITS;
    let intra = (plan.arrays_active_per_slice * pair).div_ceil(cfg.intra_slice_bus_bits);
    (intra + cfg.num_slices * pair.div_ceil(cfg.ring_bits_per_cycle)) as u64
}

/// Compute cycles of min/max tracking, the in-array trees, the bus exchange
/// (converted to the compute clock) and the per-output requantization.
pub fn quantization_cycles(plan: &LayoutPlan, cfg: &GeometryConfig, cal: &CostCalibration) -> u64 {
    let mv = move_cost(cal);
    let ser = plan.serial_iterations as u64;
    let track = 2 * mv.cycles(ACC_BITS) + ser.saturating_sub(1) * 2 * max_cycles(ACC_BITS, mv);
    let trees = 2 * fold_tree_cycles(ACC_BITS, plan.convs_per_array, mv);
    let bus = quant_bus_cycles(plan, cfg);
    track + trees + bus + ser * requant_step_cycles()
}

fn quant_bus_cycles(plan: &LayoutPlan, cfg: &GeometryConfig) -> u64 {
    ceil_u64(quant_bus_access_cycles(plan, cfg) as f64 * cfg.compute_freq_hz / cfg.access_freq_hz)
}

fn requant_step_cycles() -> u64 {
    subtract_cycles(ACC_BITS) + multiply_cycles(ACC_BITS, REQUANT_MULT_BITS) + add_cycles(8)
}

/// Dividend width of average pooling: 8 bits plus the growth of the window sum.
pub fn avgpool_width(window: usize) -> usize {
    8 + window.next_power_of_two().trailing_zeros() as usize
}

pub fn pool_cycles(layer: &LayerDescriptor, plan: &LayoutPlan, cal: &CostCalibration) -> u64 {
    let ser = plan.serial_iterations as u64;
    let window = layer.r * layer.s;
    let taps = window.saturating_sub(1) as u64;
    match layer.kind {
        LayerKind::Maxpool => ser * taps * max_cycles(8, move_cost(cal)),
        LayerKind::Avgpool => {
            let w = avgpool_width(window);
            ser * (taps * accumulate_cycles(w) + divide_cycles(w))
        }
        _ => 0,
    }
}

/// Per-image cycles of every phase, filter load excluded.
fn analytic_phases(
    layer: &LayerDescriptor,
    plan: &LayoutPlan,
    cfg: &GeometryConfig,
    cal: &CostCalibration,
    first_layer: bool,
) -> BTreeMap<Phase, u64> {
    let mut p: BTreeMap<Phase, u64> = Phase::ALL.iter().map(|&ph| (ph, 0)).collect();
    p.insert(Phase::InputStream, stream_inputs(layer, plan, cfg, cal, first_layer));
    p.insert(Phase::OutputXfer, write_outputs(layer, plan, cfg, cal));
    if layer.is_pool() {
        p.insert(Phase::Pooling, pool_cycles(layer, plan, cal));
    } else {
        p.insert(Phase::Mac, mac_cycles(plan, cal));
        p.insert(Phase::Reduction, reduction_cycles(plan, cal));
        p.insert(Phase::Quantization, quantization_cycles(plan, cfg, cal));
        let mut other = 0;
        if layer.batchnorm.is_some() {
            other += batchnorm_cycles(plan);
        }
        if layer.relu {
            other += relu_cycles(plan);
        }
        p.insert(Phase::Other, other);
    }
    p
}

/// Analytic report of one layer over a batch: filters load once, every
/// other phase repeats per image, and outputs beyond the I/O ways spill.
pub fn layer_report(
    flat: &FlatLayer<'_>,
    plan: &LayoutPlan,
    cfg: &GeometryConfig,
    cal: &CostCalibration,
    first_layer: bool,
    batch: usize,
) -> LayerReport {
    let layer = flat.layer;
    let per_image = analytic_phases(layer, plan, cfg, cal, first_layer);
    let movement_arrays = cfg.num_slices * cfg.banks_per_way;
    let phases = Phase::ALL
        .iter()
        .map(|&phase| {
            let cycles = match phase {
                Phase::FilterLoad => load_filters(layer, cal),
                Phase::OutputXfer => per_image[&phase] * batch as u64 + spill_cycles(layer, batch, cfg, cal),
                _ => per_image[&phase] * batch as u64,
            };
            let arrays = match phase.domain() {
                crate::costmodel::FrequencyDomain::Access => movement_arrays,
                crate::costmodel::FrequencyDomain::Compute => plan.arrays_active,
            };
            PhaseReport::new(phase, cycles, arrays, cfg)
        })
        .collect();
    LayerReport {
        name: flat.key(),
        block: flat.block.to_string(),
        kind: layer.kind,
        serial_iterations: plan.serial_iterations,
        utilization: plan.utilization,
        phases,
        measured_compute_cycles: None,
    }
}

/// Mapping plan of every layer, keyed as in `FlatLayer::key`.
pub fn plan_network(net: &NetworkDescriptor, cfg: &GeometryConfig) -> Result<Vec<(String, LayoutPlan)>, EngineError> {
    net.flat_layers()
        .iter()
        .map(|f| Ok((f.key(), plan_layer(f.layer, cfg)?)))
        .collect()
}

/// Run `net` layer by layer, branches serially in descriptor order.
pub fn run_network(
    net: &NetworkDescriptor,
    cfg: &GeometryConfig,
    cal: &CostCalibration,
    mode: &ExecutionMode,
    tensors: Option<&NetworkTensors>,
) -> Result<NetworkRun, EngineError> {
    cfg.validate()?;
    cal.validate()?;
    if mode.batch_size == 0 {
        return Err(EngineError::Unsupported {
            layer: net.name.clone(),
            reason: "batch size must be positive".into(),
        });
    }
    net.validate()?;
    let flat = net.flat_layers();
    let mut reports = Vec::with_capacity(flat.len());
    let mut plans = Vec::with_capacity(flat.len());
    for (i, f) in flat.iter().enumerate() {
        let plan = plan_layer(f.layer, cfg)?;
        reports.push(layer_report(f, &plan, cfg, cal, i == 0, mode.batch_size));
        plans.push(plan);
    }
    let mut run = NetworkRun {
        report: aggregate(vec![], mode.batch_size, cfg),
        trace: vec![],
        quant: vec![],
        output: None,
    };
    if mode.fidelity == Fidelity::Functional {
        let tensors = tensors.ok_or(EngineError::MissingTensors)?;
        let mut ctx = FunctionalCtx {
            net,
            cfg,
            cal,
            mode,
            tensors,
            plans: &plans,
            reports: &mut reports,
            trace: vec![],
            quant: vec![],
            index: 0,
        };
        let out = ctx.run()?;
        run.trace = ctx.trace;
        run.quant = ctx.quant;
        run.output = Some(out);
    }
    run.report = aggregate(reports, mode.batch_size, cfg);
    Ok(run)
}

struct FunctionalCtx<'a> {
    net: &'a NetworkDescriptor,
    cfg: &'a GeometryConfig,
    cal: &'a CostCalibration,
    mode: &'a ExecutionMode,
    tensors: &'a NetworkTensors,
    plans: &'a [LayoutPlan],
    reports: &'a mut Vec<LayerReport>,
    trace: Vec<(String, Tensor)>,
    quant: Vec<(String, QuantParams)>,
    index: usize,
}

impl FunctionalCtx<'_> {
    fn run(&mut self) -> Result<Tensor, EngineError> {
        let net = self.net;
        let input = self.tensors.input.clone();
        execute(net, input, &mut |key: &str, l: &LayerDescriptor, t: &Tensor| self.layer(l, key.to_string(), t))
    }

    fn layer(&mut self, layer: &LayerDescriptor, key: String, input: &Tensor) -> Result<Tensor, EngineError> {
        let plan = &self.plans[self.index];
        if input.shape() != [layer.h, layer.w, layer.c] {
            return Err(ModelError::ShapeMismatch(input.shape(), vec![layer.h, layer.w, layer.c]).into());
        }
        let (out, measured, params) = if layer.is_pool() {
            let (out, measured) = run_pool(layer, plan, self.cfg, self.cal, self.mode, input)?;
            (out, measured, None)
        } else {
            let weights = self.tensors.weights.get(&key).ok_or_else(|| ModelError::Tensor {
                name: key.clone(),
                message: "missing weights".into(),
            })?;
            let job = ConvJob {
                layer,
                plan,
                cfg: self.cfg,
                cal: self.cal,
                input,
                weights,
                zero_point: self.net.zero_point,
            };
            let (out, measured, params) = job.run(self.mode)?;
            (out, measured, Some(params))
        };
        self.reports[self.index].measured_compute_cycles = Some(measured);
        if let Some(p) = params {
            self.quant.push((key.clone(), p));
        }
        self.trace.push((key, out.clone()));
        self.index += 1;
        Ok(out)
    }
}

fn check_budget(layer: &LayerDescriptor, arrays: usize, rows: usize, lanes: usize, mode: &ExecutionMode) -> Result<(), EngineError> {
    let needed = arrays * rows * lanes.div_ceil(64) * 8;
    if needed > mode.max_functional_bytes {
        return Err(EngineError::MemoryBudget {
            layer: layer.name.clone(),
            needed,
            cap: mode.max_functional_bytes,
        });
    }
    Ok(())
}

fn measured_map(entries: &[(Phase, u64)]) -> BTreeMap<Phase, u64> {
    let mut m: BTreeMap<Phase, u64> = Phase::ALL.iter().filter(|p| p.domain() == crate::costmodel::FrequencyDomain::Compute).map(|&p| (p, 0)).collect();
    for &(p, c) in entries {
        *m.entry(p).or_default() += c;
    }
    m
}

/// Post-array rows used while accumulating outputs.
mod post {
    pub const VAL: usize = 0;
    pub const MULTC: usize = 32;
    pub const BIAS: usize = 48;
    pub const PROD: usize = 80;
    pub const SCR: usize = 128;
    pub const MAX: usize = 161;
    pub const MIN: usize = 193;
    pub const TREE_SCR: usize = 32;
    // Requantization pass.
    pub const MINV: usize = 32;
    pub const RMULT: usize = 64;
    pub const DIFF: usize = 80;
    pub const RPROD: usize = 113;
    pub const ZP: usize = 225;
    pub const OUT: usize = 233;
    pub const ROWS: usize = 256;
}

struct ConvJob<'a> {
    layer: &'a LayerDescriptor,
    plan: &'a LayoutPlan,
    cfg: &'a GeometryConfig,
    cal: &'a CostCalibration,
    input: &'a Tensor,
    weights: &'a [u8],
    zero_point: u8,
}

/// One simulated array (or array pair) of a convolution and its post array.
struct ConvUnit {
    slice: usize,
    /// First convolution slot held by this unit within its slice.
    first_slot: usize,
    compute: BitArray,
    post: BitArray,
    /// Accumulator per (step, slot position) after batch norm and ReLU.
    values: Vec<Vec<u32>>,
    mac: u64,
    reduction: u64,
    other: u64,
    quant: u64,
}

impl ConvJob<'_> {
    fn lanes(&self) -> usize {
        self.cfg.bitlines_per_array * self.plan.arrays_per_conv
    }

    fn slots_per_unit(&self) -> usize {
        self.lanes() / self.plan.padded_channels
    }

    /// `(channel, r, s)` of filter byte `b` on conv lane `li`.
    fn lane_tap(&self, li: usize, b: usize) -> Option<(usize, usize, usize)> {
        let l = self.layer;
        let rs = l.r * l.s;
        let (ch, tap) = if self.plan.split_factor > 1 {
            (li / self.plan.split_factor, (li % self.plan.split_factor) * self.plan.effective_rs + b)
        } else {
            (li * self.plan.packing_factor + b / rs, b % rs)
        };
        (ch < l.c && tap < rs).then(|| (ch, tap / l.s, tap % l.s))
    }

    fn input_at(&self, pixel: usize, ch: usize, r: usize, s: usize) -> u8 {
        let l = self.layer;
        let (pt, pl) = l.pad_before();
        let (oy, ox) = (pixel / l.e, pixel % l.e);
        let y = (oy * l.u + r).checked_sub(pt);
        let x = (ox * l.u + s).checked_sub(pl);
        match (y, x) {
            (Some(y), Some(x)) if y < l.h && x < l.w => self.input.get(y, x, ch),
            _ => 0,
        }
    }

    /// `(filter, local pixel, owns output)` of slot `k` in a slice at step `t`.
    fn slot_work(&self, k: usize, t: usize, pix: usize) -> (usize, usize, bool) {
        let m = self.layer.m;
        let ser = self.plan.serial_iterations;
        let g = k / m;
        let p = g * ser + t;
        (k % m, p.min(pix - 1), g < self.plan.pixel_groups_per_slice && p < pix)
    }

    fn run(&self, mode: &ExecutionMode) -> Result<(Tensor, BTreeMap<Phase, u64>, QuantParams), EngineError> {
        let l = self.layer;
        let plan = self.plan;
        if plan.filter_passes > 1 {
            return Err(EngineError::Unsupported {
                layer: l.name.clone(),
                reason: format!("{} filters exceed the {} convolution slots of a slice", l.m, plan.convs_per_slice),
            });
        }
        if self.weights.len() != l.filter_bytes() {
            return Err(ModelError::ShapeMismatch(vec![self.weights.len()], vec![l.m, l.r, l.s, l.c]).into());
        }
        let filter_rows = plan.effective_rs * 8;
        if filter_rows + 64 > self.cfg.wordlines_per_array {
            return Err(MapError::RegionOverflow {
                name: l.name.clone(),
                needed: filter_rows + 64,
                available: self.cfg.wordlines_per_array,
            }
            .into());
        }
        let cpu = self.slots_per_unit();
        let lanes = self.lanes();
        let mut units = Vec::new();
        for (slice, range) in plan.per_slice_output_ranges.iter().enumerate() {
            if range.is_empty() {
                continue;
            }
            let slots = plan.pixel_groups_per_slice.min(range.len()) * l.m;
            for u in 0..slots.div_ceil(cpu) {
                units.push((slice, u * cpu));
            }
        }
        let rows = self.cfg.wordlines_per_array.max(post::ROWS);
        check_budget(l, 2 * units.len(), rows, lanes, mode)?;
        let mv = move_cost(self.cal);
        let mut units: Vec<ConvUnit> = units
            .into_iter()
            .map(|(slice, first_slot)| ConvUnit {
                slice,
                first_slot,
                compute: BitArray::new(self.cfg.wordlines_per_array, lanes).with_costs(mv, self.cfg.energy_compute_pj),
                post: BitArray::new(post::ROWS, lanes).with_costs(mv, self.cfg.energy_compute_pj),
                values: vec![],
                mac: 0,
                reduction: 0,
                other: 0,
                quant: 0,
            })
            .collect();
        units.par_iter_mut().try_for_each(|u| self.accumulate_unit(u))?;

        let (lo, hi) = units
            .iter()
            .map(|u| {
                let max = u.post.read_elements(&u.post.region(post::MAX, ACC_BITS))?[0] as u32;
                let min = u.post.read_elements(&u.post.region(post::MIN, ACC_BITS))?[0] as u32;
                Ok((min, max))
            })
            .collect::<Result<Vec<_>, ArrayError>>()?
            .into_iter()
            .fold((u32::MAX, 0), |(a, b), (mn, mx)| (a.min(mn), b.max(mx)));
        let params = if units.is_empty() {
            QuantParams::from_range(0, 0, self.zero_point)
        } else {
            QuantParams::from_range(lo, hi, self.zero_point)
        };
        let bus = quant_bus_cycles(plan, self.cfg);
        let quantized: Vec<Vec<Vec<u8>>> = units
            .par_iter_mut()
            .map(|u| self.requantize_unit(u, &params))
            .collect::<Result<_, ArrayError>>()?;

        let mut out = Tensor::zeros(l.e, l.e, l.m);
        for (u, q) in units.iter().zip(&quantized) {
            let range = &plan.per_slice_output_ranges[u.slice];
            for (t, row) in q.iter().enumerate() {
                for (pos, &v) in row.iter().enumerate() {
                    let (m, p, owns) = self.slot_work(u.first_slot + pos, t, range.len());
                    if owns {
                        let g = range.start + p;
                        out.set(g / l.e, g % l.e, m, v);
                    }
                }
            }
        }
        let max = |f: fn(&ConvUnit) -> u64| units.iter().map(f).max().unwrap_or(0);
        let measured = measured_map(&[
            (Phase::Mac, max(|u| u.mac)),
            (Phase::Reduction, max(|u| u.reduction)),
            (Phase::Other, max(|u| u.other)),
            (Phase::Quantization, max(|u| u.quant) + bus),
        ]);
        Ok((out, measured, params))
    }

    /// MACs, reduction, batch norm, ReLU and min/max tracking for every step.
    fn accumulate_unit(&self, u: &mut ConvUnit) -> Result<(), ArrayError> {
        let l = self.layer;
        let plan = self.plan;
        let p = plan.padded_channels;
        let eff = plan.effective_rs;
        let cpu = self.slots_per_unit();
        let range: Range<usize> = plan.per_slice_output_ranges[u.slice].clone();
        let pix = range.len();
        let lanes = u.compute.lanes();
        let ca = &mut u.compute;

        let slot_filter = |pos: usize| (u.first_slot + pos) % l.m;
        // Filter bytes, resident for the whole layer.
        for b in 0..eff {
            let vals: Vec<u64> = (0..lanes)
                .map(|lane| {
                    let m = slot_filter(lane / p);
                    self.lane_tap(lane % p, b)
                        .map_or(0, |(ch, r, s)| self.weights[((m * l.r + r) * l.s + s) * l.c + ch] as u64)
                })
                .collect();
            ca.write_elements(&ca.region(b * 8, 8), &vals)?;
        }
        let filt = eff * 8;
        let psum = ca.region(filt, PARTIAL_SUM_BITS);
        let prod = ca.region(filt + PARTIAL_SUM_BITS, SCRATCH_ROWS);
        let inp = ca.region(filt + PARTIAL_SUM_BITS + SCRATCH_ROWS, 8);

        let pa = &mut u.post;
        if let Some(bn) = &l.batchnorm {
            pa.write_elements(&pa.region(post::MULTC, REQUANT_MULT_BITS), &vec![bn.multiplier as u64; lanes])?;
            let bias: Vec<u64> = (0..lanes).map(|lane| bn.bias[slot_filter(lane / p)] as u32 as u64).collect();
            pa.write_elements(&pa.region(post::BIAS, ACC_BITS), &bias)?;
        }
        let val = pa.region(post::VAL, ACC_BITS);
        let maxr = pa.region(post::MAX, ACC_BITS);
        let minr = pa.region(post::MIN, ACC_BITS);
        let scr = pa.region(post::SCR, ACC_BITS + 1);

        for t in 0..plan.serial_iterations {
            let work: Vec<(usize, usize)> = (0..cpu)
                .map(|pos| {
                    let (m, px, _) = self.slot_work(u.first_slot + pos, t, pix);
                    (m, range.start + px)
                })
                .collect();
            // MACs: reset partial sums, then one streamed input byte per filter byte.
            let before = ca.cycle_count();
            ca.zero_rows(&psum, false)?;
            for b in 0..eff {
                let vals: Vec<u64> = (0..lanes)
                    .map(|lane| {
                        let (_, pixel) = work[lane / p];
                        self.lane_tap(lane % p, b)
                            .map_or(0, |(ch, r, s)| self.input_at(pixel, ch, r, s) as u64)
                    })
                    .collect();
                ca.write_elements(&inp, &vals)?;
                ca.multiply(&ca.region(b * 8, 8), &inp, &prod)?;
                ca.accumulate(&psum, &prod, false)?;
            }
            u.mac += ca.cycle_count() - before;
            let before = ca.cycle_count();
            let (sum, _) = ca.reduce_lanes(&psum, p, filt + ACC_BITS)?;
            u.reduction += ca.cycle_count() - before;
            let sums = ca.read_elements(&sum)?;

            let mut v = vec![0u64; lanes];
            for pos in 0..cpu {
                v[pos * p] = sums[pos * p];
            }
            pa.write_elements(&val, &v)?;
            let before = pa.cycle_count();
            let mut cur = val.clone();
            if let Some(bn) = &l.batchnorm {
                let product = pa.region(post::PROD, ACC_BITS + REQUANT_MULT_BITS);
                pa.multiply(&val, &pa.region(post::MULTC, REQUANT_MULT_BITS), &product)?;
                cur = pa.region(post::PROD + bn.shift as usize, ACC_BITS);
                pa.accumulate(&cur, &pa.region(post::BIAS, ACC_BITS), false)?;
            }
            if l.relu {
                pa.load_tag_from_row(cur.row(ACC_BITS - 1))?;
                pa.zero_rows(&cur, true)?;
            }
            u.other += pa.cycle_count() - before;
            let outs = pa.read_elements(&cur)?;
            u.values.push((0..cpu).map(|pos| outs[pos * p] as u32).collect());

            let before = pa.cycle_count();
            if t == 0 {
                pa.copy_region(&cur, &maxr, false)?;
                pa.copy_region(&cur, &minr, false)?;
            } else {
                pa.elementwise_max(&maxr, &cur, &scr)?;
                pa.elementwise_min(&minr, &cur, &scr)?;
            }
            u.quant += pa.cycle_count() - before;
        }
        let before = pa.cycle_count();
        pa.tree_fold(&maxr, cpu, p, post::TREE_SCR, Fold::Max)?;
        pa.tree_fold(&minr, cpu, p, post::TREE_SCR, Fold::Min)?;
        u.quant += pa.cycle_count() - before;
        Ok(())
    }

    /// `zero_point + ((v - min) * multiplier >> shift)` for every stored output.
    fn requantize_unit(&self, u: &mut ConvUnit, q: &QuantParams) -> Result<Vec<Vec<u8>>, ArrayError> {
        let p = self.plan.padded_channels;
        let pa = &mut u.post;
        let lanes = pa.lanes();
        let val = pa.region(post::VAL, ACC_BITS);
        let minv = pa.region(post::MINV, ACC_BITS);
        let mult = pa.region(post::RMULT, REQUANT_MULT_BITS);
        let diff = pa.region(post::DIFF, ACC_BITS + 1);
        let prod = pa.region(post::RPROD, ACC_BITS + REQUANT_MULT_BITS);
        let zp = pa.region(post::ZP, 8);
        let out = pa.region(post::OUT, 9);
        pa.write_elements(&minv, &vec![q.layer_min as u64; lanes])?;
        pa.write_elements(&mult, &vec![q.multiplier as u64; lanes])?;
        pa.write_elements(&zp, &vec![q.zero_point as u64; lanes])?;
        let mut result = Vec::with_capacity(u.values.len());
        for step in &u.values {
            let mut v = vec![0u64; lanes];
            for (pos, &x) in step.iter().enumerate() {
                v[pos * p] = x as u64;
            }
            // Idle lanes must not borrow.
            for (lane, x) in v.iter_mut().enumerate() {
                if lane % p != 0 {
                    *x = q.layer_min as u64;
                }
            }
            pa.write_elements(&val, &v)?;
            let before = pa.cycle_count();
            pa.subtract(&val, &minv, &diff)?;
            pa.multiply(&diff.at(diff.start, ACC_BITS), &mult, &prod)?;
            pa.add(&prod.at(prod.start + q.shift as usize, 8), &zp, &out)?;
            u.quant += pa.cycle_count() - before;
            let r = pa.read_elements(&out)?;
            result.push((0..step.len()).map(|pos| r[pos * p] as u8).collect());
        }
        Ok(result)
    }
}

/// Bit-exact pooling: one output per lane, `serial_iterations` rounds.
fn run_pool(
    layer: &LayerDescriptor,
    plan: &LayoutPlan,
    cfg: &GeometryConfig,
    cal: &CostCalibration,
    mode: &ExecutionMode,
    input: &Tensor,
) -> Result<(Tensor, BTreeMap<Phase, u64>), EngineError> {
    let lanes_per_slice = plan.convs_per_slice;
    let window = layer.r * layer.s;
    let w = avgpool_width(window);
    let rows = match layer.kind {
        LayerKind::Maxpool => 25,
        _ => 3 * w + 8 + 3 * w + 1,
    };
    if rows > cfg.wordlines_per_array {
        return Err(MapError::RegionOverflow {
            name: layer.name.clone(),
            needed: rows,
            available: cfg.wordlines_per_array,
        }
        .into());
    }
    let (pt, pl) = layer.pad_before();
    let taps = |p: usize| -> Vec<Option<(usize, usize)>> {
        let (oy, ox) = (p / layer.e, p % layer.e);
        (0..layer.r)
            .flat_map(|r| (0..layer.s).map(move |s| (r, s)))
            .map(|(r, s)| {
                let y = (oy * layer.u + r).checked_sub(pt)?;
                let x = (ox * layer.u + s).checked_sub(pl)?;
                (y < layer.h && x < layer.w).then_some((y, x))
            })
            .collect()
    };
    let total_lanes: usize = plan
        .per_slice_output_ranges
        .iter()
        .map(|r| (r.len() * layer.c).min(lanes_per_slice).next_multiple_of(cfg.bitlines_per_array))
        .sum();
    check_budget(layer, 1, rows, total_lanes, mode)?;
    let mv = move_cost(cal);
    let results: Vec<(Vec<(usize, usize, u8)>, u64)> = plan
        .per_slice_output_ranges
        .par_iter()
        .map(|range| -> Result<_, ArrayError> {
            let outputs = range.len() * layer.c;
            if outputs == 0 {
                return Ok((vec![], 0));
            }
            let lanes = outputs.min(lanes_per_slice).next_multiple_of(cfg.bitlines_per_array);
            let mut a = BitArray::new(rows, lanes).with_costs(mv, cfg.energy_compute_pj);
            let mut written = vec![];
            for step in 0..outputs.div_ceil(lanes) {
                // (pixel, channel) of each lane, None past the last output.
                let work: Vec<Option<(usize, usize)>> = (0..lanes)
                    .map(|lane| {
                        let i = step * lanes + lane;
                        (i < outputs).then(|| (range.start + i / layer.c, i % layer.c))
                    })
                    .collect();
                let lane_taps: Vec<Vec<Option<(usize, usize)>>> =
                    work.iter().map(|wk| wk.map_or_else(Vec::new, |(p, _)| taps(p))).collect();
                let value = |lane: usize, j: usize, dup: bool| -> u64 {
                    let Some((_, c)) = work[lane] else { return 0 };
                    let t = &lane_taps[lane];
                    let tap = t[j].or_else(|| if dup { t.iter().flatten().next().copied() } else { None });
                    tap.map_or(0, |(y, x)| input.get(y, x, c) as u64)
                };
                let col = |j: usize, dup: bool| (0..lanes).map(|lane| value(lane, j, dup)).collect::<Vec<u64>>();
                let result = if layer.kind == LayerKind::Maxpool {
                    let acc = a.region(0, 8);
                    let inp = a.region(8, 8);
                    let scr = a.region(16, 9);
                    a.write_elements(&acc, &col(0, true))?;
                    for j in 1..window {
                        a.write_elements(&inp, &col(j, true))?;
                        a.elementwise_max(&acc, &inp, &scr)?;
                    }
                    a.read_elements(&acc)?
                } else {
                    let acc = a.region(0, w);
                    let inp = a.region(w, 8);
                    let div = a.region(w + 8, w);
                    let q = a.region(2 * w + 8, w);
                    let scr = a.region(3 * w + 8, 3 * w + 1);
                    a.write_elements(&acc, &col(0, false))?;
                    for j in 1..window {
                        a.write_elements(&inp, &col(j, false))?;
                        a.accumulate(&acc, &inp, false)?;
                    }
                    let counts: Vec<u64> = lane_taps.iter().map(|t| t.iter().flatten().count() as u64).collect();
                    a.write_elements(&div, &counts)?;
                    a.divide(&acc, &div, &q, &scr)?;
                    a.read_elements(&q)?
                };
                for (lane, wk) in work.iter().enumerate() {
                    if let Some((p, c)) = wk {
                        written.push((*p, *c, result[lane] as u8));
                    }
                }
            }
            Ok((written, a.cycle_count()))
        })
        .collect::<Result<_, ArrayError>>()?;
    let mut out = Tensor::zeros(layer.e, layer.e, layer.c);
    let mut cycles = 0;
    for (written, c) in results {
        cycles = cycles.max(c);
        for (p, ch, v) in written {
            out.set(p / layer.e, p % layer.e, ch, v);
        }
    }
    Ok((out, measured_map(&[(Phase::Pooling, cycles)])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::{BatchNorm, Padding};
    use crate::model_io::{inception_v3, reference_inference, reference_requant_params, toy_network, NetworkEntry};
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn cfg() -> GeometryConfig {
        GeometryConfig::default()
    }

    fn single(layer: LayerDescriptor) -> NetworkDescriptor {
        let mut net = NetworkDescriptor::empty("one");
        net.layers.push(NetworkEntry::Layer(layer));
        net
    }

    fn tensors(net: &NetworkDescriptor, input: Vec<u8>, weights: Vec<u8>) -> NetworkTensors {
        let (h, w, c) = net.input_shape().unwrap();
        let key = net.flat_layers()[0].key();
        NetworkTensors {
            input: Tensor::from_data(h, w, c, input).unwrap(),
            weights: HashMap::from([(key, weights)]),
        }
    }

    fn functional(net: &NetworkDescriptor, t: &NetworkTensors) -> NetworkRun {
        run_network(net, &cfg(), &CostCalibration::microcode(), &ExecutionMode::functional(1), Some(t)).unwrap()
    }

    #[test]
    fn quant_params_match_closed_form() {
        for (lo, hi) in [(0u32, 0u32), (3, 4), (0, 255), (10, 100_000), (0, u32::MAX), (7, 1 << 20)] {
            let q = QuantParams::from_range(lo, hi, 0);
            assert_eq!((q.multiplier as u32, q.shift), reference_requant_params(lo, hi), "{lo}..{hi}");
            assert_eq!(q.apply(lo), 0);
            if hi > lo {
                assert!(q.apply(hi) >= 254);
            }
        }
        let q = QuantParams::from_range(9, 9, 17);
        assert_eq!(q.apply(9), 17);
    }

    #[test]
    fn conv2d_2b_published_constants() {
        let l = LayerDescriptor::conv("Conv2D_2b_3x3", 147, 3, 3, 32, 64, 1, Padding::Same);
        let plan = plan_layer(&l, &cfg()).unwrap();
        let cal = CostCalibration::default();
        let per_conv = plan.effective_rs as u64 * cal.cycles_per_mac_8bit + reduction_cycles(&plan, &cal) / 43;
        assert_eq!(per_conv, 2784);
        assert_eq!(mac_cycles(&plan, &cal) + reduction_cycles(&plan, &cal), 43 * 2784);
    }

    #[test]
    fn one_by_one_identity() {
        let mut l = LayerDescriptor::conv("id", 3, 1, 1, 1, 1, 1, Padding::Valid);
        l.relu = false;
        let net = single(l);
        let input = vec![0, 10, 20, 30, 40, 50, 60, 70, 255];
        let t = tensors(&net, input.clone(), vec![1]);
        let run = functional(&net, &t);
        assert_eq!(run.output.unwrap().data, input);
    }

    #[test]
    fn single_lane_product() {
        let mut l = LayerDescriptor::conv("x", 1, 1, 1, 1, 1, 1, Padding::Valid);
        l.relu = false;
        let net = single(l);
        let t = tensors(&net, vec![13], vec![11]);
        let run = functional(&net, &t);
        // one output: range collapses to the zero point
        assert_eq!(run.output.unwrap().data, vec![0]);
        let (_, q) = &run.quant[0];
        assert_eq!((q.layer_min, q.layer_max), (143, 143));
    }

    #[test]
    fn batchnorm_and_relu_match_reference() {
        let mut l = LayerDescriptor::conv("bn", 6, 3, 3, 2, 2, 1, Padding::Same);
        l.batchnorm = Some(BatchNorm {
            multiplier: 5,
            shift: 3,
            bias: vec![-3000, 250],
        });
        let net = single(l);
        let input: Vec<u8> = (0..72).map(|i| (i * 29 % 251) as u8).collect();
        let weights: Vec<u8> = (0..36).map(|i| (i * 53 % 256) as u8).collect();
        let t = tensors(&net, input, weights);
        let run = functional(&net, &t);
        let (_, expect) = reference_inference(&net, &t).unwrap();
        assert_eq!(run.output.unwrap(), expect);
    }

    #[test]
    fn maxpool_five_by_five() {
        let l = LayerDescriptor::pool("p", LayerKind::Maxpool, 5, 3, 1, 1, Padding::Valid);
        let net = single(l);
        let input: Vec<u8> = (0..25).map(|i| (i * 97 % 256) as u8).collect();
        let t = NetworkTensors {
            input: Tensor::from_data(5, 5, 1, input).unwrap(),
            weights: HashMap::new(),
        };
        let run = functional(&net, &t);
        let (_, expect) = reference_inference(&net, &t).unwrap();
        assert_eq!(run.output.unwrap(), expect);
    }

    #[test]
    fn constant_pools_stay_constant() {
        for kind in [LayerKind::Maxpool, LayerKind::Avgpool] {
            let net = single(LayerDescriptor::pool("p", kind, 6, 3, 2, 1, Padding::Same));
            let t = NetworkTensors {
                input: Tensor::from_data(6, 6, 2, vec![77; 72]).unwrap(),
                weights: HashMap::new(),
            };
            assert!(functional(&net, &t).output.unwrap().data.iter().all(|&v| v == 77));
        }
    }

    #[test]
    fn avgpool_eight_by_eight() {
        let net = single(LayerDescriptor::pool("AvgPool", LayerKind::Avgpool, 8, 8, 3, 1, Padding::Valid));
        assert_eq!(avgpool_width(64), 14);
        let input: Vec<u8> = (0..192).map(|i| (i * 31 % 256) as u8).collect();
        let t = NetworkTensors {
            input: Tensor::from_data(8, 8, 3, input).unwrap(),
            weights: HashMap::new(),
        };
        let run = functional(&net, &t);
        let (_, expect) = reference_inference(&net, &t).unwrap();
        assert_eq!(run.output.unwrap(), expect);
    }

    #[test]
    fn functional_cycles_match_analytic() {
        let net = toy_network();
        let t = NetworkTensors::random(&net, 3);
        let run = functional(&net, &t);
        for layer in &run.report.per_layer {
            let measured = layer.measured_compute_cycles.as_ref().unwrap();
            for (&phase, &cycles) in measured {
                assert_eq!(cycles, layer.cycles(phase), "{} {:?}", layer.name, phase);
            }
        }
    }

    #[test]
    fn toy_network_matches_reference() {
        let net = toy_network();
        for seed in 0..3 {
            let t = NetworkTensors::random(&net, seed);
            let run = functional(&net, &t);
            let (trace, expect) = reference_inference(&net, &t).unwrap();
            for ((k1, a), (k2, b)) in run.trace.iter().zip(&trace) {
                assert_eq!(k1, k2);
                assert_eq!(a, b, "layer {k1}");
            }
            assert_eq!(run.output.unwrap(), expect);
        }
    }

    #[test]
    fn split_and_pair_layers_match_reference() {
        // 5x5 splits into three lanes per channel; 300 channels span an array pair.
        for l in [
            LayerDescriptor::conv("split", 5, 5, 5, 3, 4, 1, Padding::Same),
            LayerDescriptor::conv("pair", 2, 1, 3, 300, 2, 1, Padding::Same),
            LayerDescriptor::conv("packed", 4, 1, 1, 20, 3, 2, Padding::Valid),
            LayerDescriptor::conv("strided", 7, 3, 3, 2, 3, 2, Padding::Valid),
        ] {
            let net = single(l);
            let t = NetworkTensors::random(&net, 11);
            let run = functional(&net, &t);
            let (_, expect) = reference_inference(&net, &t).unwrap();
            assert_eq!(run.output.unwrap(), expect, "{}", net.layers.len());
        }
    }

    #[test]
    fn empty_network_costs_nothing() {
        let net = NetworkDescriptor::empty("e");
        let run = run_network(&net, &cfg(), &CostCalibration::default(), &ExecutionMode::analytic(1), None).unwrap();
        assert_eq!(run.report.total_latency_s, 0.0);
        assert_eq!(run.report.total_energy_j, 0.0);
    }

    #[test]
    fn filters_load_once_per_batch() {
        let net = inception_v3();
        let cal = CostCalibration::default();
        let one = run_network(&net, &cfg(), &cal, &ExecutionMode::analytic(1), None).unwrap().report;
        let many = run_network(&net, &cfg(), &cal, &ExecutionMode::analytic(8), None).unwrap().report;
        assert_eq!(one.phase_cycles(Phase::FilterLoad), many.phase_cycles(Phase::FilterLoad));
        assert_eq!(8 * one.phase_cycles(Phase::Mac), many.phase_cycles(Phase::Mac));
        assert!(many.throughput_inferences_per_s > one.throughput_inferences_per_s);
    }

    #[test]
    fn pool_has_no_filter_cost() {
        let l = LayerDescriptor::pool("p", LayerKind::Maxpool, 147, 3, 64, 2, Padding::Valid);
        assert_eq!(load_filters(&l, &CostCalibration::default()), 0);
    }

    #[test]
    fn spill_only_beyond_io_ways() {
        let c = cfg();
        let cal = CostCalibration::default();
        let small = LayerDescriptor::conv("s", 8, 3, 3, 4, 4, 1, Padding::Same);
        assert_eq!(spill_cycles(&small, 1, &c, &cal), 0);
        let big = LayerDescriptor::conv("Conv2D_2b_3x3", 147, 3, 3, 32, 64, 1, Padding::Same);
        assert_eq!(spill_cycles(&big, 1, &c, &cal), 0);
        assert!(spill_cycles(&big, 16, &c, &cal) > 0);
    }

    #[test]
    fn input_reuse_streams_three_of_nine() {
        let l = LayerDescriptor::conv("c", 35, 3, 3, 64, 96, 1, Padding::Same);
        let plan = plan_layer(&l, &cfg()).unwrap();
        assert_eq!(plan.input_bytes_per_step, 3);
        let cal = CostCalibration {
            input_transfer_cycles: 1.0,
            ..CostCalibration::default()
        };
        let pix = plan.max_slice_pixels();
        let groups = (pix / plan.serial_iterations).max(1);
        let bytes = pix * 3 * 64 + groups * 6 * 64;
        assert_eq!(stream_inputs(&l, &plan, &cfg(), &cal, false), (bytes * 8).div_ceil(512) as u64);
    }

    #[test]
    fn functional_rejects_too_many_filters() {
        let net = single(LayerDescriptor::fc("fc", 2048, 1001));
        let t = NetworkTensors::random(&net, 0);
        let err = run_network(&net, &cfg(), &CostCalibration::microcode(), &ExecutionMode::functional(1), Some(&t));
        assert!(matches!(err, Err(EngineError::Unsupported { .. })));
    }

    #[test]
    fn functional_respects_memory_cap() {
        let net = toy_network();
        let t = NetworkTensors::random(&net, 0);
        let mode = ExecutionMode {
            max_functional_bytes: 1024,
            ..ExecutionMode::functional(1)
        };
        let err = run_network(&net, &cfg(), &CostCalibration::microcode(), &mode, Some(&t));
        assert!(matches!(err, Err(EngineError::MemoryBudget { .. })));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let net = toy_network();
        let t = NetworkTensors::random(&net, 5);
        let runs: Vec<_> = [1, 4]
            .iter()
            .map(|&n| {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
                pool.install(|| functional(&net, &t))
            })
            .collect();
        assert_eq!(runs[0].output, runs[1].output);
        assert_eq!(runs[0].report, runs[1].report);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn random_small_convs_match_reference(
            h in 3usize..7, r in 1usize..4, c in 1usize..9, m in 1usize..5, u in 1usize..3, same in any::<bool>(), seed in 0u64..1000
        ) {
            let padding = if same { Padding::Same } else { Padding::Valid };
            prop_assume!(same || r <= h);
            let net = single(LayerDescriptor::conv("p", h, r, r, c, m, u, padding));
            let t = NetworkTensors::random(&net, seed);
            let run = functional(&net, &t);
            let (_, expect) = reference_inference(&net, &t).unwrap();
            prop_assert_eq!(run.output.unwrap(), expect);
        }
    }
}
