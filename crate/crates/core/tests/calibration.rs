//! The default movement parameters are the frozen result of fitting the
//! built-in Inception v3 run to 4.72 ms on 14 slices and to the peak batched
//! throughput.

use insram_core::costmodel::{calibrate, MOVEMENT_SPLIT, PEAK_BATCH, PEAK_THROUGHPUT_PER_SOCKET};
use insram_core::engine::{run_network, ExecutionMode};
use insram_core::geometry::{CostCalibration, GeometryConfig};
use insram_core::model_io::inception_v3;

#[test]
fn defaults_match_fresh_fit() {
    let cfg = GeometryConfig::default();
    let base = CostCalibration::default();
    let net = inception_v3();
    let fit = calibrate(&net, &cfg, &base, 4.72e-3, MOVEMENT_SPLIT, PEAK_BATCH, PEAK_THROUGHPUT_PER_SOCKET).unwrap();
    println!(
        "dram_filter_bytes_per_cycle = {:.6}, input_transfer_cycles = {:.6}, output_transfer_cycles = {:.6}, dram_bound_fraction = {:.6}",
        fit.dram_filter_bytes_per_cycle, fit.input_transfer_cycles, fit.output_transfer_cycles, fit.dram_bound_fraction
    );
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    assert!(rel(base.dram_filter_bytes_per_cycle, fit.dram_filter_bytes_per_cycle) < 1e-4);
    assert!(rel(base.input_transfer_cycles, fit.input_transfer_cycles) < 1e-4);
    assert!(rel(base.output_transfer_cycles, fit.output_transfer_cycles) < 1e-4);
    assert!(rel(base.dram_bound_fraction, fit.dram_bound_fraction) < 1e-4);

    let one = run_network(&net, &cfg, &fit, &ExecutionMode::analytic(1), None).unwrap().report;
    assert!(rel(one.total_latency_s, 4.72e-3) < 1e-4);
    let peak = run_network(&net, &cfg, &fit, &ExecutionMode::analytic(PEAK_BATCH), None).unwrap().report;
    assert!(rel(peak.throughput_inferences_per_s, PEAK_THROUGHPUT_PER_SOCKET) < 1e-3);
}
