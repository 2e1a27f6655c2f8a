//! Layer-to-cache mapping: filter packing and splitting, channel padding,
//! lane assignment, slice partitioning and word-line regions.
//!
//! Each bit line holds the filter bytes of one channel slice; the lanes of one
//! convolution (its padded channel group) are reduced together after the
//! MACs. Slices own contiguous runs of output pixels. Within a slice the
//! convolution slots are split into pixel groups, each covering every output
//! channel, so a serial iteration advances every group by one pixel.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{compute_arrays_per_slice, GeometryConfig};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("layer `{name}`: {reason}")]
    Invalid { name: String, reason: String },
    #[error("layer `{name}` needs {padded} lanes per convolution, more than two arrays provide")]
    Unmappable { name: String, padded: usize },
    #[error("layer `{name}`: regions need {needed} word lines, array has {available}")]
    RegionOverflow {
        name: String,
        needed: usize,
        available: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Maxpool,
    Avgpool,
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Valid,
    Same,
}

/// Per-channel affine step applied to 32-bit accumulators:
/// `((v * multiplier) >> shift) + bias[m]`, modulo 2^32.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNorm {
    pub multiplier: u16,
    pub shift: u32,
    pub bias: Vec<i32>,
}

/// One DNN layer. Spatial shapes are square: `H == W`, one output size `E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDescriptor {
    pub name: String,
    pub kind: LayerKind,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "E")]
    pub e: usize,
    #[serde(rename = "U")]
    pub u: usize,
    #[serde(default)]
    pub padding: Padding,
    #[serde(default)]
    pub relu: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batchnorm: Option<BatchNorm>,
    /// Raw weight tensor, `[M][R][S][C]` bytes plus a JSON sidecar.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
}

pub fn output_dim(h: usize, r: usize, u: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => (h - r) / u + 1,
        Padding::Same => h.div_ceil(u),
    }
}

impl LayerDescriptor {
    pub fn conv(name: &str, h: usize, r: usize, s: usize, c: usize, m: usize, u: usize, padding: Padding) -> Self {
        LayerDescriptor {
            name: name.to_string(),
            kind: LayerKind::Conv,
            h,
            w: h,
            c,
            r,
            s,
            m,
            e: output_dim(h, r.max(s), u, padding),
            u,
            padding,
            relu: true,
            batchnorm: None,
            weights: None,
        }
    }

    pub fn pool(name: &str, kind: LayerKind, h: usize, r: usize, c: usize, u: usize, padding: Padding) -> Self {
        LayerDescriptor {
            name: name.to_string(),
            kind,
            h,
            w: h,
            c,
            r,
            s: r,
            m: c,
            e: output_dim(h, r, u, padding),
            u,
            padding,
            relu: false,
            batchnorm: None,
            weights: None,
        }
    }

    pub fn fc(name: &str, c: usize, m: usize) -> Self {
        LayerDescriptor {
            kind: LayerKind::Fc,
            relu: false,
            ..LayerDescriptor::conv(name, 1, 1, 1, c, m, 1, Padding::Valid)
        }
    }

    pub fn has_filters(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::Fc)
    }

    pub fn is_pool(&self) -> bool {
        !self.has_filters()
    }

    pub fn output_pixels(&self) -> usize {
        self.e * self.e
    }

    /// M×E×E convolutions for conv/fc layers, C×E×E outputs for pools.
    pub fn conv_count(&self) -> usize {
        self.m * self.output_pixels()
    }

    pub fn filter_bytes(&self) -> usize {
        if self.has_filters() {
            self.r * self.s * self.c * self.m
        } else {
            0
        }
    }

    pub fn input_bytes(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn output_bytes(&self) -> usize {
        self.conv_count()
    }

    /// Leading padding rows/columns for `same` layers.
    pub fn pad_before(&self) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let total = |n: usize, k: usize| ((self.e - 1) * self.u + k).saturating_sub(n);
                (total(self.h, self.r) / 2, total(self.w, self.s) / 2)
            }
        }
    }

    pub fn validate(&self) -> Result<(), MapError> {
        let bad = |reason: String| {
            Err(MapError::Invalid {
                name: self.name.clone(),
                reason,
            })
        };
        for (f, v) in [("H", self.h), ("W", self.w), ("C", self.c), ("R", self.r), ("S", self.s), ("M", self.m), ("E", self.e), ("U", self.u)] {
            if v == 0 {
                return bad(format!("{f} must be positive"));
            }
        }
        if self.h != self.w {
            return bad(format!("only square inputs are supported (H={}, W={})", self.h, self.w));
        }
        if self.padding == Padding::Valid && (self.r > self.h || self.s > self.w) {
            return bad(format!("{}x{} window exceeds {}x{} input", self.r, self.s, self.h, self.w));
        }
        let expect = match self.padding {
            Padding::Valid => output_dim(self.h, self.r.max(self.s), self.u, Padding::Valid),
            Padding::Same => output_dim(self.h, self.r, self.u, Padding::Same),
        };
        if self.padding == Padding::Valid && self.r != self.s {
            let er = output_dim(self.h, self.r, self.u, Padding::Valid);
            let es = output_dim(self.w, self.s, self.u, Padding::Valid);
            if er != es {
                return bad(format!("valid {}x{} window gives a non-square output", self.r, self.s));
            }
        }
        if self.e != expect {
            return bad(format!("E={} but H={}, R={}, U={} give {expect}", self.e, self.h, self.r, self.u));
        }
        if self.is_pool() && self.m != self.c {
            return bad(format!("pooling keeps channels, M={} C={}", self.m, self.c));
        }
        if self.kind == LayerKind::Fc && (self.r, self.s, self.h, self.e) != (1, 1, 1, 1) {
            return bad("fully connected layers are 1x1 convolutions on a 1x1 input".into());
        }
        if let Some(bn) = &self.batchnorm {
            if bn.bias.len() != self.m {
                return bad(format!("batchnorm has {} biases for {} channels", bn.bias.len(), self.m));
            }
            if bn.shift > 16 {
                return bad(format!("batchnorm shift {} exceeds 16", bn.shift));
            }
        }
        Ok(())
    }
}

/// Outcome of mapping one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPlan {
    pub layer: String,
    pub kind: LayerKind,
    /// Filter bytes per bit line after packing or splitting (window size for pools).
    pub effective_rs: usize,
    pub packing_factor: usize,
    pub split_factor: usize,
    pub padded_channels: usize,
    pub filters_per_array: usize,
    /// Convolutions (or pooled outputs) per array; for a convolution spanning
    /// two arrays this is 1 per array pair.
    pub convs_per_array: usize,
    /// Arrays one convolution spans (2 when its lanes exceed one array).
    pub arrays_per_conv: usize,
    pub lanes_used_per_array: usize,
    pub convs_per_slice: usize,
    pub parallel_convs: usize,
    /// Independent pixel groups per slice, each holding every output channel.
    pub pixel_groups_per_slice: usize,
    /// Passes over the output channels when they exceed a slice's slots.
    pub filter_passes: usize,
    pub serial_iterations: usize,
    pub arrays_active: usize,
    pub arrays_active_per_slice: usize,
    pub conv_count: usize,
    pub utilization: f64,
    pub filter_bytes: usize,
    /// New input bytes each lane receives per serial iteration.
    pub input_bytes_per_step: usize,
    /// Input bytes per lane kept from the previous iteration.
    pub input_bytes_reused: usize,
    pub wordlines: usize,
    pub per_slice_output_ranges: Vec<Range<usize>>,
}

impl LayoutPlan {
    /// Largest number of output pixels any slice owns.
    pub fn max_slice_pixels(&self) -> usize {
        self.per_slice_output_ranges.iter().map(|r| r.len()).max().unwrap_or(0)
    }

    pub fn reduction_levels(&self) -> u32 {
        self.padded_channels.trailing_zeros()
    }
}

/// Word-line map of one compute array. Every active array of a layer uses
/// the same map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAllocation {
    pub filter_region: Range<usize>,
    pub partial_sum_region: Range<usize>,
    pub scratch_region: Range<usize>,
    /// Overlays the partial sums, the scratch pad and the head of the input region.
    pub reduction_region: Range<usize>,
    pub input_region: Range<usize>,
    pub output_region: Range<usize>,
    /// Outputs produced per residency do not fit and spill to the I/O way.
    pub output_spill: bool,
}

pub const PARTIAL_SUM_BITS: usize = 24;
pub const SCRATCH_ROWS: usize = 16;
pub const REDUCTION_ROWS: usize = 64;
pub const ACCUMULATOR_BITS: usize = 32;
/// Largest filter footprint per bit line before splitting, in bytes.
pub const MAX_LANE_FILTER_BYTES: usize = 9;
/// Largest number of 1x1 channels packed onto one bit line.
pub const MAX_PACKED_CHANNELS: usize = 16;

/// Contiguous, balanced output-pixel ranges, one per slice.
pub fn partition_outputs(layer: &LayerDescriptor, cfg: &GeometryConfig) -> Vec<Range<usize>> {
    partition(layer.output_pixels(), cfg.num_slices)
}

pub(crate) fn partition(total: usize, parts: usize) -> Vec<Range<usize>> {
    let base = total / parts;
    let extra = total % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

pub fn plan_layer(layer: &LayerDescriptor, cfg: &GeometryConfig) -> Result<LayoutPlan, MapError> {
    layer.validate()?;
    let arrays = compute_arrays_per_slice(cfg);
    let bitlines = cfg.bitlines_per_array;
    let ranges = partition_outputs(layer, cfg);
    let pix = ranges.iter().map(|r| r.len()).max().unwrap_or(0);
    let rs = layer.r * layer.s;

    if layer.is_pool() {
        let per_slice = pix * layer.c;
        let lanes = arrays * bitlines;
        let ser = per_slice.div_ceil(lanes).max(1);
        let arrays_used = per_slice.div_ceil(bitlines).min(arrays);
        return Ok(LayoutPlan {
            layer: layer.name.clone(),
            kind: layer.kind,
            effective_rs: rs,
            packing_factor: 1,
            split_factor: 1,
            padded_channels: 1,
            filters_per_array: 0,
            convs_per_array: bitlines,
            arrays_per_conv: 1,
            lanes_used_per_array: bitlines,
            convs_per_slice: lanes,
            parallel_convs: lanes * cfg.num_slices,
            pixel_groups_per_slice: lanes,
            filter_passes: 1,
            serial_iterations: ser,
            arrays_active: arrays_used * cfg.num_slices,
            arrays_active_per_slice: arrays_used,
            conv_count: layer.conv_count(),
            utilization: layer.conv_count() as f64 / (ser * lanes * cfg.num_slices) as f64,
            filter_bytes: 0,
            input_bytes_per_step: layer.r * layer.u.min(layer.s),
            input_bytes_reused: rs - layer.r * layer.u.min(layer.s),
            wordlines: cfg.wordlines_per_array,
            per_slice_output_ranges: ranges,
        });
    }

    let packing = if rs == 1 {
        layer.c.min(MAX_PACKED_CHANNELS)
    } else {
        (MAX_LANE_FILTER_BYTES / rs).clamp(1, layer.c)
    };
    let split = if rs > MAX_LANE_FILTER_BYTES { rs.div_ceil(MAX_LANE_FILTER_BYTES) } else { 1 };
    let effective_rs = if split > 1 { rs.div_ceil(split) } else { rs * packing };
    let padded = (layer.c.div_ceil(packing) * split).next_power_of_two();
    if padded > 2 * bitlines {
        return Err(MapError::Unmappable {
            name: layer.name.clone(),
            padded,
        });
    }
    let arrays_per_conv = padded.div_ceil(bitlines);
    let convs_per_array = (bitlines / padded).max(1);
    let convs_per_slice = arrays / arrays_per_conv * convs_per_array;
    let (groups, passes, ser) = if layer.m <= convs_per_slice {
        let groups = convs_per_slice / layer.m;
        (groups, 1, pix.div_ceil(groups).max(1))
    } else {
        let passes = layer.m.div_ceil(convs_per_slice);
        (1, passes, pix.max(1) * passes)
    };
    let slots_used = if passes > 1 { convs_per_slice } else { groups.min(pix.max(1)) * layer.m };
    let arrays_used = (slots_used.div_ceil(convs_per_array) * arrays_per_conv).min(arrays);
    let parallel = convs_per_slice * cfg.num_slices;
    let step_new = (layer.r * layer.u.min(layer.s) * packing).div_ceil(split).min(effective_rs);
    Ok(LayoutPlan {
        layer: layer.name.clone(),
        kind: layer.kind,
        effective_rs,
        packing_factor: packing,
        split_factor: split,
        padded_channels: padded,
        filters_per_array: convs_per_array,
        convs_per_array,
        arrays_per_conv,
        lanes_used_per_array: (convs_per_array * padded).min(bitlines),
        convs_per_slice,
        parallel_convs: parallel,
        pixel_groups_per_slice: groups,
        filter_passes: passes,
        serial_iterations: ser,
        arrays_active: arrays_used * cfg.num_slices,
        arrays_active_per_slice: arrays_used,
        conv_count: layer.conv_count(),
        utilization: layer.conv_count() as f64 / (ser * parallel) as f64,
        filter_bytes: layer.filter_bytes(),
        input_bytes_per_step: step_new,
        input_bytes_reused: effective_rs - step_new,
        wordlines: cfg.wordlines_per_array,
        per_slice_output_ranges: ranges,
    })
}

/// Word-line layout: filter bytes first, then partial sums and scratch pad,
/// then an input region that the reduction overlays, with the output region
/// at the top of the array.
pub fn allocate_regions(plan: &LayoutPlan) -> Result<RegionAllocation, MapError> {
    let rows = plan.wordlines;
    let filter_rows = if plan.filter_bytes > 0 { plan.effective_rs * 8 } else { 0 };
    let min_input = REDUCTION_ROWS - PARTIAL_SUM_BITS - SCRATCH_ROWS;
    let needed = filter_rows + REDUCTION_ROWS;
    if needed > rows {
        return Err(MapError::RegionOverflow {
            name: plan.layer.clone(),
            needed,
            available: rows,
        });
    }
    let psum = filter_rows..filter_rows + PARTIAL_SUM_BITS;
    let scratch = psum.end..psum.end + SCRATCH_ROWS;
    let free = rows - scratch.end;
    let per_lane_outputs = plan.serial_iterations.div_ceil(plan.padded_channels.min(plan.lanes_used_per_array).max(1));
    let wanted = ACCUMULATOR_BITS * per_lane_outputs;
    let room = (free - min_input) / ACCUMULATOR_BITS * ACCUMULATOR_BITS;
    let out_rows = wanted.min(room);
    let input = scratch.end..rows - out_rows;
    Ok(RegionAllocation {
        filter_region: 0..filter_rows,
        partial_sum_region: psum.clone(),
        scratch_region: scratch,
        reduction_region: psum.start..psum.start + REDUCTION_ROWS,
        input_region: input.clone(),
        output_region: input.end..rows,
        output_spill: out_rows < wanted,
    })
}
