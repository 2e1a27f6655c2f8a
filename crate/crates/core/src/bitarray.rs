//! Bit-exact model of one compute-capable SRAM array.
//!
//! Data is stored transposed: bit `k` of the element on lane `j` lives at
//! `grid[start + k][j]`, least significant bit first. Every compute cycle
//! activates two word lines, senses AND on the bit line and NOR on its
//! complement, and feeds a per-lane full adder whose carry and a predication
//! tag are held in latches below the array. One of four sources (sum, carry
//! out, the data-in latch or the tag) is written back to a destination row.

use std::fmt::Write as _;
use std::ops::Range;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ArrayError {
    #[error("row {row} out of range (array has {rows} word lines)")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("lane range {start}..{end} out of range (array has {lanes} bit lines)")]
    LaneOutOfRange {
        start: usize,
        end: usize,
        lanes: usize,
    },
    #[error("both sensed operands name row {0}")]
    SameRow(usize),
    #[error("operand regions overlap")]
    Overlap,
    #[error("operand width mismatch: {0}")]
    WidthMismatch(String),
    #[error("operand lane ranges differ")]
    LaneMismatch,
    #[error("carry latch must be cleared before this operation")]
    CarryNotCleared,
    #[error("group size {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("operation needs {needed} rows from row {start}, array has {rows}")]
    InsufficientRows {
        start: usize,
        needed: usize,
        rows: usize,
    },
    #[error("element width {0} exceeds 64 bits")]
    TooWide(usize),
}

/// Value written back to the destination row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Writeback {
    Sum,
    Carry,
    DataIn,
    Tag,
}

/// What a sense amplifier sees on one input of the adder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Sense {
    Row(usize),
    /// Row read through the complement bit line.
    Inverted(usize),
    Zero,
    One,
}

/// A transposed operand: `width` consecutive word lines over a lane range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperandRegion {
    pub start: usize,
    pub width: usize,
    pub lanes: Range<usize>,
}

impl OperandRegion {
    pub fn new(start: usize, width: usize, lanes: Range<usize>) -> Self {
        OperandRegion {
            start,
            width,
            lanes,
        }
    }

    pub fn rows(&self) -> Range<usize> {
        self.start..self.start + self.width
    }

    pub fn row(&self, k: usize) -> usize {
        self.start + k
    }

    /// The same lanes, `width` rows starting at `start`.
    pub fn at(&self, start: usize, width: usize) -> Self {
        OperandRegion::new(start, width, self.lanes.clone())
    }

    fn overlaps(&self, other: &OperandRegion) -> bool {
        self.start < other.start + other.width && other.start < self.start + self.width
    }
}

/// Result of a divide: charged cycles plus lanes whose divisor was zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DivideOutcome {
    pub cycles: u64,
    pub zero_divisor_lanes: Vec<usize>,
}

/// Combining operator for lane trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fold {
    Sum,
    Max,
    Min,
}

/// Widest running sum a lane reduction keeps.
pub const MAX_REDUCTION_BITS: usize = 32;

pub fn add_cycles(n: usize) -> u64 {
    n as u64 + 1
}

pub fn subtract_cycles(n: usize) -> u64 {
    n as u64 + 2
}

/// `n`-bit multiplicand by `m`-bit multiplier.
pub fn multiply_cycles(n: usize, m: usize) -> u64 {
    let (n, m) = (n as u64, m as u64);
    n * m + n + 4 * m - 2
}

/// 1.5n² + 5.5n, always an integer.
pub fn divide_cycles(n: usize) -> u64 {
    let n = n as u64;
    n * (3 * n + 11) / 2
}

/// Add an `n`-bit operand into a `w`-bit accumulator, dropping the overflow.
pub fn accumulate_cycles(w: usize) -> u64 {
    w as u64 + 1
}

/// Rows zeroed per bulk-reset cycle.
pub const ZERO_ROWS_PER_CYCLE: usize = 8;

pub fn zero_rows_cycles(rows: usize) -> u64 {
    rows.div_ceil(ZERO_ROWS_PER_CYCLE) as u64
}

/// Per-row move cost of word-line copies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoveCost {
    pub cycles_per_row: f64,
    pub speedup: f64,
}

impl Default for MoveCost {
    fn default() -> Self {
        MoveCost {
            cycles_per_row: 1.0,
            speedup: 1.0,
        }
    }
}

impl MoveCost {
    pub fn cycles(&self, rows: usize) -> u64 {
        (self.cycles_per_row * rows as f64 / self.speedup - 1e-9).ceil() as u64
    }
}

pub fn max_cycles(n: usize, mv: MoveCost) -> u64 {
    subtract_cycles(n) + 1 + mv.cycles(n)
}

/// Widths of the running sum after each of the `steps` levels of a lane reduction
/// that starts at `w0` bits.
fn reduction_widths(w0: usize, steps: u32) -> impl Iterator<Item = usize> {
    (0..steps as usize).map(move |s| (w0 + s).min(MAX_REDUCTION_BITS.max(w0)))
}

/// Cycles of a summing lane tree over `group` lanes starting at `w0` bits.
pub fn reduce_cycles(w0: usize, group: usize, mv: MoveCost) -> u64 {
    reduction_widths(w0, group.trailing_zeros())
        .map(|w| mv.cycles(w) + w as u64 + 1)
        .sum()
}

/// Cycles of a min or max lane tree over `group` elements of `n` bits.
pub fn fold_tree_cycles(n: usize, group: usize, mv: MoveCost) -> u64 {
    group.trailing_zeros() as u64 * (mv.cycles(n) + max_cycles(n, mv))
}

/// One compute-enabled SRAM array.
#[derive(Debug, Clone)]
pub struct BitArray {
    rows: usize,
    lanes: usize,
    words: usize,
    grid: Vec<u64>,
    carry: Vec<u64>,
    tag: Vec<u64>,
    data_in: Vec<u64>,
    tail_mask: u64,
    move_cost: MoveCost,
    energy_per_cycle_pj: f64,
    cycle_count: u64,
    micro_ops: u64,
    energy_pj: f64,
}

impl BitArray {
    /// Zeroed array of `rows` word lines by `lanes` bit lines.
    pub fn new(rows: usize, lanes: usize) -> Self {
        let words = lanes.div_ceil(64);
        let tail = lanes % 64;
        BitArray {
            rows,
            lanes,
            words,
            grid: vec![0; rows * words],
            carry: vec![0; words],
            tag: vec![0; words],
            data_in: vec![0; words],
            tail_mask: if tail == 0 { !0 } else { (1u64 << tail) - 1 },
            move_cost: MoveCost::default(),
            energy_per_cycle_pj: 15.4,
            cycle_count: 0,
            micro_ops: 0,
            energy_pj: 0.0,
        }
    }

    pub fn with_costs(mut self, move_cost: MoveCost, energy_per_cycle_pj: f64) -> Self {
        self.move_cost = move_cost;
        self.energy_per_cycle_pj = energy_per_cycle_pj;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn move_cost(&self) -> MoveCost {
        self.move_cost
    }

    /// Charged cycles (closed-form where an operation defines one).
    pub fn cycle_count(&self) -> u64 {
        self.cycle_count
    }

    /// Micro-operations actually issued to the array.
    pub fn micro_ops(&self) -> u64 {
        self.micro_ops
    }

    pub fn energy_pj(&self) -> f64 {
        self.energy_pj
    }

    pub fn region(&self, start: usize, width: usize) -> OperandRegion {
        OperandRegion::new(start, width, 0..self.lanes)
    }

    // ---- host-side access (not charged) ----

    pub fn bit(&self, row: usize, lane: usize) -> bool {
        self.grid[row * self.words + lane / 64] >> (lane % 64) & 1 == 1
    }

    pub fn set_bit(&mut self, row: usize, lane: usize, v: bool) {
        let w = &mut self.grid[row * self.words + lane / 64];
        if v {
            *w |= 1 << (lane % 64);
        } else {
            *w &= !(1 << (lane % 64));
        }
    }

    pub fn carry_bit(&self, lane: usize) -> bool {
        self.carry[lane / 64] >> (lane % 64) & 1 == 1
    }

    pub fn tag_bit(&self, lane: usize) -> bool {
        self.tag[lane / 64] >> (lane % 64) & 1 == 1
    }

    pub fn row_words(&self, row: usize) -> &[u64] {
        &self.grid[row * self.words..(row + 1) * self.words]
    }

    pub fn set_row_words(&mut self, row: usize, bits: &[u64]) {
        let words = self.words;
        let tail = self.tail_mask;
        let dst = &mut self.grid[row * words..(row + 1) * words];
        dst.copy_from_slice(&bits[..words]);
        dst[words - 1] &= tail;
    }

    pub fn set_data_in(&mut self, bits: &[u64]) {
        self.data_in.copy_from_slice(&bits[..self.words]);
    }

    pub fn set_tag(&mut self, bits: &[u64]) {
        self.tag.copy_from_slice(&bits[..self.words]);
    }

    /// Write one element per lane of `region` in transposed form.
    pub fn write_elements(&mut self, region: &OperandRegion, values: &[u64]) -> Result<(), ArrayError> {
        self.check_region(region)?;
        if region.width > 64 {
            return Err(ArrayError::TooWide(region.width));
        }
        if values.len() != region.lanes.len() {
            return Err(ArrayError::WidthMismatch(format!(
                "{} values for {} lanes",
                values.len(),
                region.lanes.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            let lane = region.lanes.start + i;
            for k in 0..region.width {
                self.set_bit(region.row(k), lane, v >> k & 1 == 1);
            }
        }
        Ok(())
    }

    /// Read one element per lane of `region`.
    pub fn read_elements(&self, region: &OperandRegion) -> Result<Vec<u64>, ArrayError> {
        self.check_region(region)?;
        if region.width > 64 {
            return Err(ArrayError::TooWide(region.width));
        }
        Ok(region
            .lanes
            .clone()
            .map(|lane| {
                (0..region.width).fold(0u64, |acc, k| acc | (self.bit(region.row(k), lane) as u64) << k)
            })
            .collect())
    }

    /// Rows of '0'/'1' characters, lane 0 first, then the carry and tag latches.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity((self.rows + 2) * (self.lanes + 8));
        let line = |out: &mut String, f: &dyn Fn(usize) -> bool| {
            for lane in 0..self.lanes {
                out.push(if f(lane) { '1' } else { '0' });
            }
            out.push('\n');
        };
        for r in 0..self.rows {
            line(&mut out, &|l| self.bit(r, l));
        }
        out.push_str("carry ");
        line(&mut out, &|l| self.carry_bit(l));
        out.push_str("tag   ");
        line(&mut out, &|l| self.tag_bit(l));
        out
    }

    /// One row as a '0'/'1' string.
    pub fn dump_row(&self, row: usize) -> String {
        let mut s = String::with_capacity(self.lanes);
        for lane in 0..self.lanes {
            let _ = write!(s, "{}", self.bit(row, lane) as u8);
        }
        s
    }

    // ---- checks ----

    fn check_row(&self, row: usize) -> Result<(), ArrayError> {
        if row >= self.rows {
            Err(ArrayError::RowOutOfRange {
                row,
                rows: self.rows,
            })
        } else {
            Ok(())
        }
    }

    fn check_region(&self, r: &OperandRegion) -> Result<(), ArrayError> {
        if r.start + r.width > self.rows {
            return Err(ArrayError::InsufficientRows {
                start: r.start,
                needed: r.width,
                rows: self.rows,
            });
        }
        if r.lanes.start > r.lanes.end || r.lanes.end > self.lanes {
            return Err(ArrayError::LaneOutOfRange {
                start: r.lanes.start,
                end: r.lanes.end,
                lanes: self.lanes,
            });
        }
        Ok(())
    }

    fn check_disjoint(regions: &[&OperandRegion]) -> Result<(), ArrayError> {
        for (i, a) in regions.iter().enumerate() {
            for b in &regions[i + 1..] {
                if a.overlaps(b) {
                    return Err(ArrayError::Overlap);
                }
            }
        }
        Ok(())
    }

    fn check_lanes(regions: &[&OperandRegion]) -> Result<(), ArrayError> {
        if regions.windows(2).all(|w| w[0].lanes == w[1].lanes) {
            Ok(())
        } else {
            Err(ArrayError::LaneMismatch)
        }
    }

    fn lane_mask(&self, lanes: &Range<usize>) -> Vec<u64> {
        let mut mask = vec![0u64; self.words];
        if lanes.is_empty() {
            return mask;
        }
        for (w, m) in mask.iter_mut().enumerate() {
            let lo = w * 64;
            let hi = lo + 64;
            let s = lanes.start.max(lo);
            let e = lanes.end.min(hi);
            if s < e {
                let width = e - s;
                let bits = if width == 64 { !0 } else { ((1u64 << width) - 1) << (s - lo) };
                *m = bits;
            }
        }
        mask[self.words - 1] &= self.tail_mask;
        mask
    }

    fn carry_clear_on(&self, mask: &[u64]) -> bool {
        self.carry.iter().zip(mask).all(|(c, m)| c & m == 0)
    }

    // ---- micro-operations ----

    fn sense(&self, s: Sense, w: usize) -> u64 {
        match s {
            Sense::Row(r) => self.grid[r * self.words + w],
            Sense::Inverted(r) => !self.grid[r * self.words + w],
            Sense::Zero => 0,
            Sense::One => !0,
        }
    }

    fn charge(&mut self, cycles: u64, ops: u64) {
        self.cycle_count += cycles;
        self.micro_ops += ops;
        self.energy_pj += cycles as f64 * self.energy_per_cycle_pj;
    }

    /// One adder cycle without charging; `dest = None` only updates the carry latch.
    fn step_raw(
        &mut self,
        a: Sense,
        b: Sense,
        wb: Writeback,
        dest: Option<usize>,
        predicated: bool,
        mask: &[u64],
    ) {
        for w in 0..self.words {
            let x = self.sense(a, w);
            let y = self.sense(b, w);
            let c = self.carry[w];
            let and = x & y;
            let nor = !x & !y;
            let xor = !(and | nor);
            let sum = xor ^ c;
            let cout = and | (xor & c);
            let value = match wb {
                Writeback::Sum => sum,
                Writeback::Carry => cout,
                Writeback::DataIn => self.data_in[w],
                Writeback::Tag => self.tag[w],
            };
            if matches!(wb, Writeback::Sum | Writeback::Carry) {
                self.carry[w] = (c & !mask[w]) | (cout & mask[w]);
            }
            if let Some(d) = dest {
                let m = mask[w] & if predicated { self.tag[w] } else { !0 };
                let cell = &mut self.grid[d * self.words + w];
                *cell = (*cell & !m) | (value & m);
            }
        }
    }

    fn step(&mut self, a: Sense, b: Sense, wb: Writeback, dest: Option<usize>, predicated: bool, mask: &[u64]) {
        self.step_raw(a, b, wb, dest, predicated, mask);
        self.charge(1, 1);
    }

    /// Sense two rows and write the selected peripheral output to `dest_row`.
    /// The destination may be one of the sensed rows: sensing completes
    /// before the write-back in the same cycle.
    pub fn compute_step(
        &mut self,
        row_a: usize,
        row_b: usize,
        writeback: Writeback,
        dest_row: usize,
        predicated: bool,
    ) -> Result<u64, ArrayError> {
        self.check_row(row_a)?;
        self.check_row(row_b)?;
        self.check_row(dest_row)?;
        if row_a == row_b {
            return Err(ArrayError::SameRow(row_a));
        }
        let mask = self.lane_mask(&(0..self.lanes));
        self.step(Sense::Row(row_a), Sense::Row(row_b), writeback, Some(dest_row), predicated, &mask);
        Ok(1)
    }

    /// tag ← row, one cycle.
    pub fn load_tag_from_row(&mut self, row: usize) -> Result<u64, ArrayError> {
        self.check_row(row)?;
        let mask = self.lane_mask(&(0..self.lanes));
        self.load_tag_masked(row, &mask);
        Ok(1)
    }

    fn load_tag_masked(&mut self, row: usize, mask: &[u64]) {
        for w in 0..self.words {
            let v = self.grid[row * self.words + w];
            self.tag[w] = (self.tag[w] & !mask[w]) | (v & mask[w]);
        }
        self.charge(1, 1);
    }

    fn set_carry_masked(&mut self, value: bool, mask: &[u64]) {
        for w in 0..self.words {
            let v = if value { !0 } else { 0 };
            self.carry[w] = (self.carry[w] & !mask[w]) | (v & mask[w]);
        }
        self.charge(1, 1);
    }

    /// Preset the carry latch on every lane, one cycle.
    pub fn set_carry(&mut self, value: bool) -> u64 {
        let mask = self.lane_mask(&(0..self.lanes));
        self.set_carry_masked(value, &mask);
        1
    }

    /// dest = a + b. `dest` has width n+1 (final carry kept) or n (dropped).
    pub fn add(&mut self, a: &OperandRegion, b: &OperandRegion, dest: &OperandRegion) -> Result<u64, ArrayError> {
        let n = a.width;
        for r in [a, b, dest] {
            self.check_region(r)?;
        }
        Self::check_lanes(&[a, b, dest])?;
        Self::check_disjoint(&[a, dest])?;
        Self::check_disjoint(&[b, dest])?;
        if b.width != n || !(dest.width == n || dest.width == n + 1) {
            return Err(ArrayError::WidthMismatch(format!(
                "add of {n}+{} bits into {}",
                b.width, dest.width
            )));
        }
        let mask = self.lane_mask(&a.lanes);
        if !self.carry_clear_on(&mask) {
            return Err(ArrayError::CarryNotCleared);
        }
        for k in 0..n {
            self.step(Sense::Row(a.row(k)), Sense::Row(b.row(k)), Writeback::Sum, Some(dest.row(k)), false, &mask);
        }
        let top = (dest.width > n).then(|| dest.row(n));
        self.step(Sense::Zero, Sense::Zero, Writeback::Sum, top, false, &mask);
        Ok(add_cycles(n))
    }

    /// acc += b (b no wider than acc), wrapping modulo 2^acc.width; the carry
    /// latch is cleared at the end.
    pub fn accumulate(&mut self, acc: &OperandRegion, b: &OperandRegion, predicated: bool) -> Result<u64, ArrayError> {
        self.check_region(acc)?;
        self.check_region(b)?;
        Self::check_lanes(&[acc, b])?;
        Self::check_disjoint(&[acc, b])?;
        if b.width > acc.width {
            return Err(ArrayError::WidthMismatch(format!(
                "{}-bit addend into {}-bit accumulator",
                b.width, acc.width
            )));
        }
        let mask = self.lane_mask(&acc.lanes);
        self.accumulate_masked(acc.start, acc.width, Some((b.start, b.width)), predicated, &mask);
        Ok(accumulate_cycles(acc.width))
    }

    fn accumulate_masked(
        &mut self,
        acc: usize,
        w: usize,
        addend: Option<(usize, usize)>,
        predicated: bool,
        mask: &[u64],
    ) {
        for k in 0..w {
            let b = match addend {
                Some((start, n)) if k < n => Sense::Row(start + k),
                _ => Sense::Zero,
            };
            self.step(Sense::Row(acc + k), b, Writeback::Sum, Some(acc + k), predicated, mask);
        }
        self.step(Sense::Zero, Sense::Zero, Writeback::Carry, None, false, mask);
    }

    /// dest = a + !b + 1 over n bits, with dest[n] = 1 iff a < b.
    pub fn subtract(&mut self, a: &OperandRegion, b: &OperandRegion, dest: &OperandRegion) -> Result<u64, ArrayError> {
        let n = a.width;
        for r in [a, b, dest] {
            self.check_region(r)?;
        }
        Self::check_lanes(&[a, b, dest])?;
        Self::check_disjoint(&[a, dest])?;
        Self::check_disjoint(&[b, dest])?;
        if b.width != n || dest.width != n + 1 {
            return Err(ArrayError::WidthMismatch(format!(
                "subtract of {n}-{} bits into {}",
                b.width, dest.width
            )));
        }
        let mask = self.lane_mask(&a.lanes);
        self.subtract_masked(a.start, b.start, n, dest.start, &mask);
        Ok(subtract_cycles(n))
    }

    fn subtract_masked(&mut self, a: usize, b: usize, n: usize, dest: usize, mask: &[u64]) {
        self.set_carry_masked(true, mask);
        for k in 0..n {
            self.step(Sense::Row(a + k), Sense::Inverted(b + k), Writeback::Sum, Some(dest + k), false, mask);
        }
        self.step(Sense::Zero, Sense::One, Writeback::Sum, Some(dest + n), false, mask);
    }

    /// product = a × b. The product region (a.width + b.width rows) is
    /// cleared by the operation itself.
    pub fn multiply(&mut self, a: &OperandRegion, b: &OperandRegion, product: &OperandRegion) -> Result<u64, ArrayError> {
        let (n, m) = (a.width, b.width);
        for r in [a, b, product] {
            self.check_region(r)?;
        }
        Self::check_lanes(&[a, b, product])?;
        Self::check_disjoint(&[a, b, product])?;
        if product.width != n + m || n == 0 || m == 0 {
            return Err(ArrayError::WidthMismatch(format!(
                "{n}x{m}-bit multiply into {} bits",
                product.width
            )));
        }
        let mask = self.lane_mask(&a.lanes);
        self.multiply_masked(a.start, n, b.start, m, product.start, &mask);
        Ok(multiply_cycles(n, m))
    }

    fn multiply_masked(&mut self, a: usize, n: usize, b: usize, m: usize, p: usize, mask: &[u64]) {
        for k in 0..n + m {
            self.step(Sense::Zero, Sense::Zero, Writeback::Carry, Some(p + k), false, mask);
        }
        self.load_tag_masked(b, mask);
        for k in 0..n {
            self.step(Sense::Row(p + k), Sense::Row(a + k), Writeback::Sum, Some(p + k), true, mask);
        }
        for i in 1..m {
            self.load_tag_masked(b + i, mask);
            self.step(Sense::Zero, Sense::Zero, Writeback::Carry, Some(p + i + n), false, mask);
            for k in 0..n {
                self.step(Sense::Row(p + i + k), Sense::Row(a + k), Writeback::Sum, Some(p + i + k), true, mask);
            }
            self.step(Sense::Zero, Sense::Zero, Writeback::Sum, Some(p + i + n), true, mask);
        }
    }

    /// Rows of scratch `divide` needs for n-bit operands.
    pub fn divide_scratch_rows(n: usize) -> usize {
        3 * n + 1
    }

    /// quotient = floor(a / b) by restoring long division. Lanes with a zero
    /// divisor produce an all-ones quotient and are reported.
    pub fn divide(
        &mut self,
        a: &OperandRegion,
        b: &OperandRegion,
        quotient: &OperandRegion,
        scratch: &OperandRegion,
    ) -> Result<DivideOutcome, ArrayError> {
        let n = a.width;
        for r in [a, b, quotient, scratch] {
            self.check_region(r)?;
        }
        Self::check_lanes(&[a, b, quotient, scratch])?;
        Self::check_disjoint(&[a, b, quotient, scratch])?;
        if b.width != n || quotient.width != n || scratch.width < Self::divide_scratch_rows(n) {
            return Err(ArrayError::WidthMismatch(format!(
                "{n}-bit divide needs {n}-bit divisor and quotient and {} scratch rows",
                Self::divide_scratch_rows(n)
            )));
        }
        let zero_divisor_lanes: Vec<usize> = a
            .lanes
            .clone()
            .filter(|&lane| (0..n).all(|k| !self.bit(b.row(k), lane)))
            .collect();
        let mask = self.lane_mask(&a.lanes);
        let before = self.micro_ops;
        // Working register: a in the low n rows, zeros above; the partial
        // remainder is the (n+1)-row window ending at the top.
        let wreg = scratch.start;
        let diff = scratch.start + 2 * n;
        self.copy_masked(a.start, wreg, n, false, &mask, false);
        for k in n..2 * n {
            self.step_raw(Sense::Zero, Sense::Zero, Writeback::Carry, Some(wreg + k), false, &mask);
            self.micro_ops += 1;
        }
        for i in (0..n).rev() {
            let win = wreg + i;
            self.step_raw(Sense::One, Sense::One, Writeback::Carry, None, false, &mask);
            for k in 0..=n {
                let bk = if k < n { Sense::Inverted(b.row(k)) } else { Sense::One };
                self.step_raw(Sense::Row(win + k), bk, Writeback::Sum, Some(diff + k), false, &mask);
            }
            // Carry out set means no borrow: the quotient bit is one.
            self.step_raw(Sense::Zero, Sense::Zero, Writeback::Sum, Some(quotient.row(i)), false, &mask);
            for w in 0..self.words {
                let v = self.grid[quotient.row(i) * self.words + w];
                self.tag[w] = (self.tag[w] & !mask[w]) | (v & mask[w]);
            }
            self.micro_ops += n as u64 + 4;
            self.copy_masked(diff, win, n + 1, true, &mask, false);
        }
        let ops = self.micro_ops - before;
        self.micro_ops = before;
        let cycles = divide_cycles(n);
        self.charge(cycles, ops);
        Ok(DivideOutcome {
            cycles,
            zero_divisor_lanes,
        })
    }

    fn copy_masked(&mut self, src: usize, dest: usize, rows: usize, predicated: bool, mask: &[u64], charge: bool) {
        for r in 0..rows {
            for w in 0..self.words {
                let m = mask[w] & if predicated { self.tag[w] } else { !0 };
                let v = self.grid[(src + r) * self.words + w];
                let cell = &mut self.grid[(dest + r) * self.words + w];
                *cell = (*cell & !m) | (v & m);
            }
        }
        if charge {
            let cycles = self.move_cost.cycles(rows);
            self.charge(cycles, rows as u64);
        } else {
            self.micro_ops += rows as u64;
        }
    }

    /// Copy whole word lines; predicated copies skip lanes whose tag is zero.
    pub fn copy_rows(&mut self, src: Range<usize>, dest: Range<usize>, predicated: bool) -> Result<u64, ArrayError> {
        let s = self.region(src.start, src.len());
        let d = self.region(dest.start, dest.len());
        self.copy_region(&s, &d, predicated)
    }

    pub fn copy_region(&mut self, src: &OperandRegion, dest: &OperandRegion, predicated: bool) -> Result<u64, ArrayError> {
        self.check_region(src)?;
        self.check_region(dest)?;
        Self::check_lanes(&[src, dest])?;
        Self::check_disjoint(&[src, dest])?;
        if src.width != dest.width {
            return Err(ArrayError::WidthMismatch(format!("copy {} rows into {}", src.width, dest.width)));
        }
        let mask = self.lane_mask(&src.lanes);
        let before = self.cycle_count;
        self.copy_masked(src.start, dest.start, src.width, predicated, &mask, true);
        Ok(self.cycle_count - before)
    }

    /// Bulk reset of consecutive rows, eight rows per cycle.
    pub fn zero_rows(&mut self, region: &OperandRegion, predicated: bool) -> Result<u64, ArrayError> {
        self.check_region(region)?;
        let mask = self.lane_mask(&region.lanes);
        for r in region.rows() {
            for w in 0..self.words {
                let m = mask[w] & if predicated { self.tag[w] } else { !0 };
                self.grid[r * self.words + w] &= !m;
            }
        }
        let cycles = zero_rows_cycles(region.width);
        self.charge(cycles, cycles);
        Ok(cycles)
    }

    /// dest[j] = src[j + shift] through the shared sense amplifiers; lanes
    /// past the end of the range receive zero.
    fn move_lanes(&mut self, src: usize, dest: usize, rows: usize, shift: usize, lanes: &Range<usize>) {
        for r in 0..rows {
            for lane in lanes.clone() {
                let from = lane + shift;
                let v = from < lanes.end && self.bit(src + r, from);
                self.set_bit(dest + r, lane, v);
            }
        }
        let cycles = self.move_cost.cycles(rows);
        self.charge(cycles, rows as u64);
    }

    /// acc = max(acc, next) per lane; ties keep acc.
    pub fn elementwise_max(
        &mut self,
        acc: &OperandRegion,
        next: &OperandRegion,
        scratch: &OperandRegion,
    ) -> Result<u64, ArrayError> {
        self.elementwise_select(acc, next, scratch, Fold::Max)
    }

    /// acc = min(acc, next) per lane; ties keep acc.
    pub fn elementwise_min(
        &mut self,
        acc: &OperandRegion,
        next: &OperandRegion,
        scratch: &OperandRegion,
    ) -> Result<u64, ArrayError> {
        self.elementwise_select(acc, next, scratch, Fold::Min)
    }

    fn elementwise_select(
        &mut self,
        acc: &OperandRegion,
        next: &OperandRegion,
        scratch: &OperandRegion,
        op: Fold,
    ) -> Result<u64, ArrayError> {
        let n = acc.width;
        for r in [acc, next, scratch] {
            self.check_region(r)?;
        }
        Self::check_lanes(&[acc, next, scratch])?;
        Self::check_disjoint(&[acc, next, scratch])?;
        if next.width != n || scratch.width < n + 1 {
            return Err(ArrayError::WidthMismatch(format!(
                "{n}-bit select needs {n}-bit operand and {} scratch rows",
                n + 1
            )));
        }
        let mask = self.lane_mask(&acc.lanes);
        let before = self.cycle_count;
        self.select_masked(acc.start, next.start, n, scratch.start, op, &mask);
        Ok(self.cycle_count - before)
    }

    fn select_masked(&mut self, acc: usize, next: usize, n: usize, scratch: usize, op: Fold, mask: &[u64]) {
        match op {
            Fold::Max => self.subtract_masked(acc, next, n, scratch, mask),
            Fold::Min => self.subtract_masked(next, acc, n, scratch, mask),
            Fold::Sum => unreachable!("sum is not a selection"),
        }
        self.load_tag_masked(scratch + n, mask);
        self.copy_masked(next, acc, n, true, mask, true);
    }

    /// Sum each group of `group_size` adjacent lanes into the group's first
    /// lane. The running sum widens by one bit per level up to 32 bits and
    /// needs `MAX_REDUCTION_BITS.max(values.width)` rows from `values.start`
    /// plus as many scratch rows.
    pub fn reduce_lanes(
        &mut self,
        values: &OperandRegion,
        group_size: usize,
        scratch_start: usize,
    ) -> Result<(OperandRegion, u64), ArrayError> {
        self.tree_fold(values, group_size, 1, scratch_start, Fold::Sum)
    }

    /// Lane tree over `group_size` elements spaced `stride` lanes apart.
    /// Sums widen as in `reduce_lanes`; min/max keep their width and need
    /// `2 * width + 1` scratch rows.
    pub fn tree_fold(
        &mut self,
        values: &OperandRegion,
        group_size: usize,
        stride: usize,
        scratch_start: usize,
        op: Fold,
    ) -> Result<(OperandRegion, u64), ArrayError> {
        if !group_size.is_power_of_two() {
            return Err(ArrayError::NotPowerOfTwo(group_size));
        }
        self.check_region(values)?;
        let steps = group_size.trailing_zeros();
        let w0 = values.width;
        let value_rows = match op {
            Fold::Sum if steps > 0 => (w0 + steps as usize).min(MAX_REDUCTION_BITS.max(w0)),
            _ => w0,
        };
        let scratch_rows = match op {
            Fold::Sum => value_rows,
            _ => 2 * w0 + 1,
        };
        let grown = values.at(values.start, value_rows);
        let scratch = values.at(scratch_start, scratch_rows);
        self.check_region(&grown)?;
        self.check_region(&scratch)?;
        Self::check_disjoint(&[&grown, &scratch])?;
        let mask = self.lane_mask(&values.lanes);
        if op == Fold::Sum && steps > 0 && !self.carry_clear_on(&mask) {
            return Err(ArrayError::CarryNotCleared);
        }
        let before = self.cycle_count;
        let mut w = w0;
        for s in 0..steps {
            let shift = stride << s;
            match op {
                Fold::Sum => {
                    self.move_lanes(values.start, scratch_start, w, shift, &values.lanes);
                    for k in 0..w {
                        let r = values.start + k;
                        self.step(Sense::Row(r), Sense::Row(scratch_start + k), Writeback::Sum, Some(r), false, &mask);
                    }
                    if w < MAX_REDUCTION_BITS {
                        self.step(Sense::Zero, Sense::Zero, Writeback::Sum, Some(values.start + w), false, &mask);
                        w += 1;
                    } else {
                        self.step(Sense::Zero, Sense::Zero, Writeback::Carry, None, false, &mask);
                    }
                }
                Fold::Max | Fold::Min => {
                    self.move_lanes(values.start, scratch_start, w, shift, &values.lanes);
                    self.select_masked(values.start, scratch_start, w, scratch_start + w, op, &mask);
                }
            }
        }
        Ok((values.at(values.start, w), self.cycle_count - before))
    }
}
