//! Model-to-netlist compiler.
//!
//! Turns an architecture plus per-layer nonzero masks into a boolean
//! netlist. Weight *values* never enter the circuit structure: a nonzero
//! weight contributes one XNOR against a server-owned sign-bit wire, and a
//! zero weight contributes nothing at all — no gate, no input wire. That
//! elision is what makes sparsity pay off directly in garbled-table bytes.
//!
//! Per output unit of a weighted layer the shape is always:
//! XNOR per nonzero tap (free) → popcount adder tree (1 AND per adder) →
//! for hidden layers a `popcount ≥ ⌈N_eff/2⌉` comparator (≤ 1 non-XOR per
//! sum bit, and exactly 0 when the threshold is a power of two); the final
//! layer keeps the raw popcount bits as a scored output group instead.

use crate::arch::{Architecture, LayerKind, Shape};
use crate::model::for_each_conv_tap;
use crate::netlist::{Gate, Netlist, OutputGroup, CONST0, CONST1};
use crate::tensor::BinaryTensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("architecture error: {0}")]
    Arch(#[from] crate::arch::ArchError),
    #[error("mask count {got} does not match weighted layer count {want}")]
    MaskCount { got: usize, want: usize },
    #[error("mask {index} has {got} bits, layer needs {want}")]
    MaskShape {
        index: usize,
        got: usize,
        want: usize,
    },
    #[error("layer kind {0} cannot be compiled standalone as a final layer")]
    BadOp(&'static str),
}

/// Gate emitter with wire allocation and constant folding.
///
/// Folding keeps constants out of the gate list: AND/OR/XOR against wire 0
/// or 1 reduce to a pass-through, a constant, or a NOT. Degenerate
/// thresholds (t = 0, t > N_eff, power-of-two t) then cost zero gates
/// without any special-casing in the comparator itself.
struct Builder {
    gates: Vec<Gate>,
    next_wire: u32,
}

impl Builder {
    fn new(input_wires: u32) -> Self {
        Builder {
            gates: Vec::new(),
            next_wire: input_wires,
        }
    }

    fn emit(&mut self, make: impl FnOnce(u32) -> Gate) -> u32 {
        let out = self.next_wire;
        self.next_wire += 1;
        self.gates.push(make(out));
        out
    }

    fn xor(&mut self, a: u32, b: u32) -> u32 {
        match (a, b) {
            (CONST0, w) | (w, CONST0) => w,
            (CONST1, w) | (w, CONST1) => self.not(w),
            _ => self.emit(|out| Gate::Xor { a, b, out }),
        }
    }

    fn xnor(&mut self, a: u32, b: u32) -> u32 {
        match (a, b) {
            (CONST1, w) | (w, CONST1) => w,
            (CONST0, w) | (w, CONST0) => self.not(w),
            _ => self.emit(|out| Gate::Xnor { a, b, out }),
        }
    }

    fn not(&mut self, a: u32) -> u32 {
        match a {
            CONST0 => CONST1,
            CONST1 => CONST0,
            _ => self.emit(|out| Gate::Not { a, out }),
        }
    }

    fn and(&mut self, a: u32, b: u32) -> u32 {
        match (a, b) {
            (CONST0, _) | (_, CONST0) => CONST0,
            (CONST1, w) | (w, CONST1) => w,
            _ => self.emit(|out| Gate::And { a, b, out }),
        }
    }

    fn or(&mut self, a: u32, b: u32) -> u32 {
        match (a, b) {
            (CONST1, _) | (_, CONST1) => CONST1,
            (CONST0, w) | (w, CONST0) => w,
            _ => self.emit(|out| Gate::Or { a, b, out }),
        }
    }

    /// sum = a⊕b⊕c, carry = a ⊕ ((a⊕b) ∧ (a⊕c)). One AND, four XOR.
    fn full_adder(&mut self, a: u32, b: u32, c: u32) -> (u32, u32) {
        let ab = self.xor(a, b);
        let ac = self.xor(a, c);
        let m = self.and(ab, ac);
        let carry = self.xor(a, m);
        let sum = self.xor(ab, c);
        (sum, carry)
    }

    /// sum = a⊕b, carry = a∧b. One AND, one XOR.
    fn half_adder(&mut self, a: u32, b: u32) -> (u32, u32) {
        let sum = self.xor(a, b);
        let carry = self.and(a, b);
        (sum, carry)
    }

    /// Binary popcount of `bits` via carry-save reduction. Returns the sum
    /// LSB first, width ⌈log2(n+1)⌉. Costs exactly n − s₂(n) AND gates
    /// (s₂ = binary digit sum of n) for constant-free inputs.
    fn popcount(&mut self, bits: &[u32]) -> Vec<u32> {
        if bits.is_empty() {
            return Vec::new();
        }
        let mut columns: Vec<Vec<u32>> = vec![bits.to_vec()];
        let mut col = 0;
        while col < columns.len() {
            while columns[col].len() >= 3 {
                let c = columns[col].pop().unwrap();
                let b = columns[col].pop().unwrap();
                let a = columns[col].pop().unwrap();
                let (sum, carry) = self.full_adder(a, b, c);
                columns[col].push(sum);
                if columns.len() == col + 1 {
                    columns.push(Vec::new());
                }
                columns[col + 1].push(carry);
            }
            if columns[col].len() == 2 {
                let b = columns[col].pop().unwrap();
                let a = columns[col].pop().unwrap();
                let (sum, carry) = self.half_adder(a, b);
                columns[col].push(sum);
                if columns.len() == col + 1 {
                    columns.push(Vec::new());
                }
                columns[col + 1].push(carry);
            }
            col += 1;
        }
        columns.into_iter().map(|c| c[0]).collect()
    }

    /// `sum ≥ t` for an unsigned sum (LSB first) and a constant t.
    ///
    /// Ripple from the LSB keeping `ge` = "low bits so far ≥ low bits of
    /// t": at a 0-bit of t, ge' = p ∨ ge; at a 1-bit, ge' = p ∧ ge. One
    /// non-XOR per bit worst case; constant folding erases every bit up to
    /// and including the lowest set bit of t, so a power-of-two threshold
    /// reduces to reading a single sum bit for free.
    fn ge_const(&mut self, sum: &[u32], t: u64) -> u32 {
        if t == 0 {
            return CONST1;
        }
        if sum.len() < 64 && t >= (1u64 << sum.len()) {
            // t needs more bits than the sum can ever reach.
            return CONST0;
        }
        let mut ge = CONST1;
        for (i, &p) in sum.iter().enumerate() {
            ge = if (t >> i) & 1 == 1 {
                self.and(p, ge)
            } else {
                self.or(p, ge)
            };
        }
        ge
    }
}

/// One server-input wire per nonzero mask bit, `None` where the weight is
/// zero. Wires are taken from `next_server` in flat mask order.
fn take_weight_wires(mask: &BinaryTensor, next_server: &mut u32) -> Vec<Option<u32>> {
    (0..mask.len())
        .map(|i| {
            if mask.get(i) {
                let w = *next_server;
                *next_server += 1;
                Some(w)
            } else {
                None
            }
        })
        .collect()
}

/// Emit one conv layer. `consume` maps each unit's XNOR tap wires to its
/// output wire; units run in (channel, row, col) order to match the
/// plaintext layout.
#[allow(clippy::too_many_arguments)]
fn emit_conv(
    b: &mut Builder,
    in_shape: Shape,
    out_shape: Shape,
    kernel: usize,
    padding: usize,
    in_wires: &[u32],
    weight_wires: &[Option<u32>],
    mut consume: impl FnMut(&mut Builder, usize, Vec<u32>) -> u32,
) -> Vec<u32> {
    let (channels, oh, ow) = out_shape;
    let mut wires = Vec::with_capacity(channels * oh * ow);
    let mut unit = 0;
    for oc in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut taps = Vec::new();
                for_each_conv_tap(in_shape, kernel, padding, oc, oy, ox, |widx, in_idx| {
                    if let Some(w) = weight_wires[widx] {
                        taps.push((w, in_wires[in_idx]));
                    }
                });
                let taps: Vec<u32> = taps.into_iter().map(|(w, x)| b.xnor(x, w)).collect();
                wires.push(consume(b, unit, taps));
                unit += 1;
            }
        }
    }
    wires
}

/// Emit one dense layer; unit order is the natural row order of the
/// weight matrix.
fn emit_dense(
    b: &mut Builder,
    fan_in: usize,
    units: usize,
    in_wires: &[u32],
    weight_wires: &[Option<u32>],
    mut consume: impl FnMut(&mut Builder, usize, Vec<u32>) -> u32,
) -> Vec<u32> {
    let mut wires = Vec::with_capacity(units);
    for u in 0..units {
        let mut taps = Vec::new();
        for i in 0..fan_in {
            if let Some(w) = weight_wires[u * fan_in + i] {
                taps.push(b.xnor(in_wires[i], w));
            }
        }
        wires.push(consume(b, u, taps));
    }
    wires
}

/// Emit a 2×2 stride-2 max pool: max over ±1 bits is OR, three gates per
/// window. Odd tails are dropped, matching the plaintext pass.
fn emit_maxpool(b: &mut Builder, in_shape: Shape, out_shape: Shape, in_wires: &[u32]) -> Vec<u32> {
    let (c, h, w) = in_shape;
    let (_, oh, ow) = out_shape;
    let mut wires = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let at = |y: usize, x: usize| in_wires[(ch * h + y) * w + x];
                let top = b.or(at(2 * oy, 2 * ox), at(2 * oy, 2 * ox + 1));
                let bot = b.or(at(2 * oy + 1, 2 * ox), at(2 * oy + 1, 2 * ox + 1));
                wires.push(b.or(top, bot));
            }
        }
    }
    wires
}

/// Hidden-unit activation: sign of 2·popcount − N_eff, i.e.
/// popcount ≥ ⌈N_eff/2⌉ (so an empty unit fires, matching binarize(0)).
fn hidden_unit(b: &mut Builder, taps: Vec<u32>) -> u32 {
    let n_eff = taps.len() as u64;
    let sum = b.popcount(&taps);
    b.ge_const(&sum, n_eff.div_ceil(2))
}

fn check_mask(
    mask: &BinaryTensor,
    index: usize,
    want: usize,
) -> Result<(), CompileError> {
    if mask.len() != want {
        return Err(CompileError::MaskShape {
            index,
            got: mask.len(),
            want,
        });
    }
    Ok(())
}

/// Compile a full model circuit from its architecture and nonzero masks
/// (one mask per weighted layer, in layer order, true = weight is
/// nonzero). Both parties run this — the server from its weights' masks,
/// the client from the masks it received — and the resulting netlist
/// hashes must agree before any garbled material is exchanged.
pub fn compile_model(
    arch: &Architecture,
    masks: &[BinaryTensor],
) -> Result<Netlist, CompileError> {
    let shapes = arch.shapes()?;
    let weighted = arch.layers.iter().filter(|l| l.has_weights()).count();
    if masks.len() != weighted {
        return Err(CompileError::MaskCount {
            got: masks.len(),
            want: weighted,
        });
    }

    let (ic, ih, iw) = arch.input;
    let n_client = ic * ih * iw;
    let n_server: usize = masks.iter().map(|m| m.count_ones()).sum();
    let client_inputs: Vec<u32> = (2..2 + n_client as u32).collect();
    let server_base = 2 + n_client as u32;
    let server_inputs: Vec<u32> = (server_base..server_base + n_server as u32).collect();

    let mut b = Builder::new(server_base + n_server as u32);
    let mut cur_shape = arch.input;
    let mut cur_wires = client_inputs.clone();
    let mut outputs: Vec<OutputGroup> = Vec::new();
    let mut next_server = server_base;
    let mut mask_idx = 0;
    let last = arch.layers.len() - 1;

    for (li, layer) in arch.layers.iter().enumerate() {
        let out_shape = shapes[li];
        let is_final = li == last;
        cur_wires = match *layer {
            LayerKind::Conv {
                kernel,
                channels,
                padding,
            } => {
                let mask = &masks[mask_idx];
                check_mask(mask, mask_idx, channels * cur_shape.0 * kernel * kernel)?;
                let ww = take_weight_wires(mask, &mut next_server);
                mask_idx += 1;
                emit_conv(
                    &mut b,
                    cur_shape,
                    out_shape,
                    kernel,
                    padding,
                    &cur_wires,
                    &ww,
                    |b, _, taps| hidden_unit(b, taps),
                )
            }
            LayerKind::Dense { units } => {
                let mask = &masks[mask_idx];
                let fan_in = cur_wires.len();
                check_mask(mask, mask_idx, units * fan_in)?;
                let ww = take_weight_wires(mask, &mut next_server);
                mask_idx += 1;
                if is_final {
                    emit_dense(&mut b, fan_in, units, &cur_wires, &ww, |b, u, taps| {
                        let n_eff = taps.len() as u32;
                        let sum = b.popcount(&taps);
                        outputs.push(OutputGroup {
                            name: format!("class{u}"),
                            wires: sum,
                            offset: n_eff,
                        });
                        CONST0 // final-layer activations feed nothing
                    })
                } else {
                    emit_dense(&mut b, fan_in, units, &cur_wires, &ww, |b, _, taps| {
                        hidden_unit(b, taps)
                    })
                }
            }
            LayerKind::MaxPool => emit_maxpool(&mut b, cur_shape, out_shape, &cur_wires),
            LayerKind::Identity => cur_wires,
        };
        cur_shape = out_shape;
    }

    let netlist = Netlist {
        wire_count: b.next_wire,
        client_inputs,
        server_inputs,
        outputs,
        gates: b.gates,
    };
    debug_assert!(netlist.validate().is_ok());
    Ok(netlist)
}

/// Compile a single layer in isolation, with hidden-layer semantics
/// (weighted layers include their sign activation). Client inputs are the
/// layer input bits; outputs are the activation bits grouped per channel.
/// Used for per-op cost measurement and gate-count studies.
pub fn compile_op(
    kind: LayerKind,
    in_shape: Shape,
    mask: Option<&BinaryTensor>,
) -> Result<Netlist, CompileError> {
    // Shape-check through a throwaway architecture (appending a classifier
    // because a bare op is not a valid network on its own).
    let arch = Architecture {
        name: "op".into(),
        input: in_shape,
        layers: vec![kind, LayerKind::Dense { units: 1 }],
    };
    let out_shape = arch.shapes()?[0];

    let (ic, ih, iw) = in_shape;
    let n_client = ic * ih * iw;
    let client_inputs: Vec<u32> = (2..2 + n_client as u32).collect();
    let server_base = 2 + n_client as u32;

    let (n_server, weight_wires) = match (kind.has_weights(), mask) {
        (true, Some(m)) => {
            let want = match kind {
                LayerKind::Conv { kernel, channels, .. } => channels * ic * kernel * kernel,
                LayerKind::Dense { units } => units * n_client,
                _ => unreachable!(),
            };
            check_mask(m, 0, want)?;
            let mut next = server_base;
            let ww = take_weight_wires(m, &mut next);
            (m.count_ones(), Some(ww))
        }
        (true, None) => return Err(CompileError::MaskCount { got: 0, want: 1 }),
        (false, _) => (0, None),
    };
    let server_inputs: Vec<u32> = (server_base..server_base + n_server as u32).collect();

    let mut b = Builder::new(server_base + n_server as u32);
    let wires = match kind {
        LayerKind::Conv { kernel, padding, .. } => emit_conv(
            &mut b,
            in_shape,
            out_shape,
            kernel,
            padding,
            &client_inputs,
            weight_wires.as_ref().unwrap(),
            |b, _, taps| hidden_unit(b, taps),
        ),
        LayerKind::Dense { units } => emit_dense(
            &mut b,
            n_client,
            units,
            &client_inputs,
            weight_wires.as_ref().unwrap(),
            |b, _, taps| hidden_unit(b, taps),
        ),
        LayerKind::MaxPool => emit_maxpool(&mut b, in_shape, out_shape, &client_inputs),
        LayerKind::Identity => client_inputs.clone(),
    };

    let (oc, oh, ow) = out_shape;
    let per = oh * ow;
    let outputs = (0..oc)
        .map(|ch| OutputGroup {
            name: format!("ch{ch}"),
            wires: wires[ch * per..(ch + 1) * per].to_vec(),
            offset: 0,
        })
        .collect();

    let netlist = Netlist {
        wire_count: b.next_wire,
        client_inputs,
        server_inputs,
        outputs,
        gates: b.gates,
    };
    debug_assert!(netlist.validate().is_ok());
    Ok(netlist)
}
