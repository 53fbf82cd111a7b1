//! Boolean netlists: the circuit representation between model and garbler.
//!
//! A netlist is a flat, topologically ordered gate list over five gate
//! kinds. XOR/XNOR/NOT are free under the garbling scheme; AND/OR each cost
//! one four-row garbled table, so `non_xor` is the communication currency
//! of the whole system.
//!
//! Wire numbering is fixed by construction: wire 0 is constant 0, wire 1 is
//! constant 1, then one contiguous block of client input wires (image
//! bits), then one contiguous block of server input wires (weight sign
//! bits), then one wire per gate in emission order. Every wire has exactly
//! one driver and gates only read wires defined before them.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Bytes per wire label; fixed by the garbling scheme and baked into the
/// communication model.
pub const LABEL_BYTES: usize = 16;

/// Rows in a garbled table (classic point-and-permute, no row reduction).
pub const TABLE_ROWS: usize = 4;

/// Wire id of the constant-0 / constant-1 inputs.
pub const CONST0: u32 = 0;
pub const CONST1: u32 = 1;

#[derive(Debug, Error)]
pub enum NetlistError {
    #[error("netlist line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("wire {wire} used before definition (gate {gate})")]
    UseBeforeDef { wire: u32, gate: usize },
    #[error("wire {wire} has multiple drivers")]
    MultipleDrivers { wire: u32 },
    #[error("input count mismatch: got {got}, netlist has {want}")]
    InputCount { got: usize, want: usize },
    #[error("malformed netlist: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Gate {
    Xor { a: u32, b: u32, out: u32 },
    Xnor { a: u32, b: u32, out: u32 },
    Not { a: u32, out: u32 },
    And { a: u32, b: u32, out: u32 },
    Or { a: u32, b: u32, out: u32 },
}

impl Gate {
    pub fn out(&self) -> u32 {
        match *self {
            Gate::Xor { out, .. }
            | Gate::Xnor { out, .. }
            | Gate::Not { out, .. }
            | Gate::And { out, .. }
            | Gate::Or { out, .. } => out,
        }
    }

    /// Does this gate need a garbled table?
    pub fn is_costed(&self) -> bool {
        matches!(self, Gate::And { .. } | Gate::Or { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Gate::Xor { .. } => "XOR",
            Gate::Xnor { .. } => "XNOR",
            Gate::Not { .. } => "NOT",
            Gate::And { .. } => "AND",
            Gate::Or { .. } => "OR",
        }
    }
}

/// One named group of output wires, least significant bit first. The group
/// value is the unsigned integer over those bits; for classifier outputs
/// the plaintext score is `2·value − offset` (offset = effective fan-in).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct OutputGroup {
    pub name: String,
    pub wires: Vec<u32>,
    pub offset: u32,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Netlist {
    pub wire_count: u32,
    /// Client-owned input wires (image bits), contiguous starting at 2.
    pub client_inputs: Vec<u32>,
    /// Server-owned input wires (weight sign bits), contiguous after the
    /// client block. One per nonzero weight, in compiler order.
    pub server_inputs: Vec<u32>,
    pub outputs: Vec<OutputGroup>,
    pub gates: Vec<Gate>,
}

/// Gate census of a netlist.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct GateStats {
    pub xor: usize,
    pub xnor: usize,
    pub not: usize,
    pub and: usize,
    pub or: usize,
}

impl GateStats {
    /// AND + OR: gates that cost a garbled table.
    pub fn non_xor(&self) -> usize {
        self.and + self.or
    }

    /// XOR + XNOR + NOT: free gates.
    pub fn free(&self) -> usize {
        self.xor + self.xnor + self.not
    }

    pub fn total(&self) -> usize {
        self.non_xor() + self.free()
    }
}

/// Predicted bytes for shipping a garbled version of a netlist: tables,
/// client input labels (including the two constant wires), and the fixed
/// headers of the two frames that carry them.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CommEstimate {
    /// non_xor × 4 rows × label bytes.
    pub table_bytes: u64,
    /// (client inputs + 2 constants) × label bytes.
    pub client_input_label_bytes: u64,
    /// Fixed framing overhead of the circuit and input-label frames
    /// (frame headers plus their payload headers); see `protocol`.
    pub frame_overhead_bytes: u64,
    pub total: u64,
}

impl Netlist {
    pub fn count_gates(&self) -> GateStats {
        let mut s = GateStats::default();
        for g in &self.gates {
            match g {
                Gate::Xor { .. } => s.xor += 1,
                Gate::Xnor { .. } => s.xnor += 1,
                Gate::Not { .. } => s.not += 1,
                Gate::And { .. } => s.and += 1,
                Gate::Or { .. } => s.or += 1,
            }
        }
        s
    }

    /// Number of non-input wires expected before the first gate output.
    pub fn input_wire_count(&self) -> u32 {
        2 + self.client_inputs.len() as u32 + self.server_inputs.len() as u32
    }

    /// Structural validation: contiguous input blocks, single drivers,
    /// topological order, in-range wire ids.
    pub fn validate(&self) -> Result<(), NetlistError> {
        let n_inputs = self.input_wire_count();
        if self.wire_count != n_inputs + self.gates.len() as u32 {
            return Err(NetlistError::Malformed(format!(
                "wire_count {} != {} inputs + {} gates",
                self.wire_count,
                n_inputs,
                self.gates.len()
            )));
        }
        for (i, &w) in self.client_inputs.iter().enumerate() {
            if w != 2 + i as u32 {
                return Err(NetlistError::Malformed(
                    "client inputs must be contiguous from wire 2".into(),
                ));
            }
        }
        let server_base = 2 + self.client_inputs.len() as u32;
        for (i, &w) in self.server_inputs.iter().enumerate() {
            if w != server_base + i as u32 {
                return Err(NetlistError::Malformed(
                    "server inputs must follow the client block".into(),
                ));
            }
        }
        let mut defined = n_inputs;
        for (i, g) in self.gates.iter().enumerate() {
            let (a, b) = match *g {
                Gate::Xor { a, b, .. }
                | Gate::Xnor { a, b, .. }
                | Gate::And { a, b, .. }
                | Gate::Or { a, b, .. } => (a, Some(b)),
                Gate::Not { a, .. } => (a, None),
            };
            if a >= defined {
                return Err(NetlistError::UseBeforeDef { wire: a, gate: i });
            }
            if let Some(b) = b {
                if b >= defined {
                    return Err(NetlistError::UseBeforeDef { wire: b, gate: i });
                }
            }
            if g.out() != defined {
                if g.out() < defined {
                    return Err(NetlistError::MultipleDrivers { wire: g.out() });
                }
                return Err(NetlistError::Malformed(format!(
                    "gate {i} skips wire ids (out {})",
                    g.out()
                )));
            }
            defined += 1;
        }
        for group in &self.outputs {
            for &w in &group.wires {
                if w >= self.wire_count {
                    return Err(NetlistError::Malformed(format!(
                        "output wire {w} out of range"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Plaintext evaluation. Returns the value of every wire.
    pub fn eval_wires(
        &self,
        client_bits: &[bool],
        server_bits: &[bool],
    ) -> Result<Vec<bool>, NetlistError> {
        if client_bits.len() != self.client_inputs.len() {
            return Err(NetlistError::InputCount {
                got: client_bits.len(),
                want: self.client_inputs.len(),
            });
        }
        if server_bits.len() != self.server_inputs.len() {
            return Err(NetlistError::InputCount {
                got: server_bits.len(),
                want: self.server_inputs.len(),
            });
        }
        let mut v = vec![false; self.wire_count as usize];
        v[CONST1 as usize] = true;
        for (i, &b) in client_bits.iter().enumerate() {
            v[self.client_inputs[i] as usize] = b;
        }
        for (i, &b) in server_bits.iter().enumerate() {
            v[self.server_inputs[i] as usize] = b;
        }
        for g in &self.gates {
            let val = match *g {
                Gate::Xor { a, b, .. } => v[a as usize] ^ v[b as usize],
                Gate::Xnor { a, b, .. } => !(v[a as usize] ^ v[b as usize]),
                Gate::Not { a, .. } => !v[a as usize],
                Gate::And { a, b, .. } => v[a as usize] & v[b as usize],
                Gate::Or { a, b, .. } => v[a as usize] | v[b as usize],
            };
            v[g.out() as usize] = val;
        }
        Ok(v)
    }

    /// Plaintext evaluation returning each output group's bits.
    pub fn eval(
        &self,
        client_bits: &[bool],
        server_bits: &[bool],
    ) -> Result<Vec<Vec<bool>>, NetlistError> {
        let v = self.eval_wires(client_bits, server_bits)?;
        Ok(self
            .outputs
            .iter()
            .map(|g| g.wires.iter().map(|&w| v[w as usize]).collect())
            .collect())
    }

    /// Interpret per-group bits (LSB first) as classifier scores:
    /// `2·value − offset`.
    pub fn scores_from_bits(&self, group_bits: &[Vec<bool>]) -> Vec<i64> {
        self.outputs
            .iter()
            .zip(group_bits)
            .map(|(g, bits)| {
                let mut value = 0i64;
                for (i, &b) in bits.iter().enumerate() {
                    if b {
                        value |= 1 << i;
                    }
                }
                2 * value - g.offset as i64
            })
            .collect()
    }

    /// Total output wires across groups (the size of OUTPUT_LABELS).
    pub fn output_wire_count(&self) -> usize {
        self.outputs.iter().map(|g| g.wires.len()).sum()
    }

    pub fn estimate_communication(&self, label_bytes: usize) -> CommEstimate {
        let stats = self.count_gates();
        let table_bytes = (stats.non_xor() * TABLE_ROWS * label_bytes) as u64;
        let client_input_label_bytes = ((self.client_inputs.len() + 2) * label_bytes) as u64;
        // Frame header (5) + circuit payload header (version 2 + hash 32 +
        // gate count 4) plus frame header (5) + label payload header
        // (count 4). Must stay in lockstep with `protocol`.
        let frame_overhead_bytes = (5 + 2 + 32 + 4) + (5 + 4);
        CommEstimate {
            table_bytes,
            client_input_label_bytes,
            frame_overhead_bytes,
            total: table_bytes + client_input_label_bytes + frame_overhead_bytes,
        }
    }

    /// Canonical text form; the circuit hash is the SHA-256 of these bytes.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("netlist v1\n");
        let _ = writeln!(s, "wires {}", self.wire_count);
        let _ = writeln!(s, "clientin 2 {}", self.client_inputs.len());
        let _ = writeln!(
            s,
            "serverin {} {}",
            2 + self.client_inputs.len(),
            self.server_inputs.len()
        );
        for g in &self.outputs {
            let _ = write!(s, "output {} {}", g.name, g.offset);
            for w in &g.wires {
                let _ = write!(s, " {w}");
            }
            s.push('\n');
        }
        for g in &self.gates {
            match *g {
                Gate::Xor { a, b, out } => {
                    let _ = writeln!(s, "XOR {a} {b} {out}");
                }
                Gate::Xnor { a, b, out } => {
                    let _ = writeln!(s, "XNOR {a} {b} {out}");
                }
                Gate::Not { a, out } => {
                    let _ = writeln!(s, "NOT {a} {out}");
                }
                Gate::And { a, b, out } => {
                    let _ = writeln!(s, "AND {a} {b} {out}");
                }
                Gate::Or { a, b, out } => {
                    let _ = writeln!(s, "OR {a} {b} {out}");
                }
            }
        }
        s.push_str("end\n");
        s
    }

    /// SHA-256 over the canonical text. Binding between the compiler's
    /// output and what the two parties agree to garble.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    /// Parse the canonical text form, validating structure.
    pub fn from_text(text: &str) -> Result<Self, NetlistError> {
        let mut wire_count = None;
        let mut client_inputs = Vec::new();
        let mut server_inputs = Vec::new();
        let mut outputs = Vec::new();
        let mut gates = Vec::new();
        let mut header_seen = false;
        let mut ended = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: String| NetlistError::Parse {
                line: lineno + 1,
                msg,
            };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if ended {
                return Err(err("content after `end`".into()));
            }
            if !header_seen {
                if line != "netlist v1" {
                    return Err(err("expected `netlist v1` header".into()));
                }
                header_seen = true;
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap();
            let mut num = |what: &str| -> Result<u32, NetlistError> {
                parts
                    .next()
                    .ok_or_else(|| err(format!("missing {what}")))?
                    .parse()
                    .map_err(|_| err(format!("bad {what}")))
            };
            match word {
                "wires" => wire_count = Some(num("wire count")?),
                "clientin" => {
                    let start = num("start")?;
                    let count = num("count")?;
                    client_inputs = (start..start + count).collect();
                }
                "serverin" => {
                    let start = num("start")?;
                    let count = num("count")?;
                    server_inputs = (start..start + count).collect();
                }
                "output" => {
                    let name = parts
                        .next()
                        .ok_or_else(|| err("missing output name".into()))?
                        .to_string();
                    let offset: u32 = parts
                        .next()
                        .ok_or_else(|| err("missing offset".into()))?
                        .parse()
                        .map_err(|_| err("bad offset".into()))?;
                    let wires: Result<Vec<u32>, _> = parts.map(|p| p.parse()).collect();
                    let wires = wires.map_err(|_| err("bad output wire".into()))?;
                    outputs.push(OutputGroup {
                        name,
                        wires,
                        offset,
                    });
                }
                "XOR" | "XNOR" | "AND" | "OR" => {
                    let a = num("input a")?;
                    let b = num("input b")?;
                    let out = num("output")?;
                    gates.push(match word {
                        "XOR" => Gate::Xor { a, b, out },
                        "XNOR" => Gate::Xnor { a, b, out },
                        "AND" => Gate::And { a, b, out },
                        _ => Gate::Or { a, b, out },
                    });
                }
                "NOT" => {
                    let a = num("input")?;
                    let out = num("output")?;
                    gates.push(Gate::Not { a, out });
                }
                "end" => ended = true,
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        if !ended {
            return Err(NetlistError::Parse {
                line: text.lines().count(),
                msg: "missing `end`".into(),
            });
        }
        let netlist = Netlist {
            wire_count: wire_count.ok_or(NetlistError::Parse {
                line: 0,
                msg: "missing `wires`".into(),
            })?,
            client_inputs,
            server_inputs,
            outputs,
            gates,
        };
        netlist.validate()?;
        Ok(netlist)
    }
}
