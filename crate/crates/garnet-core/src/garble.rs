//! Garbled-circuit engine: free-XOR labels, point-and-permute tables.
//!
//! Every wire carries two 128-bit labels, one per logical value, related
//! by a global secret offset Δ: `label1 = label0 ⊕ Δ`. Δ's color bit (the
//! low bit of byte 0) is forced to 1, so the two labels of a wire always
//! differ in color — the evaluator uses the colors of its two input labels
//! to pick the one table row it can decrypt, learning nothing else.
//!
//! Gate costs under this scheme:
//! - XOR: free — output label is the XOR of the input labels.
//! - XNOR: free — same XOR on the evaluator side; the garbler just swaps
//!   which label means what by folding Δ into the gate's zero-label.
//! - NOT: free — the evaluator passes the label through unchanged; only
//!   the garbler's interpretation flips.
//! - AND, OR: one table of 4 rows × 16 bytes = 64 bytes, each row the
//!   output label masked with a PRF over both input labels and the gate id.
//!
//! The row PRF is SHA-256(label_a ∥ label_b ∥ gate_id), truncated to 16
//! bytes. Output decoding is by exact label match against the garbler's
//! records — a corrupted table or label fails decoding loudly rather than
//! flipping a bit silently.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netlist::{Gate, Netlist, LABEL_BYTES, TABLE_ROWS};

/// Serialization format version for garbled circuits.
pub const GARBLE_VERSION: u16 = 1;

/// Bytes per garbled table: 4 rows of one label each.
pub const TABLE_BYTES: usize = TABLE_ROWS * LABEL_BYTES;

#[derive(Debug, Error)]
pub enum GarbleError {
    #[error("garbled circuit malformed: {0}")]
    Malformed(String),
    #[error("garbled circuit version {0} not supported")]
    Version(u16),
    #[error("garbled circuit is for a different netlist (hash mismatch)")]
    HashMismatch,
    #[error("input label count mismatch: got {got}, want {want}")]
    InputCount { got: usize, want: usize },
    #[error("table count {got} does not match the circuit's {want} costed gates")]
    TableCount { got: usize, want: usize },
    #[error("output label {index} failed integrity check")]
    BadOutputLabel { index: usize },
}

/// One 128-bit wire label.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct WireLabel(pub [u8; LABEL_BYTES]);

impl WireLabel {
    pub const ZERO: WireLabel = WireLabel([0u8; LABEL_BYTES]);

    /// Point-and-permute color: low bit of byte 0.
    #[inline]
    pub fn color(&self) -> bool {
        self.0[0] & 1 == 1
    }

    #[inline]
    pub fn xor(&self, other: &WireLabel) -> WireLabel {
        let mut out = [0u8; LABEL_BYTES];
        for i in 0..LABEL_BYTES {
            out[i] = self.0[i] ^ other.0[i];
        }
        WireLabel(out)
    }

    fn random(rng: &mut ChaCha12Rng) -> WireLabel {
        let mut bytes = [0u8; LABEL_BYTES];
        rng.fill(&mut bytes);
        WireLabel(bytes)
    }
}

impl std::fmt::Debug for WireLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Row mask: SHA-256 over both labels and the gate's index in the gate
/// list, truncated to label size.
fn row_prf(a: &WireLabel, b: &WireLabel, gate_id: u64) -> WireLabel {
    let mut h = Sha256::new();
    h.update(a.0);
    h.update(b.0);
    h.update(gate_id.to_le_bytes());
    let digest = h.finalize();
    let mut out = [0u8; LABEL_BYTES];
    out.copy_from_slice(&digest[..LABEL_BYTES]);
    WireLabel(out)
}

/// The evaluator's view: tables only, bound to a netlist by hash.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GarbledCircuit {
    pub circuit_hash: [u8; 32],
    /// One 64-byte table per AND/OR gate, in gate order.
    pub tables: Vec<[u8; TABLE_BYTES]>,
}

impl GarbledCircuit {
    /// Wire format: version u16 LE, netlist hash, table count u32 LE,
    /// then the tables. This is exactly the GARBLED_CIRCUIT payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + 32 + 4 + self.tables.len() * TABLE_BYTES);
        out.extend_from_slice(&GARBLE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.circuit_hash);
        out.extend_from_slice(&(self.tables.len() as u32).to_le_bytes());
        for t in &self.tables {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GarbleError> {
        if bytes.len() < 38 {
            return Err(GarbleError::Malformed("header truncated".into()));
        }
        let version = u16::from_le_bytes([bytes[0], bytes[1]]);
        if version != GARBLE_VERSION {
            return Err(GarbleError::Version(version));
        }
        let mut circuit_hash = [0u8; 32];
        circuit_hash.copy_from_slice(&bytes[2..34]);
        let count = u32::from_le_bytes([bytes[34], bytes[35], bytes[36], bytes[37]]) as usize;
        let body = &bytes[38..];
        if body.len() != count * TABLE_BYTES {
            return Err(GarbleError::Malformed(format!(
                "{} table bytes for {count} tables",
                body.len()
            )));
        }
        let tables = body
            .chunks_exact(TABLE_BYTES)
            .map(|c| {
                let mut t = [0u8; TABLE_BYTES];
                t.copy_from_slice(c);
                t
            })
            .collect();
        Ok(GarbledCircuit {
            circuit_hash,
            tables,
        })
    }
}

/// The garbler's input-side secrets: both labels of every input wire.
#[derive(Clone)]
pub struct InputEncoding {
    /// Labels for the two constant wires, already fixed to their values
    /// (wire 0 carries false, wire 1 carries true).
    pub const_labels: [WireLabel; 2],
    /// (label0, label1) per client input wire.
    pub client: Vec<(WireLabel, WireLabel)>,
    /// (label0, label1) per server input wire — the OT message pairs.
    pub server: Vec<(WireLabel, WireLabel)>,
}

impl InputEncoding {
    /// Labels the garbler sends for its own inputs: the constant labels
    /// followed by one label per client bit.
    pub fn encode_client(&self, bits: &[bool]) -> Result<Vec<WireLabel>, GarbleError> {
        if bits.len() != self.client.len() {
            return Err(GarbleError::InputCount {
                got: bits.len(),
                want: self.client.len(),
            });
        }
        let mut out = Vec::with_capacity(2 + bits.len());
        out.push(self.const_labels[0]);
        out.push(self.const_labels[1]);
        for (i, &b) in bits.iter().enumerate() {
            let (l0, l1) = self.client[i];
            out.push(if b { l1 } else { l0 });
        }
        Ok(out)
    }
}

/// The garbler's output-side secrets: both labels of every output wire
/// (flattened across groups, group order then LSB-first within a group).
#[derive(Clone)]
pub struct OutputDecoding {
    pub labels: Vec<(WireLabel, WireLabel)>,
}

impl OutputDecoding {
    /// Exact-match decode. Any label that is neither of the two recorded
    /// labels for its wire is an integrity failure.
    pub fn decode(&self, labels: &[WireLabel]) -> Result<Vec<bool>, GarbleError> {
        if labels.len() != self.labels.len() {
            return Err(GarbleError::InputCount {
                got: labels.len(),
                want: self.labels.len(),
            });
        }
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (l0, l1) = self.labels[i];
                if *l == l0 {
                    Ok(false)
                } else if *l == l1 {
                    Ok(true)
                } else {
                    Err(GarbleError::BadOutputLabel { index: i })
                }
            })
            .collect()
    }
}

/// Everything the garbler produces in one pass.
pub struct Garbling {
    pub circuit: GarbledCircuit,
    pub encoding: InputEncoding,
    pub decoding: OutputDecoding,
}

/// Garble a netlist. Deterministic in the seed: the same seed and netlist
/// give a byte-identical garbling, which is what makes offline garbling
/// and replay tests possible.
pub fn garble(netlist: &Netlist, seed: u64) -> Garbling {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Global offset; color bit forced so paired labels differ in color.
    let mut delta = WireLabel::random(&mut rng);
    delta.0[0] |= 1;

    // label0 (the label meaning "false") per wire.
    let mut zero = vec![WireLabel::ZERO; netlist.wire_count as usize];
    for w in 0..netlist.input_wire_count() {
        zero[w as usize] = WireLabel::random(&mut rng);
    }

    let mut tables = Vec::with_capacity(
        netlist.gates.iter().filter(|g| g.is_costed()).count(),
    );
    for (gate_id, gate) in netlist.gates.iter().enumerate() {
        match *gate {
            Gate::Xor { a, b, out } => {
                zero[out as usize] = zero[a as usize].xor(&zero[b as usize]);
            }
            Gate::Xnor { a, b, out } => {
                // Evaluator still XORs labels; shifting the zero-label by Δ
                // inverts the meaning.
                zero[out as usize] = zero[a as usize].xor(&zero[b as usize]).xor(&delta);
            }
            Gate::Not { a, out } => {
                zero[out as usize] = zero[a as usize].xor(&delta);
            }
            Gate::And { a, b, out } | Gate::Or { a, b, out } => {
                let is_or = matches!(gate, Gate::Or { .. });
                let o0 = WireLabel::random(&mut rng);
                zero[out as usize] = o0;
                let mut table = [0u8; TABLE_BYTES];
                for va in [false, true] {
                    for vb in [false, true] {
                        let la = if va {
                            zero[a as usize].xor(&delta)
                        } else {
                            zero[a as usize]
                        };
                        let lb = if vb {
                            zero[b as usize].xor(&delta)
                        } else {
                            zero[b as usize]
                        };
                        let v_out = if is_or { va | vb } else { va & vb };
                        let lo = if v_out { o0.xor(&delta) } else { o0 };
                        let row = (la.color() as usize) * 2 + (lb.color() as usize);
                        let masked = lo.xor(&row_prf(&la, &lb, gate_id as u64));
                        table[row * LABEL_BYTES..(row + 1) * LABEL_BYTES]
                            .copy_from_slice(&masked.0);
                    }
                }
                tables.push(table);
            }
        }
    }

    let n_client = netlist.client_inputs.len();
    let pair = |l0: WireLabel| (l0, l0.xor(&delta));
    let encoding = InputEncoding {
        const_labels: [zero[0], zero[1].xor(&delta)],
        client: (0..n_client).map(|i| pair(zero[2 + i])).collect(),
        server: netlist
            .server_inputs
            .iter()
            .map(|&w| pair(zero[w as usize]))
            .collect(),
    };
    let decoding = OutputDecoding {
        labels: netlist
            .outputs
            .iter()
            .flat_map(|g| g.wires.iter().map(|&w| pair(zero[w as usize])))
            .collect(),
    };
    Garbling {
        circuit: GarbledCircuit {
            circuit_hash: netlist.hash(),
            tables,
        },
        encoding,
        decoding,
    }
}

/// Evaluate a garbled circuit. `input_labels` covers every input wire in
/// wire order: const0, const1, client block, server block. Returns one
/// label per output wire (flattened across groups).
pub fn evaluate(
    netlist: &Netlist,
    garbled: &GarbledCircuit,
    input_labels: &[WireLabel],
) -> Result<Vec<WireLabel>, GarbleError> {
    let n_inputs = netlist.input_wire_count() as usize;
    if input_labels.len() != n_inputs {
        return Err(GarbleError::InputCount {
            got: input_labels.len(),
            want: n_inputs,
        });
    }
    let want_tables = netlist.count_gates().non_xor();
    if garbled.tables.len() != want_tables {
        return Err(GarbleError::TableCount {
            got: garbled.tables.len(),
            want: want_tables,
        });
    }
    let mut labels = vec![WireLabel::ZERO; netlist.wire_count as usize];
    labels[..n_inputs].copy_from_slice(input_labels);
    let mut next_table = 0;
    for (gate_id, gate) in netlist.gates.iter().enumerate() {
        match *gate {
            Gate::Xor { a, b, out } | Gate::Xnor { a, b, out } => {
                labels[out as usize] = labels[a as usize].xor(&labels[b as usize]);
            }
            Gate::Not { a, out } => {
                labels[out as usize] = labels[a as usize];
            }
            Gate::And { a, b, out } | Gate::Or { a, b, out } => {
                let la = labels[a as usize];
                let lb = labels[b as usize];
                let row = (la.color() as usize) * 2 + (lb.color() as usize);
                let table = &garbled.tables[next_table];
                next_table += 1;
                let mut masked = [0u8; LABEL_BYTES];
                masked.copy_from_slice(&table[row * LABEL_BYTES..(row + 1) * LABEL_BYTES]);
                labels[out as usize] =
                    WireLabel(masked).xor(&row_prf(&la, &lb, gate_id as u64));
            }
        }
    }
    Ok(netlist
        .outputs
        .iter()
        .flat_map(|g| g.wires.iter().map(|&w| labels[w as usize]))
        .collect())
}

/// Garbler-side helper: assemble the full evaluator input-label vector
/// from known plaintext inputs (used by loopback tests; in the real
/// protocol the server half arrives by OT).
pub fn encode_all_inputs(
    encoding: &InputEncoding,
    client_bits: &[bool],
    server_bits: &[bool],
) -> Result<Vec<WireLabel>, GarbleError> {
    if server_bits.len() != encoding.server.len() {
        return Err(GarbleError::InputCount {
            got: server_bits.len(),
            want: encoding.server.len(),
        });
    }
    let mut labels = encoding.encode_client(client_bits)?;
    for (i, &b) in server_bits.iter().enumerate() {
        let (l0, l1) = encoding.server[i];
        labels.push(if b { l1 } else { l0 });
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netlist::{Gate, Netlist, OutputGroup};
    use rand::RngExt;

    /// Random DAG circuit over all five gate kinds, outputs sampled from
    /// every wire (inputs and constants included).
    fn random_netlist(rng: &mut ChaCha12Rng, n_client: usize, n_server: usize, n_gates: usize) -> Netlist {
        let n_inputs = 2 + n_client + n_server;
        let mut gates = Vec::new();
        let mut next = n_inputs as u32;
        for _ in 0..n_gates {
            let a = rng.random_range(0..next);
            let b = rng.random_range(0..next);
            let out = next;
            next += 1;
            gates.push(match rng.random_range(0..5) {
                0 => Gate::Xor { a, b, out },
                1 => Gate::Xnor { a, b, out },
                2 => Gate::Not { a, out },
                3 => Gate::And { a, b, out },
                _ => Gate::Or { a, b, out },
            });
        }
        let n_out = rng.random_range(1..=4usize);
        let outputs = vec![OutputGroup {
            name: "out".into(),
            wires: (0..n_out).map(|_| rng.random_range(0..next)).collect(),
            offset: 0,
        }];
        let n = Netlist {
            wire_count: next,
            client_inputs: (2..2 + n_client as u32).collect(),
            server_inputs: (2 + n_client as u32..n_inputs as u32).collect(),
            outputs,
            gates,
        };
        n.validate().unwrap();
        n
    }

    fn check_garbled_matches_plain(netlist: &Netlist, seed: u64, trials: usize, rng: &mut ChaCha12Rng) {
        let g = garble(netlist, seed);
        assert_eq!(g.circuit.tables.len(), netlist.count_gates().non_xor());
        for _ in 0..trials {
            let client: Vec<bool> = (0..netlist.client_inputs.len()).map(|_| rng.random()).collect();
            let server: Vec<bool> = (0..netlist.server_inputs.len()).map(|_| rng.random()).collect();
            let labels = encode_all_inputs(&g.encoding, &client, &server).unwrap();
            let out_labels = evaluate(netlist, &g.circuit, &labels).unwrap();
            let got = g.decoding.decode(&out_labels).unwrap();
            let want: Vec<bool> = netlist.eval(&client, &server).unwrap().concat();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn garbled_equals_plain_exhaustive_small() {
        let mut rng = ChaCha12Rng::seed_from_u64(100);
        for trial in 0..40u64 {
            let n_client = rng.random_range(1..=4usize);
            let n_server = rng.random_range(0..=3usize);
            let n_gates = rng.random_range(1..=20usize);
            let netlist = random_netlist(&mut rng, n_client, n_server, n_gates);
            let g = garble(&netlist, 1000 + trial);
            let total_bits = n_client + n_server;
            for pattern in 0..(1u32 << total_bits) {
                let client: Vec<bool> = (0..n_client).map(|i| (pattern >> i) & 1 == 1).collect();
                let server: Vec<bool> = (0..n_server)
                    .map(|i| (pattern >> (n_client + i)) & 1 == 1)
                    .collect();
                let labels = encode_all_inputs(&g.encoding, &client, &server).unwrap();
                let out_labels = evaluate(&netlist, &g.circuit, &labels).unwrap();
                let got = g.decoding.decode(&out_labels).unwrap();
                let want: Vec<bool> = netlist.eval(&client, &server).unwrap().concat();
                assert_eq!(got, want, "trial {trial} pattern {pattern:b}");
            }
        }
    }

    #[test]
    fn garbled_equals_plain_larger_random() {
        let mut rng = ChaCha12Rng::seed_from_u64(200);
        for trial in 0..10u64 {
            let netlist = random_netlist(&mut rng, 24, 24, 400);
            check_garbled_matches_plain(&netlist, 5000 + trial, 20, &mut rng);
        }
    }

    #[test]
    fn garbling_is_deterministic_in_seed() {
        let mut rng = ChaCha12Rng::seed_from_u64(300);
        let netlist = random_netlist(&mut rng, 8, 8, 100);
        let a = garble(&netlist, 42);
        let b = garble(&netlist, 42);
        assert_eq!(a.circuit.to_bytes(), b.circuit.to_bytes());
        let c = garble(&netlist, 43);
        assert_ne!(a.circuit.to_bytes(), c.circuit.to_bytes());
    }

    #[test]
    fn paired_labels_differ_in_color() {
        let mut rng = ChaCha12Rng::seed_from_u64(400);
        let netlist = random_netlist(&mut rng, 6, 6, 60);
        let g = garble(&netlist, 7);
        for &(l0, l1) in g.encoding.client.iter().chain(&g.encoding.server) {
            assert_ne!(l0.color(), l1.color());
            assert_ne!(l0, l1);
        }
    }

    #[test]
    fn tampered_table_fails_decode() {
        let rng = ChaCha12Rng::seed_from_u64(500);
        // AND of two inputs: single table, output depends on it.
        let netlist = Netlist {
            wire_count: 5,
            client_inputs: vec![2, 3],
            server_inputs: vec![],
            outputs: vec![OutputGroup {
                name: "out".into(),
                wires: vec![4],
                offset: 0,
            }],
            gates: vec![Gate::And { a: 2, b: 3, out: 4 }],
        };
        let g = garble(&netlist, 1);
        let mut bad = g.circuit.clone();
        // Corrupt every row so the tamper hits whichever row the color
        // bits select.
        for row in 0..TABLE_ROWS {
            bad.tables[0][row * LABEL_BYTES + 3] ^= 0x40;
        }
        let labels = encode_all_inputs(&g.encoding, &[true, true], &[]).unwrap();
        let out = evaluate(&netlist, &bad, &labels).unwrap();
        match g.decoding.decode(&out) {
            Err(GarbleError::BadOutputLabel { index: 0 }) => {}
            other => panic!("expected integrity failure, got {other:?}"),
        }
        let _ = rng;
    }

    #[test]
    fn foreign_label_fails_decode() {
        let mut rng = ChaCha12Rng::seed_from_u64(600);
        let netlist = random_netlist(&mut rng, 4, 0, 10);
        let g = garble(&netlist, 2);
        let n_out = netlist.output_wire_count();
        let forged = vec![WireLabel([0xAB; LABEL_BYTES]); n_out];
        assert!(matches!(
            g.decoding.decode(&forged),
            Err(GarbleError::BadOutputLabel { .. })
        ));
    }

    #[test]
    fn serialization_roundtrip_and_rejects() {
        let mut rng = ChaCha12Rng::seed_from_u64(700);
        let netlist = random_netlist(&mut rng, 8, 4, 80);
        let g = garble(&netlist, 9);
        let bytes = g.circuit.to_bytes();
        let back = GarbledCircuit::from_bytes(&bytes).unwrap();
        assert_eq!(g.circuit, back);
        assert!(GarbledCircuit::from_bytes(&bytes[..10]).is_err());
        assert!(GarbledCircuit::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[0] = 99;
        assert!(matches!(
            GarbledCircuit::from_bytes(&wrong_version),
            Err(GarbleError::Version(99))
        ));
    }

    #[test]
    fn table_count_checked_at_evaluation() {
        let mut rng = ChaCha12Rng::seed_from_u64(800);
        let netlist = random_netlist(&mut rng, 4, 0, 30);
        let g = garble(&netlist, 3);
        let mut short = g.circuit.clone();
        if short.tables.is_empty() {
            return; // freak all-free circuit; nothing to drop
        }
        short.tables.pop();
        let labels = encode_all_inputs(&g.encoding, &vec![false; 4], &[]).unwrap();
        assert!(matches!(
            evaluate(&netlist, &short, &labels),
            Err(GarbleError::TableCount { .. })
        ));
    }

    /// Free gates really are free: table count equals AND+OR exactly.
    #[test]
    fn only_and_or_cost_tables() {
        let mut rng = ChaCha12Rng::seed_from_u64(900);
        for _ in 0..10 {
            let netlist = random_netlist(&mut rng, 5, 5, 120);
            let g = garble(&netlist, 11);
            let stats = netlist.count_gates();
            assert_eq!(g.circuit.tables.len(), stats.and + stats.or);
            assert_eq!(g.circuit.to_bytes().len(), 38 + 64 * stats.non_xor());
        }
    }

    /// A compiled model circuit, garbled, agrees with the reference
    /// forward pass end to end.
    #[test]
    fn garbled_model_matches_predict() {
        use crate::arch::{Architecture, LayerKind, Scale};
        use crate::model::{predict, ModelParams};
        use crate::tensor::{BinaryTensor, TernaryTensor};
        let arch = Architecture {
            name: "g".into(),
            input: (1, 4, 4),
            layers: vec![
                LayerKind::Conv {
                    kernel: 3,
                    channels: 2,
                    padding: 1,
                },
                LayerKind::MaxPool,
                LayerKind::Dense { units: 3 },
            ],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1000);
        let mut params = ModelParams::zeros(&arch, Scale::new(1, 1).unwrap()).unwrap();
        params.weights = params
            .weights
            .iter()
            .map(|w| {
                let vals: Vec<i8> = (0..w.len())
                    .map(|_| [-1i8, 0, 1][rng.random_range(0..3)])
                    .collect();
                TernaryTensor::from_values(w.shape(), &vals)
            })
            .collect();
        let netlist = crate::compile::compile_model(&arch, &params.masks()).unwrap();
        let g = garble(&netlist, 77);
        let server_bits: Vec<bool> = params
            .weights
            .iter()
            .flat_map(|w| w.iter().filter(|&v| v != 0).map(|v| v > 0).collect::<Vec<_>>())
            .collect();
        for _ in 0..25 {
            let bits: Vec<bool> = (0..16).map(|_| rng.random()).collect();
            let image = BinaryTensor::from_bools(&[1, 4, 4], &bits);
            let (_, want_scores) = predict(&params, &image).unwrap();
            let labels = encode_all_inputs(&g.encoding, &bits, &server_bits).unwrap();
            let out_labels = evaluate(&netlist, &g.circuit, &labels).unwrap();
            let out_bits = g.decoding.decode(&out_labels).unwrap();
            // Regroup flat bits by output group.
            let mut grouped = Vec::new();
            let mut at = 0;
            for group in &netlist.outputs {
                grouped.push(out_bits[at..at + group.wires.len()].to_vec());
                at += group.wires.len();
            }
            assert_eq!(netlist.scores_from_bits(&grouped), want_scores);
        }
    }
}
