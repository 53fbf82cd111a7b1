//! Two-party private inference over a byte stream.
//!
//! Roles: the **client** owns the image, garbles the circuit, and learns
//! the result. The **server** owns the trained weights, evaluates the
//! garbled circuit, and learns nothing about the image or the scores.
//!
//! What each party learns beyond its output (by design, documented here
//! rather than hidden): the client knows the architecture and scale it
//! asked for and additionally learns the *positions* of zero weights —
//! the circuit's shape depends on them, so both sides must compile the
//! same netlist — but never the signs of nonzero weights. The server
//! learns the image length (from the architecture) and nothing about the
//! image bits; its weight-sign input labels arrive by oblivious transfer.
//!
//! Wire format: every frame is a 4-byte big-endian payload length, one
//! type byte, then the payload. A session is exactly seven frames and one
//! OT round trip:
//!
//! ```text
//! client                                 server
//!   | --- HELLO (arch, scale, OT commitment) ->|
//!   |<-- HELLO_ACK (netlist hash, masks) ------|
//!   |<-- OT_RECEIVER (choice points) ----------|
//!   | --- GARBLED_CIRCUIT (tables) ----------->|
//!   | --- OT_SENDER (label ciphertexts) ------>|   offline | online boundary
//!   | --- CLIENT_INPUT_LABELS ---------------->|
//!   |<-- OUTPUT_LABELS ------------------------|
//! ```
//!
//! Both parties compile the netlist independently (the client from the
//! masks in HELLO_ACK) and compare hashes before any labels flow; on any
//! mismatch an ABORT frame is sent and nothing further. Everything through
//! OT_SENDER depends only on the model, not the image, so it counts as
//! offline cost; the input labels and the returned scores are online.

use std::io::{Read, Write};
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::arch::{Architecture, Scale};
use crate::compile::compile_model;
use crate::garble::{evaluate, garble, GarbledCircuit, WireLabel};
use crate::model::{argmax, ModelParams};
use crate::netlist::{Netlist, LABEL_BYTES};
use crate::ot::{OtMode, OtReceiver, OtSender, PAIR_BYTES, POINT_BYTES};
use crate::tensor::BinaryTensor;

pub const PROTOCOL_VERSION: u16 = 1;
/// Frame header: 4-byte big-endian payload length + 1 type byte.
pub const FRAME_HEADER_BYTES: u64 = 5;
/// Refuse frames beyond this (largest legitimate payload is the garbled
/// circuit of a big conv net, well under this cap).
const MAX_FRAME: u32 = 1 << 30;

/// Frame type bytes.
pub mod msg {
    pub const HELLO: u8 = 0x01;
    pub const HELLO_ACK: u8 = 0x02;
    pub const GARBLED_CIRCUIT: u8 = 0x10;
    pub const CLIENT_INPUT_LABELS: u8 = 0x11;
    pub const OT_RECEIVER: u8 = 0x20;
    pub const OT_SENDER: u8 = 0x21;
    pub const OUTPUT_LABELS: u8 = 0x30;
    pub const ABORT: u8 = 0x7F;
}

/// Abort reason codes carried in ABORT frames.
pub mod abort {
    pub const VERSION: u8 = 1;
    pub const ARCH_MISMATCH: u8 = 2;
    pub const HASH_MISMATCH: u8 = 3;
    pub const MALFORMED: u8 = 4;
    pub const OT_MODE: u8 = 5;
    pub const INTERNAL: u8 = 6;
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("unexpected frame type {got:#04x}, expected {want:#04x}")]
    UnexpectedFrame { got: u8, want: u8 },
    #[error("peer aborted (code {code}): {message}")]
    RemoteAbort { code: u8, message: String },
    #[error("aborted session (code {code}): {message}")]
    LocalAbort { code: u8, message: String },
    #[error("frame of {0} bytes exceeds the frame cap")]
    Oversized(u32),
    #[error(transparent)]
    Arch(#[from] crate::arch::ArchError),
    #[error(transparent)]
    Compile(#[from] crate::compile::CompileError),
    #[error(transparent)]
    Garble(#[from] crate::garble::GarbleError),
    #[error(transparent)]
    Ot(#[from] crate::ot::OtError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

// --- framing --------------------------------------------------------------

/// Write one frame; returns total bytes on the wire (header + payload).
fn write_frame<W: Write>(w: &mut W, ty: u8, payload: &[u8]) -> Result<u64, ProtocolError> {
    let len = payload.len() as u32;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&[ty])?;
    w.write_all(payload)?;
    Ok(FRAME_HEADER_BYTES + payload.len() as u64)
}

/// Read one frame; returns (type, payload, bytes on the wire).
fn read_frame<R: Read>(r: &mut R) -> Result<(u8, Vec<u8>, u64), ProtocolError> {
    let mut header = [0u8; 5];
    r.read_exact(&mut header)?;
    let len = u32::from_be_bytes([header[0], header[1], header[2], header[3]]);
    if len > MAX_FRAME {
        return Err(ProtocolError::Oversized(len));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok((header[4], payload, FRAME_HEADER_BYTES + len as u64))
}

/// Read a frame of the given type, turning an ABORT into an error.
fn read_expect<R: Read>(r: &mut R, want: u8) -> Result<(Vec<u8>, u64), ProtocolError> {
    let (ty, payload, n) = read_frame(r)?;
    if ty == msg::ABORT {
        let (code, message) = parse_abort(&payload);
        return Err(ProtocolError::RemoteAbort { code, message });
    }
    if ty != want {
        return Err(ProtocolError::UnexpectedFrame { got: ty, want });
    }
    Ok((payload, n))
}

fn parse_abort(payload: &[u8]) -> (u8, String) {
    if payload.is_empty() {
        return (0, String::new());
    }
    let code = payload[0];
    let message = if payload.len() >= 5 {
        let len = u32::from_le_bytes([payload[1], payload[2], payload[3], payload[4]]) as usize;
        String::from_utf8_lossy(&payload[5..(5 + len).min(payload.len())]).into_owned()
    } else {
        String::new()
    };
    (code, message)
}

/// Send an ABORT frame and return the matching local error.
fn send_abort<W: Write>(w: &mut W, code: u8, message: &str) -> ProtocolError {
    let mut payload = Vec::with_capacity(5 + message.len());
    payload.push(code);
    payload.extend_from_slice(&(message.len() as u32).to_le_bytes());
    payload.extend_from_slice(message.as_bytes());
    let _ = write_frame(w, msg::ABORT, &payload);
    let _ = w.flush();
    ProtocolError::LocalAbort {
        code,
        message: message.to_string(),
    }
}

// --- payload reader -------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, at: 0, what }
    }

    fn fail(&self, detail: &str) -> ProtocolError {
        ProtocolError::Malformed {
            what: self.what,
            detail: detail.to_string(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.at < n {
            return Err(self.fail("truncated"));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> Result<(), ProtocolError> {
        if self.at != self.buf.len() {
            return Err(self.fail("trailing bytes"));
        }
        Ok(())
    }
}

// --- traffic accounting ---------------------------------------------------

/// Bytes on the wire per frame, headers included. Measured and estimated
/// values use the same struct so exact comparison is one equality.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct SessionTraffic {
    pub hello: u64,
    pub hello_ack: u64,
    pub ot_receiver: u64,
    pub garbled_circuit: u64,
    pub client_input_labels: u64,
    pub ot_sender: u64,
    pub output_labels: u64,
}

impl SessionTraffic {
    pub fn total(&self) -> u64 {
        self.hello
            + self.hello_ack
            + self.ot_receiver
            + self.garbled_circuit
            + self.client_input_labels
            + self.ot_sender
            + self.output_labels
    }

    /// Setup bytes that do not depend on the query image: the handshake,
    /// the circuit transfer, and both oblivious-transfer flows (weights are
    /// fixed before any query, so their labels can ship ahead of time).
    pub fn offline(&self) -> u64 {
        self.hello + self.hello_ack + self.ot_receiver + self.garbled_circuit + self.ot_sender
    }

    /// Query-dependent bytes: the client's input labels in, the encrypted
    /// scores back out.
    pub fn online(&self) -> u64 {
        self.client_input_labels + self.output_labels
    }
}

/// Predict the exact per-frame byte counts of a session from public data.
pub fn estimate_session(
    arch: &Architecture,
    netlist: &Netlist,
    masks: &[BinaryTensor],
) -> SessionTraffic {
    let h = FRAME_HEADER_BYTES;
    let arch_len = arch.to_text().len() as u64;
    let n_server = netlist.server_inputs.len() as u64;
    let n_client = netlist.client_inputs.len() as u64;
    let n_out = netlist.output_wire_count() as u64;
    let non_xor = netlist.count_gates().non_xor() as u64;
    let masks_len: u64 = masks
        .iter()
        .map(|m| 1 + 4 * m.shape().len() as u64 + m.len().div_ceil(8) as u64)
        .sum();
    SessionTraffic {
        hello: h + 2 + 1 + 4 + 4 + 4 + arch_len + 32,
        hello_ack: h + 2 + 32 + 2 + masks_len,
        ot_receiver: h + 4 + n_server * POINT_BYTES as u64,
        garbled_circuit: h + 2 + 32 + 4 + non_xor * 64,
        client_input_labels: h + 4 + (n_client + 2) * LABEL_BYTES as u64,
        ot_sender: h + 4 + n_server * PAIR_BYTES as u64,
        output_labels: h + 4 + n_out * LABEL_BYTES as u64,
    }
}

// --- session configuration and reports ------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct SessionOptions {
    pub ot_mode: OtMode,
    /// Seeds the party's session randomness (labels, OT scalars). Use a
    /// fresh random value per session in production.
    pub seed: u64,
}

#[derive(Debug)]
pub struct ClientReport {
    pub class: usize,
    pub scores: Vec<i64>,
    pub measured: SessionTraffic,
    pub estimate: SessionTraffic,
    /// Time spent compiling + garbling (input-independent).
    pub offline_time: Duration,
    /// Time spent on everything else, network waits included.
    pub online_time: Duration,
    pub non_xor_gates: usize,
}

#[derive(Debug)]
pub struct ServerReport {
    pub measured: SessionTraffic,
    pub evaluate_time: Duration,
}

// --- HELLO payload ---------------------------------------------------------

struct Hello {
    version: u16,
    insecure_ot: bool,
    scale: Scale,
    arch_text: String,
    commitment: [u8; 32],
}

fn encode_hello(arch: &Architecture, scale: Scale, insecure: bool, commitment: &[u8; 32]) -> Vec<u8> {
    let text = arch.to_text();
    let mut p = Vec::with_capacity(2 + 1 + 4 + 4 + 4 + text.len() + 32);
    p.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    p.push(insecure as u8);
    p.extend_from_slice(&scale.num().to_le_bytes());
    p.extend_from_slice(&scale.den().to_le_bytes());
    p.extend_from_slice(&(text.len() as u32).to_le_bytes());
    p.extend_from_slice(text.as_bytes());
    p.extend_from_slice(commitment);
    p
}

fn decode_hello(payload: &[u8]) -> Result<Hello, ProtocolError> {
    let mut r = Reader::new(payload, "HELLO");
    let version = r.u16()?;
    let flags = r.u8()?;
    let num = r.u32()?;
    let den = r.u32()?;
    let scale = Scale::new(num, den).map_err(|_| r.fail("bad scale"))?;
    let text_len = r.u32()? as usize;
    let arch_text = String::from_utf8(r.bytes(text_len)?.to_vec())
        .map_err(|_| r.fail("architecture text is not UTF-8"))?;
    let mut commitment = [0u8; 32];
    commitment.copy_from_slice(r.bytes(32)?);
    r.done()?;
    Ok(Hello {
        version,
        insecure_ot: flags & 1 == 1,
        scale,
        arch_text,
        commitment,
    })
}

// --- HELLO_ACK payload ------------------------------------------------------

fn encode_hello_ack(hash: &[u8; 32], masks: &[BinaryTensor]) -> Vec<u8> {
    let mut p = Vec::new();
    p.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    p.extend_from_slice(hash);
    p.extend_from_slice(&(masks.len() as u16).to_le_bytes());
    for m in masks {
        p.push(m.shape().len() as u8);
        for &d in m.shape() {
            p.extend_from_slice(&(d as u32).to_le_bytes());
        }
        p.extend_from_slice(&m.to_bytes());
    }
    p
}

fn decode_hello_ack(payload: &[u8]) -> Result<([u8; 32], Vec<BinaryTensor>), ProtocolError> {
    let mut r = Reader::new(payload, "HELLO_ACK");
    let version = r.u16()?;
    if version != PROTOCOL_VERSION {
        return Err(r.fail("protocol version mismatch"));
    }
    let mut hash = [0u8; 32];
    hash.copy_from_slice(r.bytes(32)?);
    let count = r.u16()? as usize;
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u8()? as usize;
        if rank == 0 || rank > 8 {
            return Err(r.fail("mask rank out of range"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let bytes = r.bytes(len.div_ceil(8))?;
        let mask = BinaryTensor::from_bytes(&dims, bytes)
            .map_err(|e| r.fail(&format!("bad mask: {e}")))?;
        masks.push(mask);
    }
    r.done()?;
    Ok((hash, masks))
}

// --- label block helpers ----------------------------------------------------

fn encode_labels(labels: &[WireLabel]) -> Vec<u8> {
    let mut p = Vec::with_capacity(4 + labels.len() * LABEL_BYTES);
    p.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for l in labels {
        p.extend_from_slice(&l.0);
    }
    p
}

fn decode_labels(payload: &[u8], what: &'static str) -> Result<Vec<WireLabel>, ProtocolError> {
    let mut r = Reader::new(payload, what);
    let count = r.u32()? as usize;
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let mut l = [0u8; LABEL_BYTES];
        l.copy_from_slice(r.bytes(LABEL_BYTES)?);
        labels.push(WireLabel(l));
    }
    r.done()?;
    Ok(labels)
}

fn encode_counted(body: &[u8], unit: usize) -> Vec<u8> {
    let mut p = Vec::with_capacity(4 + body.len());
    p.extend_from_slice(&((body.len() / unit) as u32).to_le_bytes());
    p.extend_from_slice(body);
    p
}

fn decode_counted<'a>(
    payload: &'a [u8],
    unit: usize,
    what: &'static str,
) -> Result<&'a [u8], ProtocolError> {
    let mut r = Reader::new(payload, what);
    let count = r.u32()? as usize;
    let body = r.bytes(count * unit)?;
    r.done()?;
    Ok(body)
}

// --- client ------------------------------------------------------------------

/// Run the client (garbler) side of one inference session. `image_bits`
/// is the binarized image in (channel, row, col) order; `arch` must be
/// the concrete (already scaled) architecture the server holds.
pub fn run_client<S: Read + Write>(
    stream: &mut S,
    arch: &Architecture,
    scale: Scale,
    image_bits: &[bool],
    options: &SessionOptions,
) -> Result<ClientReport, ProtocolError> {
    let mut rng = ChaCha12Rng::seed_from_u64(options.seed);
    let ot_sender = OtSender::new(options.ot_mode, &mut rng);
    let mut traffic = SessionTraffic::default();
    let session_start = Instant::now();

    // 1. HELLO
    let hello = encode_hello(
        arch,
        scale,
        options.ot_mode == OtMode::Insecure,
        &ot_sender.commitment(),
    );
    traffic.hello = write_frame(stream, msg::HELLO, &hello)?;
    stream.flush()?;

    // 2. HELLO_ACK: masks + the server's netlist hash.
    let (payload, n) = read_expect(stream, msg::HELLO_ACK)?;
    traffic.hello_ack = n;
    let (server_hash, masks) = decode_hello_ack(&payload)?;

    // Compile locally from the disclosed masks and compare hashes before
    // anything secret is derived from this netlist.
    let netlist = compile_model(arch, &masks)?;
    if netlist.hash() != server_hash {
        return Err(send_abort(
            stream,
            abort::HASH_MISMATCH,
            "netlist hash disagreement",
        ));
    }
    let garbling = garble(&netlist, rng.random());

    // 3. OT round trip: receiver points arrived with the handshake.
    let (payload, n) = read_expect(stream, msg::OT_RECEIVER)?;
    traffic.ot_receiver = n;
    let points = decode_counted(&payload, POINT_BYTES, "OT_RECEIVER")?;
    if points.len() / POINT_BYTES != garbling.encoding.server.len() {
        return Err(send_abort(
            stream,
            abort::MALFORMED,
            "OT instance count does not match the netlist",
        ));
    }
    let ciphertexts = ot_sender.respond(points, &garbling.encoding.server)?;

    // 4. Bulk flow, query-independent half: circuit and OT responses. This
    //    ends the offline phase — everything so far could be precomputed and
    //    shipped before the client has an image.
    traffic.garbled_circuit =
        write_frame(stream, msg::GARBLED_CIRCUIT, &garbling.circuit.to_bytes())?;
    traffic.ot_sender = write_frame(
        stream,
        msg::OT_SENDER,
        &encode_counted(&ciphertexts, PAIR_BYTES),
    )?;
    stream.flush()?;
    let offline_time = session_start.elapsed();

    // 5. Online phase: encode the image, ship the labels.
    let client_labels = garbling.encoding.encode_client(image_bits)?;
    traffic.client_input_labels = write_frame(
        stream,
        msg::CLIENT_INPUT_LABELS,
        &encode_labels(&client_labels),
    )?;
    stream.flush()?;

    // 6. Result labels back; exact-match decode.
    let (payload, n) = read_expect(stream, msg::OUTPUT_LABELS)?;
    traffic.output_labels = n;
    let out_labels = decode_labels(&payload, "OUTPUT_LABELS")?;
    let bits = garbling.decoding.decode(&out_labels)?;
    let mut grouped = Vec::with_capacity(netlist.outputs.len());
    let mut at = 0;
    for g in &netlist.outputs {
        grouped.push(bits[at..at + g.wires.len()].to_vec());
        at += g.wires.len();
    }
    let scores = netlist.scores_from_bits(&grouped);
    let class = argmax(&scores);

    let estimate = estimate_session(arch, &netlist, &masks);
    Ok(ClientReport {
        class,
        scores,
        measured: traffic,
        estimate,
        offline_time,
        online_time: session_start.elapsed() - offline_time,
        non_xor_gates: netlist.count_gates().non_xor(),
    })
}

// --- server -------------------------------------------------------------------

/// Run the server (evaluator) side of one inference session.
pub fn run_server<S: Read + Write>(
    stream: &mut S,
    params: &ModelParams,
    options: &SessionOptions,
) -> Result<ServerReport, ProtocolError> {
    let mut rng = ChaCha12Rng::seed_from_u64(options.seed);
    let mut traffic = SessionTraffic::default();

    // 1. HELLO: version, OT mode, and architecture agreement.
    let (payload, n) = read_expect(stream, msg::HELLO)?;
    traffic.hello = n;
    let hello = decode_hello(&payload)?;
    if hello.version != PROTOCOL_VERSION {
        return Err(send_abort(
            stream,
            abort::VERSION,
            &format!("protocol version {} unsupported", hello.version),
        ));
    }
    let insecure = options.ot_mode == OtMode::Insecure;
    if hello.insecure_ot != insecure {
        return Err(send_abort(
            stream,
            abort::OT_MODE,
            "peers disagree on the OT mode",
        ));
    }
    if hello.arch_text != params.arch.to_text() || hello.scale != params.scale {
        return Err(send_abort(
            stream,
            abort::ARCH_MISMATCH,
            "architecture/scale does not match the served model",
        ));
    }

    // 2. Compile from own weights; reveal masks + netlist hash.
    let masks = params.masks();
    let netlist = compile_model(&params.arch, &masks)?;
    let hash = netlist.hash();
    traffic.hello_ack = write_frame(stream, msg::HELLO_ACK, &encode_hello_ack(&hash, &masks))?;

    // 3. OT receiver points for the weight sign bits, in compiler order
    //    (layer order, flat weight index, nonzero only).
    let choices: Vec<bool> = params
        .weights
        .iter()
        .flat_map(|w| {
            (0..w.len())
                .filter(|&i| w.get(i) != 0)
                .map(|i| w.get(i) > 0)
                .collect::<Vec<_>>()
        })
        .collect();
    debug_assert_eq!(choices.len(), netlist.server_inputs.len());
    let receiver = OtReceiver::new(options.ot_mode, &hello.commitment, &choices, &mut rng)?;
    traffic.ot_receiver = write_frame(
        stream,
        msg::OT_RECEIVER,
        &encode_counted(receiver.points(), POINT_BYTES),
    )?;
    stream.flush()?;

    // 4. Bulk flow from the client.
    let (payload, n) = read_expect(stream, msg::GARBLED_CIRCUIT)?;
    traffic.garbled_circuit = n;
    let garbled = GarbledCircuit::from_bytes(&payload)?;
    if garbled.circuit_hash != hash {
        return Err(send_abort(
            stream,
            abort::HASH_MISMATCH,
            "garbled circuit is for a different netlist",
        ));
    }
    let (payload, n) = read_expect(stream, msg::OT_SENDER)?;
    traffic.ot_sender = n;
    let ciphertexts = decode_counted(&payload, PAIR_BYTES, "OT_SENDER")?;
    let server_labels = receiver.finish(ciphertexts)?;

    // 5. The online half: input labels for this particular image.
    let (payload, n) = read_expect(stream, msg::CLIENT_INPUT_LABELS)?;
    traffic.client_input_labels = n;
    let client_labels = decode_labels(&payload, "CLIENT_INPUT_LABELS")?;
    if client_labels.len() != 2 + netlist.client_inputs.len() {
        return Err(send_abort(
            stream,
            abort::MALFORMED,
            "client label count does not match the netlist",
        ));
    }

    // 6. Evaluate and return the output labels.
    let eval_start = Instant::now();
    let mut input_labels = client_labels;
    input_labels.extend_from_slice(&server_labels);
    let out_labels = evaluate(&netlist, &garbled, &input_labels)?;
    let evaluate_time = eval_start.elapsed();
    traffic.output_labels =
        write_frame(stream, msg::OUTPUT_LABELS, &encode_labels(&out_labels))?;
    stream.flush()?;

    Ok(ServerReport {
        measured: traffic,
        evaluate_time,
    })
}
