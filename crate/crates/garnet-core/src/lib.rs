//! Private neural-network inference with garbled circuits.
//!
//! The pipeline, end to end:
//!
//! 1. [`train`] fits a ternary-weight, binary-activation model on MNIST or
//!    CIFAR-10. Zero weights are structural sparsity: they will later vanish
//!    from the circuit entirely.
//! 2. [`compile`] lowers a trained model to a boolean netlist over
//!    {XOR, XNOR, NOT, AND, OR}. Dot products become XNOR + popcount trees,
//!    sign activations become threshold comparators, maxpool becomes OR
//!    trees. XOR-family gates are free under the garbling scheme, so the
//!    compiler spends them liberally and hoards AND/OR.
//! 3. [`garble`] turns a netlist into encrypted gate tables (free-XOR,
//!    point-and-permute) that one party can evaluate over wire labels
//!    without learning any plaintext values.
//! 4. [`protocol`] runs the two-party session: the client owns the image and
//!    garbles; the server owns the weights, receives its input labels
//!    through oblivious transfer ([`ot`]), evaluates, and returns the
//!    encrypted scores to the client.
//! 5. [`search`] looks for architectures that balance accuracy against
//!    garbled-circuit cost, using the per-operation cost model in the same
//!    module.
//!
//! Threat model: both parties are honest-but-curious. The server never sees
//! image bits or activations in the clear; the client never sees weight
//! values. The client does learn the architecture and the positions of zero
//! weights (the circuit's shape depends on them) — see the module docs in
//! [`protocol`] for the exact leakage statement.

pub mod arch;
pub mod compile;
pub mod data;
pub mod garble;
pub mod model;
pub mod netlist;
pub mod nn;
pub mod ot;
pub mod protocol;
pub mod search;
pub mod tensor;
pub mod train;

pub use arch::{Architecture, LayerKind, Scale};
pub use compile::{compile_model, compile_op};
pub use model::{binarize_bit, ternarize, ModelParams};
pub use netlist::{GateStats, Netlist};
pub use tensor::{BinaryTensor, TernaryTensor};
