//! Batched 1-of-2 oblivious transfer over ristretto255.
//!
//! The sender (the garbler) holds a label pair per instance; the receiver
//! (the evaluator) holds one choice bit per instance and must learn
//! exactly the chosen label, while the sender learns nothing about the
//! choices. One commitment `A = a·G` covers the whole batch and travels
//! with the handshake, so the entire exchange costs a single round trip:
//! receiver points in one direction, ciphertext pairs in the other.
//!
//! Per instance i the receiver picks `b_i` and sends
//! `B_i = b_i·G + c_i·A`. Both sides then agree on the chosen key —
//! receiver: `b_i·A`; sender: `a·B_i` (choice 0) or `a·(B_i − A)`
//! (choice 1) — and the sender encrypts each label under its respective
//! key. Keys are hashed with the transcript (A, B_i, instance index), and
//! each ciphertext carries a 16-byte key-committing tag, so decrypting
//! with the wrong key fails loudly instead of yielding garbage.
//!
//! An insecure simulated mode ships both labels in the clear with the
//! same message sizes. It exists so sessions can be traced and timed
//! without curve arithmetic; it must never be used with real data.

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use curve25519_dalek::traits::Identity;
use rand::RngExt;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::garble::WireLabel;
use crate::netlist::LABEL_BYTES;

/// Compressed point size on the wire.
pub const POINT_BYTES: usize = 32;
/// Masked label (16) plus key-committing tag (16).
pub const CIPHERTEXT_BYTES: usize = 32;
/// Both ciphertexts of one instance.
pub const PAIR_BYTES: usize = 2 * CIPHERTEXT_BYTES;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("invalid commitment point")]
    BadCommitment,
    #[error("invalid receiver point at instance {0}")]
    BadPoint(usize),
    #[error("message length mismatch: got {got} bytes, want {want}")]
    Length { got: usize, want: usize },
    #[error("instance count mismatch: got {got}, want {want}")]
    Count { got: usize, want: usize },
    #[error("tag check failed at instance {0}")]
    Tag(usize),
}

/// Transfer mode. `Insecure` is a wire-compatible stand-in that performs
/// no cryptography and leaks both labels.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OtMode {
    Real,
    Insecure,
}

fn random_scalar(rng: &mut ChaCha12Rng) -> Scalar {
    loop {
        let mut wide = [0u8; 64];
        rng.fill(&mut wide[..]);
        let s = Scalar::from_bytes_mod_order_wide(&wide);
        if s != Scalar::ZERO {
            return s;
        }
    }
}

/// Mask-and-tag derivation: one SHA-256 over a domain tag, the batch
/// commitment, the instance point, the shared secret, and the instance
/// index. First half masks the label, second half is the tag.
fn kdf(
    commitment: &[u8; 32],
    point: &[u8; 32],
    shared: &RistrettoPoint,
    index: u64,
) -> ([u8; LABEL_BYTES], [u8; 16]) {
    let mut h = Sha256::new();
    h.update(b"garnet-ot-v1");
    h.update(commitment);
    h.update(point);
    h.update(shared.compress().as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    let mut mask = [0u8; LABEL_BYTES];
    let mut tag = [0u8; 16];
    mask.copy_from_slice(&d[..16]);
    tag.copy_from_slice(&d[16..32]);
    (mask, tag)
}

fn decompress(bytes: &[u8]) -> Option<RistrettoPoint> {
    let c = CompressedRistretto::from_slice(bytes).ok()?;
    let p = c.decompress()?;
    if p == RistrettoPoint::identity() {
        return None;
    }
    Some(p)
}

/// The label-holding side. Created once per session; the commitment is
/// part of the handshake.
pub struct OtSender {
    mode: OtMode,
    a: Scalar,
    a_point: RistrettoPoint,
    commitment: [u8; 32],
}

impl OtSender {
    pub fn new(mode: OtMode, rng: &mut ChaCha12Rng) -> OtSender {
        let a = random_scalar(rng);
        let a_point = &a * RISTRETTO_BASEPOINT_TABLE;
        let commitment = match mode {
            OtMode::Real => a_point.compress().to_bytes(),
            OtMode::Insecure => [0u8; 32],
        };
        OtSender {
            mode,
            a,
            a_point,
            commitment,
        }
    }

    /// 32 bytes that ride in the handshake.
    pub fn commitment(&self) -> [u8; 32] {
        self.commitment
    }

    /// Encrypt every label pair against the receiver's points. Output is
    /// `pairs.len() × 64` bytes: for each instance, ciphertext for label 0
    /// then ciphertext for label 1.
    pub fn respond(
        &self,
        receiver_points: &[u8],
        pairs: &[(WireLabel, WireLabel)],
    ) -> Result<Vec<u8>, OtError> {
        if receiver_points.len() != pairs.len() * POINT_BYTES {
            return Err(OtError::Length {
                got: receiver_points.len(),
                want: pairs.len() * POINT_BYTES,
            });
        }
        let mut out = Vec::with_capacity(pairs.len() * PAIR_BYTES);
        match self.mode {
            OtMode::Insecure => {
                for &(l0, l1) in pairs {
                    out.extend_from_slice(&l0.0);
                    out.extend_from_slice(&[0u8; 16]);
                    out.extend_from_slice(&l1.0);
                    out.extend_from_slice(&[0u8; 16]);
                }
            }
            OtMode::Real => {
                for (i, &(l0, l1)) in pairs.iter().enumerate() {
                    let point_bytes = &receiver_points[i * POINT_BYTES..(i + 1) * POINT_BYTES];
                    let b_point = decompress(point_bytes).ok_or(OtError::BadPoint(i))?;
                    let mut pb = [0u8; 32];
                    pb.copy_from_slice(point_bytes);
                    // Key for choice 0: a·B. Key for choice 1: a·(B − A).
                    let shared0 = &b_point * &self.a;
                    let shared1 = &(b_point - self.a_point) * &self.a;
                    for (label, shared) in [(l0, shared0), (l1, shared1)] {
                        let (mask, tag) = kdf(&self.commitment, &pb, &shared, i as u64);
                        let mut body = label.0;
                        for (bb, m) in body.iter_mut().zip(mask) {
                            *bb ^= m;
                        }
                        out.extend_from_slice(&body);
                        out.extend_from_slice(&tag);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// The choice-holding side.
pub struct OtReceiver {
    mode: OtMode,
    commitment: [u8; 32],
    choices: Vec<bool>,
    secrets: Vec<Scalar>,
    points: Vec<u8>,
}

impl OtReceiver {
    /// Build receiver points for a batch of choices against the sender's
    /// commitment.
    pub fn new(
        mode: OtMode,
        commitment: &[u8; 32],
        choices: &[bool],
        rng: &mut ChaCha12Rng,
    ) -> Result<OtReceiver, OtError> {
        let mut points = Vec::with_capacity(choices.len() * POINT_BYTES);
        let mut secrets = Vec::new();
        match mode {
            OtMode::Insecure => {
                // Choice bit in the clear, padded to point size.
                for &c in choices {
                    let mut p = [0u8; POINT_BYTES];
                    p[0] = c as u8;
                    points.extend_from_slice(&p);
                }
            }
            OtMode::Real => {
                let a_point = decompress(commitment).ok_or(OtError::BadCommitment)?;
                secrets.reserve(choices.len());
                for &c in choices {
                    let b = random_scalar(rng);
                    let mut point = &b * RISTRETTO_BASEPOINT_TABLE;
                    if c {
                        point += a_point;
                    }
                    points.extend_from_slice(point.compress().as_bytes());
                    secrets.push(b);
                }
            }
        }
        Ok(OtReceiver {
            mode,
            commitment: *commitment,
            choices: choices.to_vec(),
            secrets,
            points,
        })
    }

    /// `choices.len() × 32` bytes for the wire.
    pub fn points(&self) -> &[u8] {
        &self.points
    }

    /// Decrypt the chosen label of every instance, verifying tags.
    pub fn finish(&self, ciphertexts: &[u8]) -> Result<Vec<WireLabel>, OtError> {
        let want = self.choices.len() * PAIR_BYTES;
        if ciphertexts.len() != want {
            return Err(OtError::Length {
                got: ciphertexts.len(),
                want,
            });
        }
        let a_point = match self.mode {
            OtMode::Real => Some(decompress(&self.commitment).ok_or(OtError::BadCommitment)?),
            OtMode::Insecure => None,
        };
        let mut out = Vec::with_capacity(self.choices.len());
        for (i, &c) in self.choices.iter().enumerate() {
            let pair = &ciphertexts[i * PAIR_BYTES..(i + 1) * PAIR_BYTES];
            let ct = if c {
                &pair[CIPHERTEXT_BYTES..]
            } else {
                &pair[..CIPHERTEXT_BYTES]
            };
            match self.mode {
                OtMode::Insecure => {
                    let mut label = [0u8; LABEL_BYTES];
                    label.copy_from_slice(&ct[..LABEL_BYTES]);
                    out.push(WireLabel(label));
                }
                OtMode::Real => {
                    let shared = a_point.as_ref().expect("real mode") * &self.secrets[i];
                    let mut pb = [0u8; 32];
                    pb.copy_from_slice(&self.points[i * POINT_BYTES..(i + 1) * POINT_BYTES]);
                    let (mask, tag) = kdf(&self.commitment, &pb, &shared, i as u64);
                    if ct[LABEL_BYTES..] != tag {
                        return Err(OtError::Tag(i));
                    }
                    let mut label = [0u8; LABEL_BYTES];
                    for (j, l) in label.iter_mut().enumerate() {
                        *l = ct[j] ^ mask[j];
                    }
                    out.push(WireLabel(label));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_pairs(rng: &mut ChaCha12Rng, n: usize) -> Vec<(WireLabel, WireLabel)> {
        (0..n)
            .map(|_| {
                let mut l0 = [0u8; LABEL_BYTES];
                let mut l1 = [0u8; LABEL_BYTES];
                rng.fill(&mut l0[..]);
                rng.fill(&mut l1[..]);
                (WireLabel(l0), WireLabel(l1))
            })
            .collect()
    }

    fn roundtrip(mode: OtMode, n: usize, seed: u64) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let pairs = random_pairs(&mut rng, n);
        let choices: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let sender = OtSender::new(mode, &mut rng);
        let receiver =
            OtReceiver::new(mode, &sender.commitment(), &choices, &mut rng).unwrap();
        let cts = sender.respond(receiver.points(), &pairs).unwrap();
        assert_eq!(cts.len(), n * PAIR_BYTES);
        let got = receiver.finish(&cts).unwrap();
        for i in 0..n {
            let want = if choices[i] { pairs[i].1 } else { pairs[i].0 };
            assert_eq!(got[i], want, "instance {i}");
        }
    }

    #[test]
    fn real_mode_roundtrip() {
        roundtrip(OtMode::Real, 300, 1);
    }

    #[test]
    fn insecure_mode_roundtrip() {
        roundtrip(OtMode::Insecure, 300, 2);
    }

    #[test]
    fn empty_batch() {
        roundtrip(OtMode::Real, 0, 3);
    }

    /// The non-chosen ciphertext cannot be decrypted with the receiver's
    /// key: its tag check fails.
    #[test]
    fn wrong_half_fails_tag() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let pairs = random_pairs(&mut rng, 8);
        let choices = vec![false; 8];
        let sender = OtSender::new(OtMode::Real, &mut rng);
        let receiver =
            OtReceiver::new(OtMode::Real, &sender.commitment(), &choices, &mut rng).unwrap();
        let cts = sender.respond(receiver.points(), &pairs).unwrap();
        // Swap each instance's two ciphertexts so the receiver, still
        // believing choice = 0, reads the half keyed for choice 1.
        let mut swapped = cts.clone();
        for i in 0..8 {
            let base = i * PAIR_BYTES;
            swapped[base..base + PAIR_BYTES].rotate_left(CIPHERTEXT_BYTES);
        }
        match receiver.finish(&swapped) {
            Err(OtError::Tag(0)) => {}
            other => panic!("expected tag failure, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_ciphertext_fails_tag() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let pairs = random_pairs(&mut rng, 4);
        let choices = vec![true, false, true, false];
        let sender = OtSender::new(OtMode::Real, &mut rng);
        let receiver =
            OtReceiver::new(OtMode::Real, &sender.commitment(), &choices, &mut rng).unwrap();
        let mut cts = sender.respond(receiver.points(), &pairs).unwrap();
        // Corrupt the tag of instance 2's chosen (second) ciphertext.
        let off = 2 * PAIR_BYTES + CIPHERTEXT_BYTES + LABEL_BYTES;
        cts[off] ^= 1;
        assert!(matches!(receiver.finish(&cts), Err(OtError::Tag(2))));
    }

    #[test]
    fn malformed_points_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let pairs = random_pairs(&mut rng, 2);
        let sender = OtSender::new(OtMode::Real, &mut rng);
        // All-0xFF is not a valid ristretto encoding.
        let junk = vec![0xFFu8; 2 * POINT_BYTES];
        assert!(matches!(
            sender.respond(&junk, &pairs),
            Err(OtError::BadPoint(0))
        ));
        // Identity commitment must be rejected by the receiver.
        let identity = RistrettoPoint::identity().compress().to_bytes();
        assert!(matches!(
            OtReceiver::new(OtMode::Real, &identity, &[true], &mut rng),
            Err(OtError::BadCommitment)
        ));
    }

    #[test]
    fn length_mismatches_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let pairs = random_pairs(&mut rng, 3);
        let sender = OtSender::new(OtMode::Real, &mut rng);
        let receiver = OtReceiver::new(
            OtMode::Real,
            &sender.commitment(),
            &[true, false, true],
            &mut rng,
        )
        .unwrap();
        assert!(matches!(
            sender.respond(&receiver.points()[..32], &pairs),
            Err(OtError::Length { .. })
        ));
        let cts = sender.respond(receiver.points(), &pairs).unwrap();
        assert!(matches!(
            receiver.finish(&cts[..PAIR_BYTES]),
            Err(OtError::Length { .. })
        ));
    }

    /// Distinct sessions produce unlinkable transcripts even for the same
    /// choices and labels.
    #[test]
    fn transcripts_differ_across_sessions() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let pairs = random_pairs(&mut rng, 4);
        let choices = vec![true, true, false, false];
        let s1 = OtSender::new(OtMode::Real, &mut rng);
        let r1 = OtReceiver::new(OtMode::Real, &s1.commitment(), &choices, &mut rng).unwrap();
        let s2 = OtSender::new(OtMode::Real, &mut rng);
        let r2 = OtReceiver::new(OtMode::Real, &s2.commitment(), &choices, &mut rng).unwrap();
        assert_ne!(s1.commitment(), s2.commitment());
        assert_ne!(r1.points(), r2.points());
        assert_ne!(
            s1.respond(r1.points(), &pairs).unwrap(),
            s2.respond(r2.points(), &pairs).unwrap()
        );
    }
}
