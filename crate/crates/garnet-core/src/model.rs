//! Ternary model parameters, quantization, and the plaintext reference
//! forward pass.
//!
//! Everything downstream (netlist compiler, garbled evaluation, the 2PC
//! session) must agree bit-for-bit with the semantics here:
//!
//! - weights are in {-1, 0, +1}; zero weights contribute nothing anywhere;
//! - activations are ±1, encoded as bits (1 → +1);
//! - a hidden unit fires (+1) iff its integer pre-activation is ≥ 0, which
//!   for a fan-in of `n` nonzero taps is `popcount ≥ ceil(n/2)`;
//! - convolution padding taps are elided rather than fed a pad value, so
//!   border units have a smaller effective fan-in;
//! - the final dense layer yields raw integer scores, argmax with ties
//!   broken toward the lowest class index.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch::{ArchError, Architecture, LayerKind, Scale, Shape};
use crate::tensor::{BinaryTensor, TernaryTensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty tensor")]
    Empty,
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("model file: {0}")]
    Format(String),
    #[error("model file integrity check failed")]
    Integrity,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Quantize real weights to {-1, 0, +1} using the per-tensor threshold
/// Δ = (0.7/n)·Σ|w|: values above Δ become +1, below -Δ become -1, the
/// rest 0. Returns the tensor and the Δ used.
pub fn ternarize(weights: &[f32], shape: &[usize]) -> Result<(TernaryTensor, f64), ModelError> {
    if weights.is_empty() {
        return Err(ModelError::Empty);
    }
    if shape.iter().product::<usize>() != weights.len() {
        return Err(ModelError::Shape(format!(
            "{} values for shape {shape:?}",
            weights.len()
        )));
    }
    let delta = 0.7 / weights.len() as f64
        * weights.iter().map(|w| w.abs() as f64).sum::<f64>();
    let mut t = TernaryTensor::zeros(shape);
    for (i, &w) in weights.iter().enumerate() {
        let v = if (w as f64) > delta {
            1
        } else if (w as f64) < -delta {
            -1
        } else {
            0
        };
        t.set(i, v);
    }
    Ok((t, delta))
}

/// The sign rule shared by every stage: a pre-activation maps to +1 (bit 1)
/// iff it is ≥ 0. The zero tie goes to +1 by convention.
#[inline]
pub fn binarize_bit(v: i64) -> bool {
    v >= 0
}

/// Binarize a tensor of integer pre-activations.
pub fn binarize(values: &[i64], shape: &[usize]) -> BinaryTensor {
    let mut t = BinaryTensor::zeros(shape);
    for (i, &v) in values.iter().enumerate() {
        t.set(i, binarize_bit(v));
    }
    t
}

/// ±1 dot product of a binary vector with a ternary vector, computed the
/// way the circuit computes it: zero weights are dropped, the survivors
/// are XNOR'd and popcounted, and the result is `2·popcount − n_eff`.
pub fn xnor_popcount_dot(x: &BinaryTensor, w: &TernaryTensor) -> Result<i64, ModelError> {
    if x.len() != w.len() {
        return Err(ModelError::Shape(format!(
            "dot of {} bits with {} weights",
            x.len(),
            w.len()
        )));
    }
    let mut popcount = 0i64;
    let mut n_eff = 0i64;
    for i in 0..w.len() {
        match w.get(i) {
            0 => {}
            wv => {
                n_eff += 1;
                // xnor(x, sign bit of w): 1 when the input bit agrees with
                // the weight sign.
                if x.get(i) == (wv > 0) {
                    popcount += 1;
                }
            }
        }
    }
    Ok(2 * popcount - n_eff)
}

/// Trained parameters for a concrete (already scaled) architecture.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ModelParams {
    /// Concrete architecture; widths are final, `scaled()` has been applied.
    pub arch: Architecture,
    /// The scaling factor that produced `arch` (metadata for reports).
    pub scale: Scale,
    /// One weight tensor per weighted layer, in layer order.
    /// Conv: `[out_c, in_c, k, k]`; dense: `[units, fan_in]`.
    pub weights: Vec<TernaryTensor>,
}

/// Walk every (weight index, input flat index) tap of one output unit of a
/// conv layer. Out-of-bounds taps (zero padding) are skipped entirely.
#[inline]
pub fn for_each_conv_tap(
    in_shape: Shape,
    kernel: usize,
    padding: usize,
    oc: usize,
    oy: usize,
    ox: usize,
    mut f: impl FnMut(usize, usize),
) {
    let (in_c, in_h, in_w) = in_shape;
    let base_w = oc * in_c * kernel * kernel;
    for ic in 0..in_c {
        for ky in 0..kernel {
            let iy = (oy + ky) as isize - padding as isize;
            if iy < 0 || iy >= in_h as isize {
                continue;
            }
            for kx in 0..kernel {
                let ix = (ox + kx) as isize - padding as isize;
                if ix < 0 || ix >= in_w as isize {
                    continue;
                }
                let widx = base_w + (ic * kernel + ky) * kernel + kx;
                let in_idx = (ic * in_h + iy as usize) * in_w + ix as usize;
                f(widx, in_idx);
            }
        }
    }
}

impl ModelParams {
    /// Fresh params with the right shapes, all weights zero.
    pub fn zeros(arch: &Architecture, scale: Scale) -> Result<Self, ModelError> {
        let shapes = arch.shapes()?;
        let mut weights = Vec::new();
        let mut cur = arch.input;
        for (layer, &out_shape) in arch.layers.iter().zip(&shapes) {
            match *layer {
                LayerKind::Conv {
                    kernel, channels, ..
                } => weights.push(TernaryTensor::zeros(&[channels, cur.0, kernel, kernel])),
                LayerKind::Dense { units } => {
                    weights.push(TernaryTensor::zeros(&[units, cur.0 * cur.1 * cur.2]))
                }
                LayerKind::MaxPool | LayerKind::Identity => {}
            }
            cur = out_shape;
        }
        Ok(ModelParams {
            arch: arch.clone(),
            scale,
            weights,
        })
    }

    /// Check weight tensor shapes against the architecture.
    pub fn validate(&self) -> Result<(), ModelError> {
        let reference = ModelParams::zeros(&self.arch, self.scale)?;
        if reference.weights.len() != self.weights.len() {
            return Err(ModelError::Shape(format!(
                "{} weight tensors, architecture needs {}",
                self.weights.len(),
                reference.weights.len()
            )));
        }
        for (i, (have, want)) in self.weights.iter().zip(&reference.weights).enumerate() {
            if have.shape() != want.shape() {
                return Err(ModelError::Shape(format!(
                    "weight tensor {i}: shape {:?}, architecture needs {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }

    /// Total number of weights.
    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    /// Fraction of zero weights across all layers.
    pub fn sparsity(&self) -> f64 {
        let total: usize = self.weights.iter().map(|w| w.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let zero: usize = self
            .weights
            .iter()
            .map(|w| w.len() - w.count_nonzero())
            .sum();
        zero as f64 / total as f64
    }

    /// Total number of nonzero weights (the server's input bit count).
    pub fn nonzero_count(&self) -> usize {
        self.weights.iter().map(|w| w.count_nonzero()).sum()
    }

    /// Nonzero/zero masks per weighted layer, in weight-tensor order. This
    /// is the only parameter-derived data a server reveals to a client.
    pub fn masks(&self) -> Vec<BinaryTensor> {
        self.weights
            .iter()
            .map(|w| {
                let mut m = BinaryTensor::zeros(w.shape());
                for i in 0..w.len() {
                    m.set(i, w.get(i) != 0);
                }
                m
            })
            .collect()
    }

    /// Per-unit sign thresholds for every *hidden* weighted layer, derived
    /// from the masks: unit with effective fan-in `n` fires at popcount
    /// ≥ ceil(n/2). The final layer has no thresholds (raw scores).
    pub fn derived_thresholds(&self) -> Result<Vec<Vec<u32>>, ModelError> {
        derive_thresholds(&self.arch, &self.masks())
    }
}

/// Threshold derivation from masks alone — callable by a party that only
/// knows the sparsity pattern (the client compiles circuits from this).
pub fn derive_thresholds(
    arch: &Architecture,
    masks: &[BinaryTensor],
) -> Result<Vec<Vec<u32>>, ModelError> {
    let shapes = arch.shapes()?;
    let weighted: Vec<usize> = arch
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.has_weights())
        .map(|(i, _)| i)
        .collect();
    if masks.len() != weighted.len() {
        return Err(ModelError::Shape(format!(
            "{} masks for {} weighted layers",
            masks.len(),
            weighted.len()
        )));
    }
    let mut out = Vec::new();
    let last_weighted = *weighted.last().unwrap_or(&usize::MAX);
    for (w_i, &layer_i) in weighted.iter().enumerate() {
        if layer_i == last_weighted {
            out.push(Vec::new());
            continue;
        }
        let in_shape = if layer_i == 0 {
            arch.input
        } else {
            shapes[layer_i - 1]
        };
        let mask = &masks[w_i];
        let thresholds = match arch.layers[layer_i] {
            LayerKind::Conv {
                kernel,
                channels,
                padding,
            } => {
                let (_, out_h, out_w) = shapes[layer_i];
                let mut t = Vec::with_capacity(channels * out_h * out_w);
                for oc in 0..channels {
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            let mut n_eff = 0u32;
                            for_each_conv_tap(in_shape, kernel, padding, oc, oy, ox, |widx, _| {
                                if mask.get(widx) {
                                    n_eff += 1;
                                }
                            });
                            t.push(n_eff.div_ceil(2));
                        }
                    }
                }
                t
            }
            LayerKind::Dense { units } => {
                let fan_in = in_shape.0 * in_shape.1 * in_shape.2;
                (0..units)
                    .map(|u| {
                        let n_eff = (0..fan_in)
                            .filter(|&j| mask.get(u * fan_in + j))
                            .count() as u32;
                        n_eff.div_ceil(2)
                    })
                    .collect()
            }
            _ => unreachable!("weighted layer"),
        };
        out.push(thresholds);
    }
    Ok(out)
}

/// Output of one layer: hidden layers produce bits, the final layer
/// produces raw integer scores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerOutput {
    Bits(BinaryTensor),
    Scores(Vec<i64>),
}

/// Run one layer of the reference forward pass.
///
/// `weights` must be `Some` exactly for conv/dense layers. `final_layer`
/// selects raw-score output and is only valid for a dense layer.
pub fn forward_layer(
    layer: LayerKind,
    weights: Option<&TernaryTensor>,
    input: &BinaryTensor,
    in_shape: Shape,
    final_layer: bool,
) -> Result<LayerOutput, ModelError> {
    let (in_c, in_h, in_w) = in_shape;
    if input.len() != in_c * in_h * in_w {
        return Err(ModelError::Shape(format!(
            "input has {} bits, shape {in_shape:?} needs {}",
            input.len(),
            in_c * in_h * in_w
        )));
    }
    match layer {
        LayerKind::Conv {
            kernel,
            channels,
            padding,
        } => {
            let w = weights.ok_or_else(|| ModelError::Shape("conv needs weights".into()))?;
            if w.shape() != [channels, in_c, kernel, kernel] {
                return Err(ModelError::Shape(format!(
                    "conv weights {:?}, expected {:?}",
                    w.shape(),
                    [channels, in_c, kernel, kernel]
                )));
            }
            let out_h = in_h + 2 * padding - kernel + 1;
            let out_w = in_w + 2 * padding - kernel + 1;
            let mut scores = vec![0i64; channels * out_h * out_w];
            let mut idx = 0;
            for oc in 0..channels {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = 0i64;
                        for_each_conv_tap(in_shape, kernel, padding, oc, oy, ox, |widx, iidx| {
                            let wv = w.get(widx);
                            if wv != 0 {
                                acc += wv as i64 * input.get_signed(iidx) as i64;
                            }
                        });
                        scores[idx] = acc;
                        idx += 1;
                    }
                }
            }
            if final_layer {
                return Err(ModelError::Shape("final layer must be dense".into()));
            }
            Ok(LayerOutput::Bits(binarize(
                &scores,
                &[channels, out_h, out_w],
            )))
        }
        LayerKind::Dense { units } => {
            let w = weights.ok_or_else(|| ModelError::Shape("dense needs weights".into()))?;
            let fan_in = in_c * in_h * in_w;
            if w.shape() != [units, fan_in] {
                return Err(ModelError::Shape(format!(
                    "dense weights {:?}, expected {:?}",
                    w.shape(),
                    [units, fan_in]
                )));
            }
            let mut scores = vec![0i64; units];
            for (u, score) in scores.iter_mut().enumerate() {
                let mut acc = 0i64;
                for j in 0..fan_in {
                    let wv = w.get(u * fan_in + j);
                    if wv != 0 {
                        acc += wv as i64 * input.get_signed(j) as i64;
                    }
                }
                *score = acc;
            }
            if final_layer {
                Ok(LayerOutput::Scores(scores))
            } else {
                Ok(LayerOutput::Bits(binarize(&scores, &[units, 1, 1])))
            }
        }
        LayerKind::MaxPool => {
            if weights.is_some() || final_layer {
                return Err(ModelError::Shape("maxpool takes no weights".into()));
            }
            let out_h = in_h / 2;
            let out_w = in_w / 2;
            let mut out = BinaryTensor::zeros(&[in_c, out_h, out_w]);
            let mut idx = 0;
            for c in 0..in_c {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        // max over a ±1 window == OR over its bits
                        let mut bit = false;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                bit |= input.get((c * in_h + 2 * oy + dy) * in_w + 2 * ox + dx);
                            }
                        }
                        out.set(idx, bit);
                        idx += 1;
                    }
                }
            }
            Ok(LayerOutput::Bits(out))
        }
        LayerKind::Identity => {
            if weights.is_some() || final_layer {
                return Err(ModelError::Shape("identity takes no weights".into()));
            }
            Ok(LayerOutput::Bits(input.clone()))
        }
    }
}

/// Full reference inference: returns `(class, scores)`. Ties in the argmax
/// go to the lowest class index.
pub fn predict(params: &ModelParams, image: &BinaryTensor) -> Result<(usize, Vec<i64>), ModelError> {
    params.validate()?;
    let shapes = params.arch.shapes()?;
    let n_layers = params.arch.layers.len();
    let mut bits = image.clone();
    let mut cur_shape = params.arch.input;
    let mut w_iter = params.weights.iter();
    for (i, layer) in params.arch.layers.iter().enumerate() {
        let weights = if layer.has_weights() {
            Some(w_iter.next().expect("validated weight count"))
        } else {
            None
        };
        let is_final = i == n_layers - 1;
        match forward_layer(*layer, weights, &bits, cur_shape, is_final)? {
            LayerOutput::Bits(b) => bits = b,
            LayerOutput::Scores(scores) => {
                let class = argmax(&scores);
                return Ok((class, scores));
            }
        }
        cur_shape = shapes[i];
    }
    unreachable!("architecture validation guarantees a final dense layer")
}

/// Argmax with ties to the lowest index.
pub fn argmax(scores: &[i64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

// --- parameter file format ----------------------------------------------
//
// Binary, little-endian, self-contained:
//
//   magic  b"GNMP"
//   u16    format version (1)
//   u32    architecture text length, then that many bytes (see
//          `Architecture::to_text`; widths are concrete)
//   u32,u32  scale numerator, denominator
//   u16    weighted layer count
//   per weighted layer:
//     u8       rank, then rank × u32 dims
//     bytes    2-bit-packed ternary weights (00=0, 01=+1, 10=-1), ceil(n/4)
//     u32      threshold count, then count × u32 thresholds (derived
//              per-unit sign thresholds for hidden layers; 0 for the final
//              layer, whose outputs are raw scores)
//   32 bytes  SHA-256 over everything above

const PARAMS_MAGIC: &[u8; 4] = b"GNMP";
const PARAMS_VERSION: u16 = 1;

impl ModelParams {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        let arch_text = self.arch.to_text();
        out.extend_from_slice(&(arch_text.len() as u32).to_le_bytes());
        out.extend_from_slice(arch_text.as_bytes());
        out.extend_from_slice(&self.scale.num().to_le_bytes());
        out.extend_from_slice(&self.scale.den().to_le_bytes());
        out.extend_from_slice(&(self.weights.len() as u16).to_le_bytes());
        let thresholds = self.derived_thresholds()?;
        for (w, t) in self.weights.iter().zip(&thresholds) {
            out.push(w.shape().len() as u8);
            for &d in w.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(w.packed_bytes());
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for &v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, ModelError> {
        if data.len() < 32 {
            return Err(ModelError::Format("file too short".into()));
        }
        let (body, digest) = data.split_at(data.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ModelError::Integrity);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != PARAMS_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = r.u16()?;
        if version != PARAMS_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let arch_len = r.u32()? as usize;
        let arch_text = std::str::from_utf8(r.take(arch_len)?)
            .map_err(|_| ModelError::Format("architecture text is not UTF-8".into()))?;
        let arch = Architecture::from_text(arch_text)?;
        let scale = Scale::new(r.u32()?, r.u32()?)?;
        let layer_count = r.u16()? as usize;
        let mut weights = Vec::with_capacity(layer_count);
        let mut thresholds = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let packed = r.take(n.div_ceil(4))?;
            let tensor = TernaryTensor::from_packed(&dims, packed)
                .map_err(ModelError::Format)?;
            weights.push(tensor);
            let t_count = r.u32()? as usize;
            let mut t = Vec::with_capacity(t_count);
            for _ in 0..t_count {
                t.push(r.u32()?);
            }
            thresholds.push(t);
        }
        if r.pos != body.len() {
            return Err(ModelError::Format("trailing bytes".into()));
        }
        let params = ModelParams {
            arch,
            scale,
            weights,
        };
        params.validate()?;
        // Thresholds are derived data; a file that disagrees with the
        // derivation was produced by something else and is rejected.
        if thresholds != params.derived_thresholds()? {
            return Err(ModelError::Format(
                "stored thresholds disagree with mask-derived thresholds".into(),
            ));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let data = fs::read(path)?;
        ModelParams::from_bytes(&data)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn ternarize_worked_example() {
        let (t, delta) = ternarize(&[0.5, -1.0, 0.2, 0.9], &[4]).unwrap();
        assert!((delta - 0.455).abs() < 1e-6);
        let vals: Vec<i8> = t.iter().collect();
        assert_eq!(vals, vec![1, -1, 0, 1]);
    }

    #[test]
    fn ternarize_degenerate_cases() {
        // all zero: Δ = 0 and nothing is strictly above it
        let (t, delta) = ternarize(&[0.0; 8], &[8]).unwrap();
        assert_eq!(delta, 0.0);
        assert_eq!(t.count_nonzero(), 0);
        // constant positive: Δ = 0.7c < c, everything +1
        let (t, _) = ternarize(&[0.3; 10], &[10]).unwrap();
        assert!(t.iter().all(|v| v == 1));
        assert!(ternarize(&[], &[0]).is_err());
    }

    #[test]
    fn ternarize_counts_match_threshold_rule() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.random_range(1..300);
            let w: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (t, delta) = ternarize(&w, &[n]).unwrap();
            let above = w.iter().filter(|v| (v.abs() as f64) > delta).count();
            assert_eq!(t.count_nonzero(), above);
        }
    }

    #[test]
    fn binarize_rule_and_monotonicity() {
        let b = binarize(&[3, -1, 0], &[3]);
        let bits: Vec<bool> = b.iter().collect();
        assert_eq!(bits, vec![true, false, true]);
        // monotone: raising any value never clears a bit
        let lo = binarize(&[-5, -1, 0, 2], &[4]);
        let hi = binarize(&[-4, 0, 9, 2], &[4]);
        for i in 0..4 {
            assert!(!lo.get(i) || hi.get(i));
        }
    }

    #[test]
    fn dot_worked_example() {
        let x = BinaryTensor::from_bits(&[4], &[1, 0, 1, 1]);
        let w = TernaryTensor::from_values(&[4], &[1, 1, 1, -1]);
        assert_eq!(xnor_popcount_dot(&x, &w).unwrap(), 0);
    }

    #[test]
    fn dot_edge_cases() {
        // perfect agreement gives +n
        let x = BinaryTensor::from_bits(&[3], &[1, 0, 1]);
        let w = TernaryTensor::from_values(&[3], &[1, -1, 1]);
        assert_eq!(xnor_popcount_dot(&x, &w).unwrap(), 3);
        // all-zero weights give 0
        let w0 = TernaryTensor::zeros(&[3]);
        assert_eq!(xnor_popcount_dot(&x, &w0).unwrap(), 0);
        // length mismatch is an error
        let w_bad = TernaryTensor::zeros(&[4]);
        assert!(xnor_popcount_dot(&x, &w_bad).is_err());
    }

    proptest! {
        /// The popcount form must equal the plain signed dot product.
        #[test]
        fn dot_equals_signed_arithmetic(
            pairs in prop::collection::vec((any::<bool>(), -1i8..=1), 1..512)
        ) {
            let bits: Vec<u8> = pairs.iter().map(|(b, _)| *b as u8).collect();
            let ws: Vec<i8> = pairs.iter().map(|(_, w)| *w).collect();
            let x = BinaryTensor::from_bits(&[bits.len()], &bits);
            let w = TernaryTensor::from_values(&[ws.len()], &ws);
            let expect: i64 = pairs
                .iter()
                .map(|(b, w)| (2 * (*b as i64) - 1) * *w as i64)
                .sum();
            prop_assert_eq!(xnor_popcount_dot(&x, &w).unwrap(), expect);
        }
    }

    #[test]
    fn maxpool_is_or() {
        let layer = LayerKind::MaxPool;
        // exhaustive over one 2x2 window
        for pattern in 0..16u8 {
            let bits: Vec<u8> = (0..4).map(|i| (pattern >> i) & 1).collect();
            let input = BinaryTensor::from_bits(&[1, 2, 2], &bits);
            let out = match forward_layer(layer, None, &input, (1, 2, 2), false).unwrap() {
                LayerOutput::Bits(b) => b,
                _ => unreachable!(),
            };
            assert_eq!(out.len(), 1);
            assert_eq!(out.get(0), pattern != 0, "window {pattern:04b}");
        }
    }

    #[test]
    fn dense_majority_gate() {
        // 3-input majority: weights [+1,+1,+1], fires at ≥ 2 ones
        let w = TernaryTensor::from_values(&[1, 3], &[1, 1, 1]);
        for pattern in 0..8u8 {
            let bits: Vec<u8> = (0..3).map(|i| (pattern >> i) & 1).collect();
            let ones = bits.iter().filter(|&&b| b == 1).count();
            let input = BinaryTensor::from_bits(&[3, 1, 1], &bits);
            let out = forward_layer(
                LayerKind::Dense { units: 1 },
                Some(&w),
                &input,
                (3, 1, 1),
                false,
            )
            .unwrap();
            match out {
                LayerOutput::Bits(b) => assert_eq!(b.get(0), ones >= 2, "pattern {pattern:03b}"),
                _ => unreachable!(),
            }
        }
    }

    /// Brute-force oracle: a hand-built 2-class model over 4 input bits,
    /// checked against independent integer arithmetic on all 16 inputs.
    #[test]
    fn tiny_model_matches_bruteforce() {
        let arch = Architecture {
            name: "tiny".into(),
            input: (4, 1, 1),
            layers: vec![LayerKind::Dense { units: 3 }, LayerKind::Dense { units: 2 }],
        };
        let mut params = ModelParams::zeros(&arch, Scale::ONE).unwrap();
        let w1 = [1, -1, 0, 1, /* unit 2 */ -1, -1, 1, 0, /* unit 3 */ 0, 1, 1, 1];
        let w2 = [1, 0, -1, /* class 2 */ -1, 1, 1];
        params.weights[0] = TernaryTensor::from_values(&[3, 4], &w1);
        params.weights[1] = TernaryTensor::from_values(&[2, 3], &w2);

        for pattern in 0..16u8 {
            let bits: Vec<u8> = (0..4).map(|i| (pattern >> i) & 1).collect();
            let x: Vec<i64> = bits.iter().map(|&b| 2 * b as i64 - 1).collect();
            // independent reference computation
            let mut hidden = [0i64; 3];
            for u in 0..3 {
                for j in 0..4 {
                    hidden[u] += w1[u * 4 + j] as i64 * x[j];
                }
            }
            let h: Vec<i64> = hidden.iter().map(|&v| if v >= 0 { 1 } else { -1 }).collect();
            let mut scores = [0i64; 2];
            for u in 0..2 {
                for j in 0..3 {
                    scores[u] += w2[u * 3 + j] as i64 * h[j];
                }
            }
            let expect_class = if scores[1] > scores[0] { 1 } else { 0 };

            let image = BinaryTensor::from_bits(&[4, 1, 1], &bits);
            let (class, got_scores) = predict(&params, &image).unwrap();
            assert_eq!(got_scores, scores.to_vec(), "pattern {pattern:04b}");
            assert_eq!(class, expect_class, "pattern {pattern:04b}");
        }
    }

    #[test]
    fn all_zero_last_layer_predicts_class_zero() {
        let arch = Architecture {
            name: "z".into(),
            input: (4, 1, 1),
            layers: vec![LayerKind::Dense { units: 10 }],
        };
        let params = ModelParams::zeros(&arch, Scale::ONE).unwrap();
        let image = BinaryTensor::from_bits(&[4, 1, 1], &[1, 0, 1, 0]);
        let (class, scores) = predict(&params, &image).unwrap();
        assert_eq!(class, 0);
        assert!(scores.iter().all(|&s| s == 0));
    }

    #[test]
    fn argmax_tie_break_is_lowest_index() {
        assert_eq!(argmax(&[3, 5, 5, 1]), 1);
        assert_eq!(argmax(&[0, 0, 0]), 0);
        assert_eq!(argmax(&[-2, -1, -1]), 1);
    }

    fn random_params(arch: &Architecture, seed: u64) -> ModelParams {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ModelParams::zeros(arch, Scale::ONE).unwrap();
        for w in &mut params.weights {
            for i in 0..w.len() {
                w.set(i, rng.random_range(-1i8..=1));
            }
        }
        params
    }

    #[test]
    fn conv_border_elision_matches_naive_zero_pad() {
        // A same-padding conv must behave exactly like zero padding the
        // signed input: compare against a naive reference with explicit 0s.
        let arch = Architecture {
            name: "c".into(),
            input: (2, 5, 5),
            layers: vec![
                LayerKind::Conv {
                    kernel: 3,
                    channels: 3,
                    padding: 1,
                },
                LayerKind::Dense { units: 2 },
            ],
        };
        let params = random_params(&arch, 11);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let bits: Vec<u8> = (0..50).map(|_| rng.random_range(0..=1) as u8).collect();
            let input = BinaryTensor::from_bits(&[2, 5, 5], &bits);
            let out = match forward_layer(arch.layers[0], Some(&params.weights[0]), &input, (2, 5, 5), false)
                .unwrap()
            {
                LayerOutput::Bits(b) => b,
                _ => unreachable!(),
            };
            // naive reference with explicit zero padding
            let w = &params.weights[0];
            for oc in 0..3 {
                for oy in 0..5usize {
                    for ox in 0..5usize {
                        let mut acc = 0i64;
                        for ic in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = oy as isize + ky as isize - 1;
                                    let ix = ox as isize + kx as isize - 1;
                                    let xv = if iy < 0 || iy >= 5 || ix < 0 || ix >= 5 {
                                        0
                                    } else {
                                        input.get_signed((ic * 5 + iy as usize) * 5 + ix as usize)
                                            as i64
                                    };
                                    let widx = ((oc * 2 + ic) * 3 + ky) * 3 + kx;
                                    acc += w.get(widx) as i64 * xv;
                                }
                            }
                        }
                        let expect = acc >= 0;
                        assert_eq!(out.get((oc * 5 + oy) * 5 + ox), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn params_file_roundtrip() {
        let arch = arch::by_name("m3").unwrap();
        let params = random_params(&arch, 99);
        let bytes = params.to_bytes().unwrap();
        let back = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn params_file_rejects_corruption() {
        let arch = arch::by_name("m1").unwrap();
        let params = random_params(&arch, 3);
        let mut bytes = params.to_bytes().unwrap();
        // flip one weight bit in the middle of the file
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            ModelParams::from_bytes(&bytes),
            Err(ModelError::Integrity)
        ));
        // truncation
        let params2 = ModelParams::from_bytes(&bytes[..10]);
        assert!(params2.is_err());
    }

    #[test]
    fn derived_thresholds_majority_rule() {
        let arch = Architecture {
            name: "t".into(),
            input: (5, 1, 1),
            layers: vec![LayerKind::Dense { units: 2 }, LayerKind::Dense { units: 2 }],
        };
        let mut params = ModelParams::zeros(&arch, Scale::ONE).unwrap();
        params.weights[0] =
            TernaryTensor::from_values(&[2, 5], &[1, 1, 1, 0, 0, 1, -1, 1, -1, 1]);
        params.weights[1] = TernaryTensor::from_values(&[2, 2], &[1, 0, 0, -1]);
        let t = params.derived_thresholds().unwrap();
        // unit 0: n_eff 3 -> ceil(3/2) = 2; unit 1: n_eff 5 -> 3
        assert_eq!(t[0], vec![2, 3]);
        // final layer: raw scores, no thresholds
        assert!(t[1].is_empty());
    }
}
