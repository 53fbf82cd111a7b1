//! Floating-point building blocks for training.
//!
//! Everything here operates on dense `f32` tensors and is written so that a
//! quantized forward pass through these ops produces *exactly* the same
//! decisions as the integer reference path in [`crate::model`]: activations
//! live in {-1, +1} (sign of the pre-activation, with `>= 0` mapping to +1,
//! matching [`crate::model::binarize_bit`]), weights are ternarized with the
//! same threshold rule as [`crate::model::ternarize`], and zero-padding
//! contributes nothing to a dot product just like elided border taps in the
//! compiled circuit.
//!
//! The ops are plain functions with explicit caches (column matrices, argmax
//! indices) rather than an autograd graph; the training loops wire them
//! together by hand. All kernels are single-threaded.

use ndarray::{Array, Array2, Array4, Dimension};

use crate::model::ternarize;

/// Output spatial size of a stride-1 convolution.
pub fn conv_output_hw(h: usize, w: usize, k: usize, pad: usize) -> (usize, usize) {
    assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
    (h + 2 * pad - k + 1, w + 2 * pad - k + 1)
}

/// Unfold a batch `(n, c, h, w)` into a column matrix of shape
/// `(c*k*k, n*oh*ow)` for a stride-1 convolution with symmetric zero padding.
///
/// Row order is `(c, ky, kx)` and column order `(n, oy, ox)`, which keeps the
/// weight layout identical to the flat `[oc][ic][ky][kx]` order used by the
/// packed model weights and the netlist compiler.
pub fn im2col(x: &Array4<f32>, k: usize, pad: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = conv_output_hw(h, w, k, pad);
    let cols_w = n * oh * ow;
    let mut cols = Array2::<f32>::zeros((c * k * k, cols_w));
    let xs = x.as_slice().expect("input must be standard layout");
    let cs = cols.as_slice_mut().expect("freshly allocated");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * cols_w;
                // Columns with any in-bounds source pixel form a contiguous
                // run in ox; everything else stays zero (padding).
                let ox_lo = pad.saturating_sub(kx).min(ow);
                let ox_hi = (w + pad - kx).min(ow).max(ox_lo);
                if ox_lo == ox_hi {
                    continue;
                }
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let src = x_base + (iy - pad) * w + (ox_lo + kx - pad);
                        let dst = row_base + (ni * oh + oy) * ow + ox_lo;
                        let len = ox_hi - ox_lo;
                        cs[dst..dst + len].copy_from_slice(&xs[src..src + len]);
                    }
                }
            }
        }
    }
    cols
}

/// Fold column gradients back onto the input: the adjoint of [`im2col`].
/// Overlapping windows accumulate.
pub fn col2im(
    dcols: &Array2<f32>,
    dims: (usize, usize, usize, usize),
    k: usize,
    pad: usize,
) -> Array4<f32> {
    let (n, c, h, w) = dims;
    let (oh, ow) = conv_output_hw(h, w, k, pad);
    let cols_w = n * oh * ow;
    assert_eq!(dcols.dim(), (c * k * k, cols_w), "column gradient shape");
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let ds = dcols.as_slice().expect("column gradients must be standard layout");
    let xs = dx.as_slice_mut().expect("freshly allocated");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * cols_w;
                let ox_lo = pad.saturating_sub(kx).min(ow);
                let ox_hi = (w + pad - kx).min(ow).max(ox_lo);
                if ox_lo == ox_hi {
                    continue;
                }
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let dst = x_base + (iy - pad) * w + (ox_lo + kx - pad);
                        let src = row_base + (ni * oh + oy) * ow + ox_lo;
                        for i in 0..ox_hi - ox_lo {
                            xs[dst + i] += ds[src + i];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Convolution forward from a precomputed column matrix. `w` has shape
/// `(oc, c*k*k)`; the result is `(n, oc, oh, ow)`.
pub fn conv_forward(cols: &Array2<f32>, w: &Array2<f32>, n: usize, oh: usize, ow: usize) -> Array4<f32> {
    let oc = w.dim().0;
    assert_eq!(w.dim().1, cols.dim().0, "weight columns vs patch rows");
    assert_eq!(cols.dim().1, n * oh * ow, "column count");
    let z = w.dot(cols);
    let z = z
        .into_shape_with_order((oc, n, oh, ow))
        .expect("shape checked above")
        .permuted_axes([1, 0, 2, 3]);
    z.as_standard_layout().to_owned()
}

/// Convolution backward. Returns `(dw, dcols)`; run [`col2im`] on `dcols`
/// to obtain the input gradient.
/// `dot` picks its output layout from the operand strides, so products of
/// transposed views can come back column-major. Everything downstream
/// (optimizer slices, the col2im scatter) wants row-major; this re-packs
/// only when needed.
fn standard(a: Array2<f32>) -> Array2<f32> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

pub fn conv_backward(
    cols: &Array2<f32>,
    w: &Array2<f32>,
    dz: &Array4<f32>,
) -> (Array2<f32>, Array2<f32>) {
    let (n, oc, oh, ow) = dz.dim();
    assert_eq!(oc, w.dim().0, "output channels");
    let dz2 = dz.view().permuted_axes([1, 0, 2, 3]);
    let dz2 = dz2.as_standard_layout();
    let dz2 = dz2
        .to_shape((oc, n * oh * ow))
        .expect("contiguous after standardizing");
    let dw = standard(dz2.dot(&cols.t()));
    let dcols = standard(w.t().dot(&dz2));
    (dw, dcols)
}

/// Fully connected forward: `x (n, in) * w (out, in)^T -> (n, out)`.
pub fn linear_forward(x: &Array2<f32>, w: &Array2<f32>) -> Array2<f32> {
    x.dot(&w.t())
}

/// Fully connected backward. Returns `(dw, dx)`.
pub fn linear_backward(
    x: &Array2<f32>,
    w: &Array2<f32>,
    dy: &Array2<f32>,
) -> (Array2<f32>, Array2<f32>) {
    (standard(dy.t().dot(x)), standard(dy.dot(w)))
}

fn pool_scan(
    x: &[f32],
    base: usize,
    w: usize,
    ys: std::ops::Range<usize>,
    xs: std::ops::Range<usize>,
) -> (usize, f32) {
    let mut best_idx = usize::MAX;
    let mut best = f32::NEG_INFINITY;
    for y in ys {
        for xi in xs.clone() {
            let idx = base + y * w + xi;
            // Strict comparison keeps the first maximum in scan order.
            if x[idx] > best {
                best = x[idx];
                best_idx = idx;
            }
        }
    }
    (best_idx, best)
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped,
/// matching the bit-level reference. Returns the pooled batch and, for each
/// output element, the flat index of the first maximum in its window (used
/// to route gradients).
pub fn maxpool2_forward(x: &Array4<f32>) -> (Array4<f32>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    assert!(h >= 2 && w >= 2, "input too small to pool");
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.as_slice().expect("input must be standard layout");
    let mut out = Array4::<f32>::zeros((n, c, oh, ow));
    let os = out.as_slice_mut().expect("freshly allocated");
    let mut idx = vec![0u32; n * c * oh * ow];
    let mut o = 0;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (i, v) =
                        pool_scan(xs, base, w, 2 * oy..2 * oy + 2, 2 * ox..2 * ox + 2);
                    os[o] = v;
                    idx[o] = i as u32;
                    o += 1;
                }
            }
        }
    }
    (out, idx)
}

/// Gradient of [`maxpool2_forward`]: each output gradient is routed to the
/// recorded argmax position; overlaps (impossible at stride 2) would add.
pub fn maxpool2_backward(
    dy: &Array4<f32>,
    idx: &[u32],
    dims: (usize, usize, usize, usize),
) -> Array4<f32> {
    let mut dx = Array4::<f32>::zeros(dims);
    let ds = dy.as_slice().expect("gradient must be standard layout");
    assert_eq!(ds.len(), idx.len(), "index cache length");
    let xs = dx.as_slice_mut().expect("freshly allocated");
    for (g, &i) in ds.iter().zip(idx) {
        xs[i as usize] += g;
    }
    dx
}

/// Shape-preserving 2x2 max pooling with stride 1, used inside the mixed
/// search network. Output `(y, x)` is the max over `{y-1, y} x {x-1, x}`
/// clipped to the input bounds, so out-of-range taps simply drop out.
pub fn maxpool2_s1_forward(x: &Array4<f32>) -> (Array4<f32>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let xs = x.as_slice().expect("input must be standard layout");
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    let os = out.as_slice_mut().expect("freshly allocated");
    let mut idx = vec![0u32; n * c * h * w];
    let mut o = 0;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for y in 0..h {
                for xi in 0..w {
                    let (i, v) = pool_scan(
                        xs,
                        base,
                        w,
                        y.saturating_sub(1)..y + 1,
                        xi.saturating_sub(1)..xi + 1,
                    );
                    os[o] = v;
                    idx[o] = i as u32;
                    o += 1;
                }
            }
        }
    }
    (out, idx)
}

/// Gradient of [`maxpool2_s1_forward`]. Windows overlap at stride 1, so
/// routed gradients accumulate.
pub fn maxpool2_s1_backward(
    dy: &Array4<f32>,
    idx: &[u32],
    dims: (usize, usize, usize, usize),
) -> Array4<f32> {
    maxpool2_backward(dy, idx, dims)
}

/// Ternarize latent weights for the forward pass. Delegates to the same
/// routine used when packing a model for deployment, so training-time and
/// saved weights can never disagree.
pub fn ternarize_latent(w: &Array2<f32>) -> Array2<f32> {
    let dims = w.dim();
    let slice = w.as_slice().expect("weights must be standard layout");
    let (t, _) = ternarize(slice, &[slice.len()]).expect("non-empty weights");
    let vals: Vec<f32> = t.iter().map(|v| v as f32).collect();
    Array2::from_shape_vec(dims, vals).expect("same element count")
}

/// Straight-through gradient for the ternarizer: passes where the latent
/// weight lies in [-1, 1], blocks outside.
pub fn ternarize_grad(latent: &Array2<f32>, grad: &Array2<f32>) -> Array2<f32> {
    assert_eq!(latent.dim(), grad.dim(), "gradient shape");
    let mut out = grad.clone();
    out.zip_mut_with(latent, |g, &w| {
        if w.abs() > 1.0 {
            *g = 0.0;
        }
    });
    out
}

/// Elementwise sign with the deployment convention: `v >= 0` maps to +1.
pub fn sign_forward<D: Dimension>(z: &Array<f32, D>) -> Array<f32, D> {
    z.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

/// Straight-through gradient for the sign: a clipped identity scaled by
/// `1/kappa` inside the window `|z| <= kappa`, zero outside.
pub fn sign_grad<D: Dimension>(z: &Array<f32, D>, dy: &Array<f32, D>, kappa: f32) -> Array<f32, D> {
    assert!(kappa > 0.0, "window must be positive");
    let mut out = dy.clone();
    out.zip_mut_with(z, |g, &v| {
        *g = if v.abs() <= kappa { *g / kappa } else { 0.0 };
    });
    out
}

/// Adam optimizer over a fixed set of flat parameter slots.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// Advance the shared step counter; call once per optimization step,
    /// before updating any slot.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply one Adam update to a parameter slot.
    pub fn update(&mut self, slot: usize, param: &mut [f32], grad: &[f32]) {
        assert!(self.t > 0, "begin_step before update");
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        assert_eq!(param.len(), m.len(), "slot size");
        assert_eq!(grad.len(), m.len(), "gradient size");
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            param[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Mean cross-entropy over a batch with temperature-scaled logits, plus the
/// gradient with respect to the raw logits. Labels index the class axis.
pub fn softmax_ce(logits: &Array2<f32>, labels: &[u8], tau: f32) -> (f32, Array2<f32>) {
    let (n, k) = logits.dim();
    assert_eq!(n, labels.len(), "label count");
    assert!(tau > 0.0, "temperature must be positive");
    let mut dlogits = Array2::<f32>::zeros((n, k));
    let mut loss = 0.0f64;
    for (i, row) in logits.outer_iter().enumerate() {
        let y = labels[i] as usize;
        assert!(y < k, "label out of range");
        let mut mx = f32::NEG_INFINITY;
        for &z in row {
            mx = mx.max(z / tau);
        }
        let mut denom = 0.0f32;
        for &z in row {
            denom += (z / tau - mx).exp();
        }
        loss += f64::from(denom.ln() - (logits[(i, y)] / tau - mx));
        for j in 0..k {
            let p = (logits[(i, j)] / tau - mx).exp() / denom;
            let ind = if j == y { 1.0 } else { 0.0 };
            dlogits[(i, j)] = (p - ind) / (n as f32 * tau);
        }
    }
    ((loss / n as f64) as f32, dlogits)
}

/// Count correct argmax predictions; ties resolve to the lowest class index,
/// matching the integer reference.
pub fn accuracy_count(logits: &Array2<f32>, labels: &[u8]) -> usize {
    let mut correct = 0;
    for (row, &y) in logits.outer_iter().zip(labels) {
        let mut best = 0;
        for (j, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = j;
            }
        }
        if best == y as usize {
            correct += 1;
        }
    }
    correct
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::binarize_bit;
    use ndarray::{Array1, Array2, Array4};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_array4(rng: &mut ChaCha12Rng, dims: (usize, usize, usize, usize)) -> Array4<f32> {
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Array4::from_shape_vec(dims, v).unwrap()
    }

    fn rand_array2(rng: &mut ChaCha12Rng, dims: (usize, usize)) -> Array2<f32> {
        let n = dims.0 * dims.1;
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Array2::from_shape_vec(dims, v).unwrap()
    }

    /// Naive direct convolution used as the oracle for the im2col path.
    fn conv_naive(x: &Array4<f32>, w: &Array2<f32>, k: usize, pad: usize) -> Array4<f32> {
        let (n, c, h, ww) = x.dim();
        let oc = w.dim().0;
        let (oh, ow) = conv_output_hw(h, ww, k, pad);
        let mut out = Array4::<f32>::zeros((n, oc, oh, ow));
        for ni in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy + ky;
                                    let ix = ox + kx;
                                    if iy < pad || ix < pad {
                                        continue;
                                    }
                                    let (iy, ix) = (iy - pad, ix - pad);
                                    if iy >= h || ix >= ww {
                                        continue;
                                    }
                                    acc += x[(ni, ci, iy, ix)]
                                        * w[(o, (ci * k + ky) * k + kx)];
                                }
                            }
                        }
                        out[(ni, o, oy, ox)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for &(k, pad) in &[(3usize, 0usize), (3, 1), (5, 2), (1, 0)] {
            let x = rand_array4(&mut rng, (2, 3, 7, 6));
            let w = rand_array2(&mut rng, (4, 3 * k * k));
            let (oh, ow) = conv_output_hw(7, 6, k, pad);
            let cols = im2col(&x, k, pad);
            let got = conv_forward(&cols, &w, 2, oh, ow);
            let want = conv_naive(&x, &w, k, pad);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    /// Central-difference gradient check for the conv weight and input
    /// gradients through a quadratic loss.
    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let (k, pad) = (3, 1);
        let dims = (2, 2, 5, 4);
        let mut x = rand_array4(&mut rng, dims);
        let mut w = rand_array2(&mut rng, (3, 2 * k * k));
        let target = rand_array4(&mut rng, (2, 3, 5, 4));
        let loss = |x: &Array4<f32>, w: &Array2<f32>| -> f32 {
            let cols = im2col(x, k, pad);
            let z = conv_forward(&cols, w, 2, 5, 4);
            z.iter()
                .zip(target.iter())
                .map(|(a, b)| 0.5 * (a - b) * (a - b))
                .sum()
        };
        let cols = im2col(&x, k, pad);
        let z = conv_forward(&cols, &w, 2, 5, 4);
        let dz = &z - &target;
        let (dw, dcols) = conv_backward(&cols, &w, &dz);
        let dx = col2im(&dcols, dims, k, pad);
        let eps = 3e-3f32;
        for i in [0usize, 7, 20, 35] {
            let orig = w.as_slice().unwrap()[i];
            w.as_slice_mut().unwrap()[i] = orig + eps;
            let up = loss(&x, &w);
            w.as_slice_mut().unwrap()[i] = orig - eps;
            let dn = loss(&x, &w);
            w.as_slice_mut().unwrap()[i] = orig;
            let num = (up - dn) / (2.0 * eps);
            let ana = dw.as_slice().unwrap()[i];
            assert!((num - ana).abs() < 2e-2 * (1.0 + ana.abs()), "dw[{i}]: {num} vs {ana}");
        }
        for i in [0usize, 13, 41, 79] {
            let orig = x.as_slice().unwrap()[i];
            x.as_slice_mut().unwrap()[i] = orig + eps;
            let up = loss(&x, &w);
            x.as_slice_mut().unwrap()[i] = orig - eps;
            let dn = loss(&x, &w);
            x.as_slice_mut().unwrap()[i] = orig;
            let num = (up - dn) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[i];
            assert!((num - ana).abs() < 2e-2 * (1.0 + ana.abs()), "dx[{i}]: {num} vs {ana}");
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mut x = rand_array2(&mut rng, (4, 6));
        let mut w = rand_array2(&mut rng, (3, 6));
        let target = rand_array2(&mut rng, (4, 3));
        let loss = |x: &Array2<f32>, w: &Array2<f32>| -> f32 {
            let y = linear_forward(x, w);
            y.iter()
                .zip(target.iter())
                .map(|(a, b)| 0.5 * (a - b) * (a - b))
                .sum()
        };
        let dy = &linear_forward(&x, &w) - &target;
        let (dw, dx) = linear_backward(&x, &w, &dy);
        let eps = 3e-3f32;
        for i in [0usize, 5, 11, 17] {
            let orig = w.as_slice().unwrap()[i];
            w.as_slice_mut().unwrap()[i] = orig + eps;
            let up = loss(&x, &w);
            w.as_slice_mut().unwrap()[i] = orig - eps;
            let dn = loss(&x, &w);
            w.as_slice_mut().unwrap()[i] = orig;
            let num = (up - dn) / (2.0 * eps);
            let ana = dw.as_slice().unwrap()[i];
            assert!((num - ana).abs() < 2e-2 * (1.0 + ana.abs()));
        }
        for i in [0usize, 9, 23] {
            let orig = x.as_slice().unwrap()[i];
            x.as_slice_mut().unwrap()[i] = orig + eps;
            let up = loss(&x, &w);
            x.as_slice_mut().unwrap()[i] = orig - eps;
            let dn = loss(&x, &w);
            x.as_slice_mut().unwrap()[i] = orig;
            let num = (up - dn) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[i];
            assert!((num - ana).abs() < 2e-2 * (1.0 + ana.abs()));
        }
    }

    #[test]
    fn maxpool_matches_naive_and_keeps_first_tie() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let x = rand_array4(&mut rng, (2, 3, 5, 7));
        let (y, idx) = maxpool2_forward(&x);
        assert_eq!(y.dim(), (2, 3, 2, 3));
        for ni in 0..2 {
            for ci in 0..3 {
                for oy in 0..2 {
                    for ox in 0..3 {
                        let mut want = f32::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                want = want.max(x[(ni, ci, 2 * oy + dy, 2 * ox + dx)]);
                            }
                        }
                        assert_eq!(y[(ni, ci, oy, ox)], want);
                    }
                }
            }
        }
        // All-equal window: the recorded index must be the top-left element.
        let flat = Array4::from_elem((1, 1, 2, 2), 0.25f32);
        let (_, idx2) = maxpool2_forward(&flat);
        assert_eq!(idx2, vec![0]);
        // Routing check: gradients land exactly on the argmax positions.
        let dy = Array4::from_elem((2, 3, 2, 3), 1.0f32);
        let dx = maxpool2_backward(&dy, &idx, (2, 3, 5, 7));
        assert_eq!(dx.iter().filter(|v| **v != 0.0).count(), 2 * 3 * 2 * 3);
        assert!((dx.sum() - dy.sum()).abs() < 1e-6);
    }

    #[test]
    fn stride1_maxpool_windows_clip_at_the_border() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let x = rand_array4(&mut rng, (1, 2, 4, 5));
        let (y, idx) = maxpool2_s1_forward(&x);
        assert_eq!(y.dim(), x.dim());
        for ci in 0..2 {
            for yy in 0..4usize {
                for xx in 0..5usize {
                    let mut want = f32::NEG_INFINITY;
                    for sy in yy.saturating_sub(1)..=yy {
                        for sx in xx.saturating_sub(1)..=xx {
                            want = want.max(x[(0, ci, sy, sx)]);
                        }
                    }
                    assert_eq!(y[(0, ci, yy, xx)], want, "at ({ci},{yy},{xx})");
                }
            }
        }
        // Gradients accumulate across overlapping windows but preserve mass.
        let dy = Array4::from_elem((1, 2, 4, 5), 0.5f32);
        let dx = maxpool2_s1_backward(&dy, &idx, (1, 2, 4, 5));
        assert!((dx.sum() - dy.sum()).abs() < 1e-5);
    }

    #[test]
    fn quantizers_match_the_deployment_rules() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let w = rand_array2(&mut rng, (6, 9));
        let t = ternarize_latent(&w);
        let (packed, _) = ternarize(w.as_slice().unwrap(), &[54]).unwrap();
        for (i, &v) in t.iter().enumerate() {
            assert_eq!(v as i8, packed.get(i));
        }
        let z = Array1::from_vec(vec![-2.0f32, -0.0, 0.0, 1.0, -1.0, 3.5]);
        let s = sign_forward(&z);
        for (zi, si) in z.iter().zip(s.iter()) {
            assert_eq!(*si > 0.0, binarize_bit(if *zi >= 0.0 { 1 } else { -1 }));
        }
        // -0.0 >= 0.0 in IEEE; it must binarize to +1 like the integer 0.
        assert_eq!(s[1], 1.0);
    }

    #[test]
    fn straight_through_windows() {
        let latent = Array2::from_shape_vec((1, 4), vec![0.5f32, -1.0, 1.2, -3.0]).unwrap();
        let grad = Array2::from_elem((1, 4), 2.0f32);
        let g = ternarize_grad(&latent, &grad);
        assert_eq!(g.as_slice().unwrap(), &[2.0, 2.0, 0.0, 0.0]);
        let z = Array1::from_vec(vec![0.0f32, 3.9, 4.0, -4.1]);
        let dy = Array1::from_elem(4, 8.0f32);
        let dz = sign_grad(&z, &dy, 4.0);
        assert_eq!(dz.as_slice().unwrap(), &[2.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn adam_matches_hand_computed_steps() {
        let mut opt = Adam::new(0.1, &[2]);
        let mut p = vec![1.0f32, -1.0];
        let g = vec![0.5f32, -0.25];
        opt.begin_step();
        opt.update(0, &mut p, &g);
        // First step: mhat = g, vhat = g^2, so the update is
        // lr * g / (|g| + eps) = lr * sign(g) up to eps.
        assert!((p[0] - (1.0 - 0.1)).abs() < 1e-5, "{}", p[0]);
        assert!((p[1] - (-1.0 + 0.1)).abs() < 1e-5, "{}", p[1]);
        // Second step with a different gradient, checked against the
        // recurrence evaluated independently.
        let g2 = vec![-0.1f32, 0.4];
        opt.begin_step();
        opt.update(0, &mut p, &g2);
        let expect = |p0: f32, g1: f32, g2: f32| {
            let m2 = 0.9 * (0.1 * g1) + 0.1 * g2;
            let v2 = 0.999 * (0.001 * g1 * g1) + 0.001 * g2 * g2;
            let mh = m2 / (1.0 - 0.9f32.powi(2));
            let vh = v2 / (1.0 - 0.999f32.powi(2));
            p0 - 0.1 * mh / (vh.sqrt() + 1e-8)
        };
        // Step-1 state for slot 0: bias corrections are 1 - 0.9 and 1 - 0.999.
        let p0 = 1.0 - 0.1 * (0.1 * 0.5 / 0.1) / ((0.001f32 * 0.25 / 0.001).sqrt() + 1e-8);
        assert!((p[0] - expect(p0, 0.5, -0.1)).abs() < 1e-4, "{} vs {}", p[0], expect(p0, 0.5, -0.1));
    }

    #[test]
    fn cross_entropy_loss_and_gradient() {
        let logits =
            Array2::from_shape_vec((2, 3), vec![2.0f32, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let labels = [0u8, 2];
        let (loss, dl) = softmax_ce(&logits, &labels, 1.0);
        let p0 = (2.0f64.exp()) / (2.0f64.exp() + 1.0f64.exp() + 1.0);
        let want = (-(p0.ln()) - (1.0f64 / 3.0).ln()) / 2.0;
        assert!((f64::from(loss) - want).abs() < 1e-5);
        // Gradient rows sum to zero and point away from the true class.
        for row in dl.outer_iter() {
            assert!(row.sum().abs() < 1e-6);
        }
        assert!(dl[(0, 0)] < 0.0 && dl[(1, 2)] < 0.0);
        // Finite-difference check including the temperature.
        let mut l2 = logits.clone();
        let tau = 2.5;
        let (_, dl2) = softmax_ce(&l2, &labels, tau);
        let eps = 1e-2f32;
        for i in [0usize, 4] {
            let orig = l2.as_slice().unwrap()[i];
            l2.as_slice_mut().unwrap()[i] = orig + eps;
            let (up, _) = softmax_ce(&l2, &labels, tau);
            l2.as_slice_mut().unwrap()[i] = orig - eps;
            let (dn, _) = softmax_ce(&l2, &labels, tau);
            l2.as_slice_mut().unwrap()[i] = orig;
            let num = (up - dn) / (2.0 * eps);
            assert!((num - dl2.as_slice().unwrap()[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn accuracy_ties_resolve_low() {
        let logits =
            Array2::from_shape_vec((2, 3), vec![1.0f32, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(accuracy_count(&logits, &[0, 1]), 2);
        assert_eq!(accuracy_count(&logits, &[1, 2]), 0);
    }

    /// A quantized floating-point forward pass must score exactly like the
    /// packed integer reference on the same inputs.
    #[test]
    fn float_forward_agrees_with_packed_reference() {
        use crate::arch::{Architecture, LayerKind, Scale};
        use crate::model::{predict, ModelParams};
        use crate::tensor::BinaryTensor;

        let arch = Architecture {
            name: "t".into(),
            input: (1, 6, 6),
            layers: vec![
                LayerKind::Conv { kernel: 3, channels: 3, padding: 1 },
                LayerKind::MaxPool,
                LayerKind::Dense { units: 4 },
            ],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut params = ModelParams::zeros(&arch, Scale::ONE).unwrap();
        for w in &mut params.weights {
            for i in 0..w.len() {
                w.set(i, [-1i8, 0, 1][rng.random_range(0..3)]);
            }
        }
        for _ in 0..50 {
            let bits: Vec<bool> = (0..36).map(|_| rng.random()).collect();
            let image = BinaryTensor::from_bools(&[1, 6, 6], &bits);
            let (class, scores) = predict(&params, &image).unwrap();

            // Float path: conv -> sign -> pool -> flatten -> dense.
            let xv: Vec<f32> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
            let x = Array4::from_shape_vec((1, 1, 6, 6), xv).unwrap();
            let w0: Vec<f32> = (0..params.weights[0].len())
                .map(|i| params.weights[0].get(i) as f32)
                .collect();
            let w0 = Array2::from_shape_vec((3, 9), w0).unwrap();
            let cols = im2col(&x, 3, 1);
            let z = conv_forward(&cols, &w0, 1, 6, 6);
            let a = sign_forward(&z);
            let (pooled, _) = maxpool2_forward(&a);
            let flat = pooled.to_shape((1, 27)).unwrap().to_owned();
            let w1: Vec<f32> = (0..params.weights[1].len())
                .map(|i| params.weights[1].get(i) as f32)
                .collect();
            let w1 = Array2::from_shape_vec((4, 27), w1).unwrap();
            let logits = linear_forward(&flat, &w1);
            for (j, &s) in scores.iter().enumerate() {
                assert_eq!(logits[(0, j)] as i64, s, "score {j}");
            }
            assert_eq!(accuracy_count(&logits, &[class as u8]), 1);
        }
    }
}
