//! Packed ternary and binary tensors.
//!
//! `TernaryTensor` stores weights in {-1, 0, +1} at two bits per element;
//! `BinaryTensor` stores activations in {0, 1} (bit b encodes the value
//! 2b-1) at one bit per element. Both carry a shape but the packing is
//! flat row-major; all consumers index through `get`/`set`.

use std::fmt;

/// Encoding for one ternary element: `00` = 0, `01` = +1, `10` = -1.
/// `11` is invalid and rejected when unpacking.
const TERN_ZERO: u8 = 0b00;
const TERN_PLUS: u8 = 0b01;
const TERN_MINUS: u8 = 0b10;

/// A tensor with elements in {-1, 0, +1}, packed two bits per element.
#[derive(Clone, PartialEq, Eq)]
pub struct TernaryTensor {
    shape: Vec<usize>,
    /// Packed elements, 4 per byte, low bits first.
    packed: Vec<u8>,
    len: usize,
}

impl TernaryTensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len: usize = shape.iter().product();
        TernaryTensor {
            shape: shape.to_vec(),
            packed: vec![0u8; len.div_ceil(4)],
            len,
        }
    }

    /// Build from `i8` values; panics if any value is outside {-1, 0, +1}
    /// or the shape does not match.
    pub fn from_values(shape: &[usize], values: &[i8]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape/value count mismatch"
        );
        let mut t = TernaryTensor::zeros(shape);
        for (i, &v) in values.iter().enumerate() {
            t.set(i, v);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Element at flat index `i`.
    #[inline]
    pub fn get(&self, i: usize) -> i8 {
        debug_assert!(i < self.len);
        let code = (self.packed[i / 4] >> ((i % 4) * 2)) & 0b11;
        match code {
            TERN_PLUS => 1,
            TERN_MINUS => -1,
            _ => 0,
        }
    }

    /// Set flat index `i` to `v` in {-1, 0, +1}.
    #[inline]
    pub fn set(&mut self, i: usize, v: i8) {
        debug_assert!(i < self.len);
        let code = match v {
            0 => TERN_ZERO,
            1 => TERN_PLUS,
            -1 => TERN_MINUS,
            _ => panic!("ternary value out of range: {v}"),
        };
        let byte = &mut self.packed[i / 4];
        let off = (i % 4) * 2;
        *byte = (*byte & !(0b11 << off)) | (code << off);
    }

    pub fn iter(&self) -> impl Iterator<Item = i8> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn count_nonzero(&self) -> usize {
        self.iter().filter(|&v| v != 0).count()
    }

    /// Fraction of elements equal to zero; 0.0 for an empty tensor.
    pub fn sparsity(&self) -> f64 {
        if self.len == 0 {
            return 0.0;
        }
        (self.len - self.count_nonzero()) as f64 / self.len as f64
    }

    /// Raw packed bytes (for serialization).
    pub fn packed_bytes(&self) -> &[u8] {
        &self.packed
    }

    /// Nonzero mask: true where the element is ±1.
    pub fn mask(&self) -> BinaryTensor {
        let mut m = BinaryTensor::zeros(&self.shape);
        for i in 0..self.len {
            m.set(i, self.get(i) != 0);
        }
        m
    }

    /// Rebuild from packed bytes; rejects the invalid `11` code and
    /// nonzero padding bits.
    pub fn from_packed(shape: &[usize], packed: &[u8]) -> Result<Self, String> {
        let len: usize = shape.iter().product();
        if packed.len() != len.div_ceil(4) {
            return Err(format!(
                "packed length {} does not match {} elements",
                packed.len(),
                len
            ));
        }
        for i in 0..len {
            if (packed[i / 4] >> ((i % 4) * 2)) & 0b11 == 0b11 {
                return Err(format!("invalid ternary code at element {i}"));
            }
        }
        if len % 4 != 0 {
            if let Some(&last) = packed.last() {
                if last >> ((len % 4) * 2) != 0 {
                    return Err("nonzero padding bits in ternary tensor".into());
                }
            }
        }
        Ok(TernaryTensor {
            shape: shape.to_vec(),
            packed: packed.to_vec(),
            len,
        })
    }
}

impl fmt::Debug for TernaryTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "TernaryTensor{:?} nonzero {}/{}",
            self.shape,
            self.count_nonzero(),
            self.len
        )
    }
}

/// A tensor with elements in {0, 1}, packed one bit per element.
/// Bit b encodes the signed value 2b-1, i.e. 1 → +1 and 0 → -1.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryTensor {
    shape: Vec<usize>,
    words: Vec<u64>,
    len: usize,
}

impl BinaryTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len: usize = shape.iter().product();
        BinaryTensor {
            shape: shape.to_vec(),
            words: vec![0u64; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_bits(shape: &[usize], bits: &[u8]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            bits.len(),
            "shape/bit count mismatch"
        );
        let mut t = BinaryTensor::zeros(shape);
        for (i, &b) in bits.iter().enumerate() {
            debug_assert!(b <= 1, "binary value out of range: {b}");
            t.set(i, b != 0);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    /// Signed view of bit `i`: +1 or -1.
    #[inline]
    pub fn get_signed(&self, i: usize) -> i32 {
        if self.get(i) {
            1
        } else {
            -1
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, b: bool) {
        debug_assert!(i < self.len);
        let w = &mut self.words[i / 64];
        if b {
            *w |= 1 << (i % 64);
        } else {
            *w &= !(1 << (i % 64));
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn from_bools(shape: &[usize], bits: &[bool]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            bits.len(),
            "shape/bit count mismatch"
        );
        let mut t = BinaryTensor::zeros(shape);
        for (i, &b) in bits.iter().enumerate() {
            t.set(i, b);
        }
        t
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.iter().collect()
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Serialize to ceil(len/8) bytes, bit i at byte i/8, bit position i%8.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(8)];
        for i in 0..self.len {
            if self.get(i) {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    /// Rebuild from `to_bytes` output; rejects bad length and nonzero
    /// padding bits.
    pub fn from_bytes(shape: &[usize], bytes: &[u8]) -> Result<Self, String> {
        let len: usize = shape.iter().product();
        if bytes.len() != len.div_ceil(8) {
            return Err(format!(
                "bit-packed length {} does not match {} elements",
                bytes.len(),
                len
            ));
        }
        if len % 8 != 0 {
            if let Some(&last) = bytes.last() {
                if last >> (len % 8) != 0 {
                    return Err("nonzero padding bits in binary tensor".into());
                }
            }
        }
        let mut t = BinaryTensor::zeros(shape);
        for i in 0..len {
            t.set(i, (bytes[i / 8] >> (i % 8)) & 1 == 1);
        }
        Ok(t)
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.len, "reshape size");
        self.shape = shape.to_vec();
        self
    }
}

impl fmt::Debug for BinaryTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BinaryTensor{:?} ones {}/{}",
            self.shape,
            self.count_ones(),
            self.len
        )
    }
}
