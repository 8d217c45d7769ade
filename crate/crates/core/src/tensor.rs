//! Dense rank-4 tensors and channel-packed binary tensors.
//!
//! Binary tensors pack the channel axis into 64-bit words, one word block per
//! spatial site. Bit value 1 encodes +1 and 0 encodes -1; bits at positions
//! at or above the channel count are always zero.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of channel bits per packed word.
pub const WORD_BITS: usize = 64;

/// `(batch, channel, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Rank-4 real tensor stored n-major, then c, h, w.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Config(format!(
                "tensor of shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape4::new(1, 1, 1, 1), value)
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The `h * w` plane for batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(mut self, shape: Shape4) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::Shape {
                context: "reshape",
                expected: self.shape,
                actual: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape, "add")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_shape(other.shape, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn expect_shape(&self, expected: Shape4, context: &'static str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Shape {
                context,
                expected,
                actual: self.shape,
            });
        }
        Ok(())
    }
}

/// Channel-packed binary tensor.
///
/// Site `(n, y, x)` owns `words_per_site` consecutive words; channel `k`
/// lives at bit `k % 64` of word `k / 64` within that block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Shape4,
    words_per_site: usize,
    words: Vec<u64>,
    valid_mask: Vec<u64>,
}

/// Mask words for a block of `c` channels.
pub fn channel_mask(c: usize) -> Vec<u64> {
    let wps = words_for(c);
    (0..wps)
        .map(|j| {
            let bits = (c - j * WORD_BITS).min(WORD_BITS);
            if bits == WORD_BITS {
                u64::MAX
            } else {
                (1u64 << bits) - 1
            }
        })
        .collect()
}

#[inline]
pub const fn words_for(c: usize) -> usize {
    c.div_ceil(WORD_BITS)
}

impl BitTensor {
    /// Builds a tensor from raw words, clearing any bits above the channel count.
    pub fn from_words(shape: Shape4, mut words: Vec<u64>) -> Result<Self> {
        let wps = words_for(shape.c);
        let sites = shape.n * shape.h * shape.w;
        if words.len() != sites * wps {
            return Err(Error::Config(format!(
                "bit tensor {shape} needs {} words, got {}",
                sites * wps,
                words.len()
            )));
        }
        let valid_mask = channel_mask(shape.c);
        for block in words.chunks_mut(wps.max(1)) {
            for (w, m) in block.iter_mut().zip(&valid_mask) {
                *w &= m;
            }
        }
        Ok(Self {
            shape,
            words_per_site: wps,
            words,
            valid_mask,
        })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn words_per_site(&self) -> usize {
        self.words_per_site
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn valid_mask(&self) -> &[u64] {
        &self.valid_mask
    }

    #[inline]
    pub fn site(&self, n: usize, y: usize, x: usize) -> &[u64] {
        let s = (n * self.shape.h + y) * self.shape.w + x;
        &self.words[s * self.words_per_site..(s + 1) * self.words_per_site]
    }

    #[inline]
    pub fn bit(&self, n: usize, c: usize, y: usize, x: usize) -> bool {
        (self.site(n, y, x)[c / WORD_BITS] >> (c % WORD_BITS)) & 1 == 1
    }
}

/// Packs `t` by the sign rule: bit set iff the element is `>= 0`.
pub fn pack_bits<T: Scalar>(t: &Tensor<T>) -> BitTensor {
    let s = t.shape();
    let wps = words_for(s.c);
    let plane = s.plane();
    let mut words = vec![0u64; s.n * plane * wps];
    let data = t.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let src = &data[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            let (j, bit) = (c / WORD_BITS, 1u64 << (c % WORD_BITS));
            let base = n * plane;
            for (p, &v) in src.iter().enumerate() {
                if v >= T::zero() {
                    words[(base + p) * wps + j] |= bit;
                }
            }
        }
    }
    BitTensor {
        shape: s,
        words_per_site: wps,
        words,
        valid_mask: channel_mask(s.c),
    }
}

/// Expands a packed tensor back to exact `+1` / `-1` reals.
pub fn unpack_bits<T: Scalar>(b: &BitTensor) -> Tensor<T> {
    let s = b.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    let data = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let (j, sh) = (c / WORD_BITS, c % WORD_BITS);
            for p in 0..plane {
                let word = b.words[(n * plane + p) * b.words_per_site + j];
                data[(n * s.c + c) * plane + p] = if (word >> sh) & 1 == 1 {
                    T::one()
                } else {
                    -T::one()
                };
            }
        }
    }
    out
}

/// `sum_i a_i * b_i` over the first `n_valid` +/-1 lanes, computed as
/// `n_valid - 2 * popcount(a ^ b)`. Bits beyond `n_valid` must be zero in both.
#[inline]
pub fn popcount_dot(a: &[u64], b: &[u64], n_valid: usize) -> i32 {
    debug_assert_eq!(a.len(), b.len());
    let differing: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
    n_valid as i32 - 2 * differing as i32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t1x3(v: [f32; 3]) -> Tensor<f32> {
        Tensor::from_vec(Shape4::new(1, 3, 1, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn pack_examples() {
        let b = pack_bits(&t1x3([1.0, 1.0, 1.0]));
        assert_eq!(b.words(), &[0b111]);
        assert_eq!(b.valid_mask(), &[0b111]);
        let b = pack_bits(&t1x3([-1.0, -1.0, -1.0]));
        assert_eq!(b.words(), &[0b000]);
        assert_eq!(b.valid_mask(), &[0b111]);
        let b = pack_bits(&t1x3([0.5, 0.0, -0.2]));
        assert_eq!(b.words(), &[0b011]);
    }

    #[test]
    fn unpack_examples() {
        let b = BitTensor::from_words(Shape4::new(1, 3, 1, 1), vec![0b101]).unwrap();
        assert_eq!(unpack_bits::<f32>(&b).data(), &[1.0, -1.0, 1.0]);
        let b = BitTensor::from_words(Shape4::new(1, 2, 1, 1), vec![0]).unwrap();
        assert_eq!(unpack_bits::<f32>(&b).data(), &[-1.0, -1.0]);
    }

    #[test]
    fn from_words_clears_tail_bits() {
        let b = BitTensor::from_words(Shape4::new(1, 3, 1, 1), vec![u64::MAX]).unwrap();
        assert_eq!(b.words(), &[0b111]);
    }

    #[test]
    fn mask_spans_word_boundary() {
        assert_eq!(channel_mask(64), vec![u64::MAX]);
        assert_eq!(channel_mask(65), vec![u64::MAX, 1]);
        assert_eq!(channel_mask(130), vec![u64::MAX, u64::MAX, 0b11]);
    }

    #[test]
    fn popcount_dot_examples() {
        let m = (1u64 << 7) - 1;
        let a = [0b1011001u64];
        assert_eq!(popcount_dot(&a, &a, 7), 7);
        assert_eq!(popcount_dot(&a, &[!a[0] & m], 7), -7);
        assert_eq!(popcount_dot(&[0b011], &[0b001], 3), 1);
    }

    fn random_pm1(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
        (0..len)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect()
    }

    #[test]
    fn popcount_dot_matches_real_dot_1000_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let len = rng.gen_range(1..=200);
            let a = random_pm1(&mut rng, len);
            let b = random_pm1(&mut rng, len);
            let real: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let shape = Shape4::new(1, len, 1, 1);
            let pa = pack_bits(&Tensor::from_vec(shape, a).unwrap());
            let pb = pack_bits(&Tensor::from_vec(shape, b).unwrap());
            let d = popcount_dot(pa.words(), pb.words(), len);
            assert_eq!(d, real as i32);
            assert_eq!((d - len as i32).rem_euclid(2), 0);
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_is_sign(
            c in 1usize..140,
            h in 1usize..4,
            vals in proptest::collection::vec(prop_oneof![Just(0.0f32), -3.0f32..3.0], 560)
        ) {
            let shape = Shape4::new(1, c, h, 1);
            let data: Vec<f32> = vals.iter().cycle().take(shape.numel()).copied().collect();
            let t = Tensor::from_vec(shape, data).unwrap();
            let packed = pack_bits(&t);
            let back: Tensor<f32> = unpack_bits(&packed);
            for (v, s) in t.data().iter().zip(back.data()) {
                prop_assert_eq!(*s, if *v >= 0.0 { 1.0 } else { -1.0 });
            }
            for site in packed.words().chunks(packed.words_per_site()) {
                for (w, m) in site.iter().zip(packed.valid_mask()) {
                    prop_assert_eq!(w & !m, 0);
                }
            }
        }

        #[test]
        fn popcount_dot_parity(len in 1usize..300, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = Shape4::new(1, len, 1, 1);
            let a = pack_bits(&Tensor::from_vec(shape, random_pm1(&mut rng, len)).unwrap());
            let b = pack_bits(&Tensor::from_vec(shape, random_pm1(&mut rng, len)).unwrap());
            let d = popcount_dot(a.words(), b.words(), len);
            prop_assert_eq!((d - len as i32).rem_euclid(2), 0);
            prop_assert!(d.abs() <= len as i32);
        }
    }
}
