//! Random crop and horizontal flip for training batches.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CROP_PAD: usize = 4;

/// Mirror index into `0..len` without repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i.rem_euclid(period);
    (if m < len { m } else { period - m }) as usize
}

/// Reverses the width axis of image `n`.
pub fn flip_horizontal<T: Scalar>(x: &mut Tensor<T>, n: usize) {
    let s = x.shape();
    for c in 0..s.c {
        let plane = x.plane_mut(n, c);
        for row in plane.chunks_mut(s.w) {
            row.reverse();
        }
    }
}

/// Shifts image `n` by `(dy, dx)` inside a reflect-padded frame, so the
/// output pixel `(y, x)` reads input `(y + dy - pad, x + dx - pad)`.
fn crop<T: Scalar>(
    src: &Tensor<T>,
    dst: &mut Tensor<T>,
    n: usize,
    dy: usize,
    dx: usize,
    pad: usize,
) {
    let s = src.shape();
    for c in 0..s.c {
        for y in 0..s.h {
            let iy = reflect((y + dy) as isize - pad as isize, s.h);
            for x in 0..s.w {
                let ix = reflect((x + dx) as isize - pad as isize, s.w);
                dst.set(n, c, y, x, src.at(n, c, iy, ix));
            }
        }
    }
}

/// Training: reflect-pad by 4, crop back to the original size at a random
/// offset and flip with probability 1/2. Evaluation returns the batch as is.
pub fn augment<T: Scalar, R: Rng>(batch: &Tensor<T>, training: bool, rng: &mut R) -> Tensor<T> {
    if !training {
        return batch.clone();
    }
    let mut out = batch.clone();
    for n in 0..batch.shape().n {
        let dy = rng.gen_range(0..=2 * CROP_PAD);
        let dx = rng.gen_range(0..=2 * CROP_PAD);
        let flip: bool = rng.gen_bool(0.5);
        crop(batch, &mut out, n, dy, dx, CROP_PAD);
        if flip {
            flip_horizontal(&mut out, n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch() -> Tensor<f32> {
        Tensor::from_fn(Shape4::new(3, 2, 6, 5), |n, c, y, x| {
            (n * 1000 + c * 100 + y * 10 + x) as f32
        })
    }

    #[test]
    fn eval_is_identity() {
        let b = batch();
        assert_eq!(augment(&b, false, &mut ChaCha8Rng::seed_from_u64(0)), b);
    }

    #[test]
    fn double_flip_is_identity() {
        let b = batch();
        let mut f = b.clone();
        flip_horizontal(&mut f, 1);
        assert_ne!(f, b);
        flip_horizontal(&mut f, 1);
        assert_eq!(f, b);
    }

    #[test]
    fn centered_crop_is_identity() {
        let b = batch();
        let mut out = b.clone();
        out.fill(0.0);
        for n in 0..3 {
            crop(&b, &mut out, n, CROP_PAD, CROP_PAD, CROP_PAD);
        }
        assert_eq!(out, b);
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn seeded_augment_is_reproducible() {
        let b = batch();
        let a1 = augment(&b, true, &mut ChaCha8Rng::seed_from_u64(42));
        let a2 = augment(&b, true, &mut ChaCha8Rng::seed_from_u64(42));
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a1), bits(&a2));
        assert_eq!(a1.shape(), b.shape());
    }
}
