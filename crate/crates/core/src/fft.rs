//! Unitary radix-2 FFT.
//!
//! Both directions carry a `1/sqrt(L)` factor so the inverse transform is
//! exactly `x(n) = (1/sqrt(L)) Σ_k V(k) e^{+j2πnk/L}` and the pair is an
//! isometry. The real-linear adjoint of either direction is the other one,
//! which is what the differentiable graph relies on.

use crate::error::{Error, Result};
use crate::tensor::ComplexVector;
use std::f64::consts::PI;

#[derive(Debug, Clone)]
pub struct Fft {
    len: usize,
    log2: u32,
    // e^{-j2πk/L} for k < L/2
    tw_re: Vec<f64>,
    tw_im: Vec<f64>,
    scale: f64,
}

impl Fft {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 || !len.is_power_of_two() {
            return Err(Error::UnsupportedLength(len));
        }
        let half = len / 2;
        let (tw_re, tw_im) = (0..half)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / len as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        Ok(Self {
            len,
            log2: len.trailing_zeros(),
            tw_re,
            tw_im,
            scale: 1.0 / (len as f64).sqrt(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// In-place unitary transform on split real/imaginary buffers.
    pub fn process(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        assert_eq!(re.len(), self.len);
        assert_eq!(im.len(), self.len);
        let n = self.len;
        if n == 1 {
            return;
        }
        let shift = usize::BITS - self.log2;
        for i in 0..n {
            let j = i.reverse_bits() >> shift;
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let wr = self.tw_re[k * stride];
                    let wi = sign * self.tw_im[k * stride];
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            size *= 2;
        }
        for v in re.iter_mut().chain(im.iter_mut()) {
            *v *= self.scale;
        }
    }

    /// Same as [`Fft::process`] on an interleaved `[re, im, re, im, ...]`
    /// buffer of length `2L`.
    pub fn process_interleaved(&self, buf: &mut [f64], inverse: bool) {
        assert_eq!(buf.len(), 2 * self.len);
        let mut re: Vec<f64> = buf.iter().step_by(2).copied().collect();
        let mut im: Vec<f64> = buf.iter().skip(1).step_by(2).copied().collect();
        self.process(&mut re, &mut im, inverse);
        for (k, (r, i)) in re.into_iter().zip(im).enumerate() {
            buf[2 * k] = r;
            buf[2 * k + 1] = i;
        }
    }
}

/// Unitary DFT (`inverse = false`) or IDFT (`inverse = true`) of `v`.
pub fn unitary_dft(v: &ComplexVector, inverse: bool) -> Result<ComplexVector> {
    let plan = Fft::new(v.len())?;
    let mut out = v.clone();
    plan.process(&mut out.re, &mut out.im, inverse);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(v: &ComplexVector, inverse: bool) -> ComplexVector {
        let l = v.len();
        let s = if inverse { 1.0 } else { -1.0 };
        let mut out = ComplexVector::zeros(l);
        for n in 0..l {
            for k in 0..l {
                let a = s * 2.0 * PI * (n * k) as f64 / l as f64;
                let (c, si) = (a.cos(), a.sin());
                out.re[n] += v.re[k] * c - v.im[k] * si;
                out.im[n] += v.re[k] * si + v.im[k] * c;
            }
            out.re[n] /= (l as f64).sqrt();
            out.im[n] /= (l as f64).sqrt();
        }
        out
    }

    fn random(len: usize, rng: &mut ChaCha8Rng) -> ComplexVector {
        ComplexVector::new(
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn impulse_inverse() {
        let v = ComplexVector::new(vec![1.0, 0.0, 0.0, 0.0], vec![0.0; 4]).unwrap();
        let out = unitary_dft(&v, true).unwrap();
        for k in 0..4 {
            assert!((out.re[k] - 0.5).abs() < 1e-15);
            assert!(out.im[k].abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        let v = ComplexVector::zeros(6);
        assert!(matches!(
            unitary_dft(&v, true),
            Err(Error::UnsupportedLength(6))
        ));
        assert!(Fft::new(0).is_err());
    }

    #[test]
    fn matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [1, 2, 4, 8, 64] {
            let v = random(len, &mut rng);
            for inverse in [false, true] {
                let fast = unitary_dft(&v, inverse).unwrap();
                let slow = naive(&v, inverse);
                for k in 0..len {
                    assert!((fast.re[k] - slow.re[k]).abs() < 1e-12);
                    assert!((fast.im[k] - slow.im[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn roundtrip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut len = 4;
        while len <= 1024 {
            let v = random(len, &mut rng);
            let t = unitary_dft(&v, true).unwrap();
            let back = unitary_dft(&t, false).unwrap();
            for k in 0..len {
                assert!((back.re[k] - v.re[k]).abs() < 1e-12);
                assert!((back.im[k] - v.im[k]).abs() < 1e-12);
            }
            assert!((v.energy() - t.energy()).abs() < 1e-12 * v.energy().max(1.0));
            len *= 2;
        }
    }
}
