//! ACO-OFDM physical chain.
//!
//! `N` data symbols ride on the odd subcarriers `1, 3, …, 2N−1` of a
//! `4N`-point spectrum, with their conjugates mirrored onto `4N−1, 4N−3, …`
//! and every even subcarrier left empty. The resulting time signal is real
//! and antisymmetric (`x̂(n) = −x̂(n+2N)`), so zero-clipping the negative half
//! only halves the data subcarriers and dumps the distortion onto the even
//! ones.

use crate::error::{Error, Result};
use crate::fft::Fft;
use crate::graph::{first_argmax_sq, Graph, Var};
use crate::metrics::MetricCurve;
use crate::tensor::ComplexVector;
use rand::Rng;
use rand_distr::StandardNormal;

/// Largest imaginary residue tolerated after the transmit IFFT.
pub const IMAG_TOL: f64 = 1e-10;

/// Mean electrical power `E[x²(n)]` of the clipped signal under unit
/// average symbol power.
pub const CLIPPED_SIGNAL_POWER: f64 = 0.25;

/// Hermitian layout `[0, X₀, 0, X₁, …, 0, X_{N−1}, 0, X*_{N−1}, …, 0, X*₀]`.
pub fn hermitian_map(data: &ComplexVector) -> ComplexVector {
    let n = data.len();
    let l = 4 * n;
    let mut out = ComplexVector::zeros(l);
    for k in 0..n {
        let pos = 2 * k + 1;
        let neg = l - pos;
        out.re[pos] = data.re[k];
        out.im[pos] = data.im[k];
        out.re[neg] = data.re[k];
        out.im[neg] = -data.im[k];
    }
    out
}

/// One transmitted ACO-OFDM symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct OfdmFrame {
    pub n_data: usize,
    pub data: ComplexVector,
    pub freq: ComplexVector,
    pub time_unclipped: Vec<f64>,
    pub time_clipped: Vec<f64>,
}

/// Transmitter/receiver for a fixed number of data subcarriers.
#[derive(Debug, Clone)]
pub struct AcoModem {
    n_data: usize,
    plan: Fft,
}

impl AcoModem {
    pub fn new(n_data: usize) -> Result<Self> {
        if n_data == 0 {
            return Err(Error::UnsupportedLength(0));
        }
        Ok(Self {
            n_data,
            plan: Fft::new(4 * n_data)?,
        })
    }

    pub fn n_data(&self) -> usize {
        self.n_data
    }

    pub fn frame_len(&self) -> usize {
        4 * self.n_data
    }

    pub fn modulate(&self, data: &ComplexVector) -> Result<OfdmFrame> {
        if data.len() != self.n_data {
            return Err(Error::Dimension(format!(
                "frame has {} symbols, modem expects {}",
                data.len(),
                self.n_data
            )));
        }
        if data.re.iter().chain(&data.im).any(|v| !v.is_finite()) {
            return Err(Error::Consistency("non-finite data symbol".into()));
        }
        let freq = hermitian_map(data);
        let mut re = freq.re.clone();
        let mut im = freq.im.clone();
        self.plan.process(&mut re, &mut im, true);
        let worst = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if worst >= IMAG_TOL {
            return Err(Error::Consistency(format!(
                "imaginary residue {worst:e} after IFFT (Hermitian layout broken)"
            )));
        }
        let time_clipped = re.iter().map(|&v| if v >= 0.0 { v } else { 0.0 }).collect();
        Ok(OfdmFrame {
            n_data: self.n_data,
            data: data.clone(),
            freq,
            time_unclipped: re,
            time_clipped,
        })
    }

    /// Unitary FFT of `y`, keeping data subcarriers `1, 3, …, 2N−1`.
    pub fn demodulate(&self, y: &[f64]) -> Result<ComplexVector> {
        let l = self.frame_len();
        if y.len() != l {
            return Err(Error::Dimension(format!(
                "received {} samples, expected {l}",
                y.len()
            )));
        }
        let mut re = y.to_vec();
        let mut im = vec![0.0; l];
        self.plan.process(&mut re, &mut im, false);
        let pick = |v: &[f64]| (0..self.n_data).map(|k| v[2 * k + 1]).collect();
        Ok(ComplexVector {
            re: pick(&re),
            im: pick(&im),
        })
    }
}

pub fn modulate(data: &ComplexVector) -> Result<OfdmFrame> {
    AcoModem::new(data.len())?.modulate(data)
}

pub fn demodulate(y: &[f64]) -> Result<ComplexVector> {
    if !y.len().is_multiple_of(4) {
        return Err(Error::UnsupportedLength(y.len()));
    }
    AcoModem::new(y.len() / 4)?.demodulate(y)
}

/// AWGN level for a given SNR, `σ² = E[x²(n)] / 10^(SNR/10)` with
/// `E[x²(n)] = 1/4`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma2: f64,
    pub snr_db: f64,
}

impl NoiseSpec {
    pub fn from_snr_db(snr_db: f64) -> Self {
        Self {
            sigma2: CLIPPED_SIGNAL_POWER / 10f64.powf(snr_db / 10.0),
            snr_db,
        }
    }

    pub fn noiseless() -> Self {
        Self {
            sigma2: 0.0,
            snr_db: f64::INFINITY,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

/// i.i.d. `N(0, σ²)` samples.
pub fn gaussian_noise(len: usize, noise: &NoiseSpec, rng: &mut impl Rng) -> Vec<f64> {
    let s = noise.sigma();
    (0..len)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            s * z
        })
        .collect()
}

/// `y = x + z` over a unit-gain channel.
pub fn channel(x: &[f64], noise: &NoiseSpec, rng: &mut impl Rng) -> Vec<f64> {
    if noise.sigma2 == 0.0 {
        return x.to_vec();
    }
    let z = gaussian_noise(x.len(), noise, rng);
    x.iter().zip(z).map(|(a, b)| a + b).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaprSample {
    pub linear: f64,
    pub db: f64,
}

impl PaprSample {
    fn from_linear(linear: f64) -> Self {
        Self {
            linear,
            db: 10.0 * linear.log10(),
        }
    }
}

/// `max|x|² / mean|x|²`.
pub fn papr(x: &[f64]) -> Result<PaprSample> {
    if x.is_empty() {
        return Err(Error::UndefinedPapr);
    }
    let mean = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    if mean <= 0.0 {
        return Err(Error::UndefinedPapr);
    }
    let (_, peak) = first_argmax_sq(x);
    Ok(PaprSample::from_linear(peak / mean))
}

/// Empirical `Pr(PAPR ≥ t)` at each threshold.
pub fn ccdf(paprs_db: &[f64], thresholds_db: &[f64]) -> Result<MetricCurve> {
    if paprs_db.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut sorted = paprs_db.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as u64;
    let counts: Vec<u64> = thresholds_db
        .iter()
        .map(|&t| (sorted.len() - sorted.partition_point(|&p| p < t)) as u64)
        .collect();
    Ok(MetricCurve::from_counts(
        "ccdf",
        thresholds_db.to_vec(),
        counts,
        vec![n; thresholds_db.len()],
    ))
}

/// Differentiable transmitter: interleaved `F×2N` symbols to clipped
/// `F×4N` time samples. Returns `(unclipped, clipped)`.
pub fn modulate_graph(g: &mut Graph, symbols: Var) -> Result<(Var, Var)> {
    let spectrum = g.hermitian(symbols)?;
    let time = g.dft(spectrum, true)?;
    let unclipped = g.real_part(time, IMAG_TOL)?;
    let clipped = g.clip_zero(unclipped);
    Ok((unclipped, clipped))
}

/// Differentiable receiver: `F×4N` samples to interleaved `F×2N` data
/// subcarriers.
pub fn demodulate_graph(g: &mut Graph, y: Var) -> Result<Var> {
    let c = g.to_complex(y);
    let spectrum = g.dft(c, false)?;
    g.select_odd(spectrum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RealTensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_data(n: usize, rng: &mut ChaCha8Rng) -> ComplexVector {
        ComplexVector::new(
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn hermitian_layout_small() {
        let d = ComplexVector::from_pairs(&[(1.0, 1.0)]);
        let h = hermitian_map(&d);
        assert_eq!(h.re, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(h.im, vec![0.0, 1.0, 0.0, -1.0]);

        let d = ComplexVector::from_pairs(&[(1.0, 2.0), (3.0, 4.0)]);
        let h = hermitian_map(&d);
        assert_eq!(h.re, vec![0.0, 1.0, 0.0, 3.0, 0.0, 3.0, 0.0, 1.0]);
        assert_eq!(h.im, vec![0.0, 2.0, 0.0, 4.0, 0.0, -4.0, 0.0, -2.0]);

        let z = hermitian_map(&ComplexVector::zeros(4));
        assert!(z.re.iter().chain(&z.im).all(|&v| v == 0.0));
    }

    #[test]
    fn modulate_one_symbol() {
        let f = modulate(&ComplexVector::from_pairs(&[(1.0, 1.0)])).unwrap();
        // x̂(n) = ½·[(1+j)jⁿ + (1−j)(−j)ⁿ] evaluated directly
        let expected = [1.0, -1.0, -1.0, 1.0];
        for (a, b) in f.time_unclipped.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(f.time_clipped, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn antisymmetry_and_halving_over_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let modem = AcoModem::new(16).unwrap();
        for _ in 0..100 {
            let d = random_data(16, &mut rng);
            let f = modem.modulate(&d).unwrap();
            for n in 0..32 {
                assert!((f.time_unclipped[n] + f.time_unclipped[n + 32]).abs() < 1e-10);
            }
            assert!(f.time_clipped.iter().all(|&v| v >= 0.0));
            let full = modem.demodulate(&f.time_unclipped).unwrap();
            let half = modem.demodulate(&f.time_clipped).unwrap();
            for k in 0..16 {
                assert!((full.re[k] - d.re[k]).abs() < 1e-12);
                assert!((full.im[k] - d.im[k]).abs() < 1e-12);
                assert!((half.re[k] - d.re[k] / 2.0).abs() < 1e-9);
                assert!((half.im[k] - d.im[k] / 2.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_frame_has_no_papr() {
        let f = modulate(&ComplexVector::zeros(4)).unwrap();
        assert!(f.time_clipped.iter().all(|&v| v == 0.0));
        assert!(matches!(papr(&f.time_clipped), Err(Error::UndefinedPapr)));
    }

    #[test]
    fn non_power_of_two_rejected() {
        assert!(matches!(
            modulate(&ComplexVector::zeros(3)),
            Err(Error::UnsupportedLength(12))
        ));
    }

    #[test]
    fn noiseless_channel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![0.5, 0.0, 1.5, 2.0];
        assert_eq!(channel(&x, &NoiseSpec::noiseless(), &mut rng), x);
        let sigma0 = NoiseSpec { sigma2: 0.0, snr_db: 0.0 };
        assert_eq!(channel(&x, &sigma0, &mut rng), x);
    }

    #[test]
    fn channel_noise_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let noise = NoiseSpec::from_snr_db(3.0);
        let n = 1_000_000;
        let x = vec![0.25; n];
        let y = channel(&x, &noise, &mut rng);
        let d: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((var / noise.sigma2 - 1.0).abs() < 0.01);
        assert!(mean.abs() < 3.0 * noise.sigma() / (n as f64).sqrt());
    }

    #[test]
    fn snr_to_sigma() {
        let n = NoiseSpec::from_snr_db(10.0);
        assert!((n.sigma2 - 0.025).abs() < 1e-15);
    }

    #[test]
    fn noise_only_demodulates_to_complex_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let modem = AcoModem::new(16).unwrap();
        let noise = NoiseSpec { sigma2: 1.0, snr_db: 0.0 };
        let mut acc_re = 0.0;
        let mut acc_im = 0.0;
        let frames = 4000;
        for _ in 0..frames {
            let z = gaussian_noise(64, &noise, &mut rng);
            let y = modem.demodulate(&z).unwrap();
            acc_re += y.re.iter().map(|v| v * v).sum::<f64>();
            acc_im += y.im.iter().map(|v| v * v).sum::<f64>();
        }
        let k = (frames * 16) as f64;
        // unitary FFT of real white noise: each component carries σ²/2
        assert!((acc_re / k - 0.5).abs() < 0.02);
        assert!((acc_im / k - 0.5).abs() < 0.02);
    }

    #[test]
    fn papr_examples() {
        let c = papr(&[2.0; 8]).unwrap();
        assert!((c.linear - 1.0).abs() < 1e-15 && c.db.abs() < 1e-12);
        let p = papr(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.linear, 4.0);
        assert!((p.db - 6.0206).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = modulate(&random_data(16, &mut rng)).unwrap();
        let x = &f.time_clipped;
        let peak = x.iter().map(|v| v * v).fold(0.0, f64::max);
        let mean = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let got = papr(x).unwrap().linear;
        assert!((got - peak / mean).abs() < 1e-12 * got);
        assert!(got >= 1.0);
    }

    #[test]
    fn ccdf_examples() {
        let c = ccdf(&[5.0; 10], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(c.y, vec![1.0, 1.0, 0.0]);
        let c = ccdf(&[3.0, 7.0], &[-10.0]).unwrap();
        assert_eq!(c.y, vec![1.0]);
        assert!(matches!(ccdf(&[], &[1.0]), Err(Error::EmptySamples)));
    }

    #[test]
    fn ccdf_matches_direct_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let samples: Vec<f64> = (0..2000).map(|_| rng.random_range(0.0..12.0)).collect();
        let thresholds: Vec<f64> = (0..=48).map(|i| i as f64 * 0.25).collect();
        let c = ccdf(&samples, &thresholds).unwrap();
        for (t, y) in thresholds.iter().zip(&c.y) {
            let count = samples.iter().filter(|&&p| p >= *t).count();
            assert_eq!(*y, count as f64 / 2000.0);
        }
        assert!(c.y.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn graph_chain_matches_plain_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let modem = AcoModem::new(8).unwrap();
        let frames: Vec<ComplexVector> = (0..3).map(|_| random_data(8, &mut rng)).collect();
        let sym: Vec<f64> = frames.iter().flat_map(|f| f.to_interleaved()).collect();
        let mut g = Graph::new();
        let s = g.param(RealTensor::new(vec![3, 16], sym).unwrap());
        let (unclipped, clipped) = modulate_graph(&mut g, s).unwrap();
        let rx = demodulate_graph(&mut g, clipped).unwrap();
        for (i, f) in frames.iter().enumerate() {
            let plain = modem.modulate(f).unwrap();
            let row = g.value(unclipped).row(i);
            for (a, b) in row.iter().zip(&plain.time_unclipped) {
                assert!((a - b).abs() < 1e-14);
            }
            let got = ComplexVector::from_interleaved(g.value(rx).row(i));
            let want = modem.demodulate(&plain.time_clipped).unwrap();
            for k in 0..8 {
                assert!((got.re[k] - want.re[k]).abs() < 1e-14);
                assert!((got.im[k] - want.im[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn broken_layout_detected() {
        let mut g = Graph::new();
        // bypass the Hermitian map: a lone complex tone is not real after IFFT
        let mut spec = vec![0.0; 16];
        spec[2] = 1.0;
        let s = g.param(RealTensor::new(vec![1, 16], spec).unwrap());
        let t = g.dft(s, true).unwrap();
        assert!(matches!(g.real_part(t, IMAG_TOL), Err(Error::Consistency(_))));
    }
}
