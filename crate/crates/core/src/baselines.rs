//! Non-learning reference systems: uniform square QAM with minimum-distance
//! detection, amplitude clipping, and selected mapping (SLM).

use crate::error::{Error, Result};
use crate::ofdm::{papr, AcoModem, OfdmFrame};
use crate::tensor::ComplexVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Square QAM grid at odd integer coordinates, scaled to unit energy.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformQam {
    pub m: usize,
    pub points: Vec<(f64, f64)>,
    pub probs: Vec<f64>,
}

pub fn qam_constellation(m: usize) -> Result<UniformQam> {
    let side = (m as f64).sqrt().round() as usize;
    if side < 2 || side * side != m {
        return Err(Error::config("m", format!("{m} is not a square QAM order")));
    }
    let coords: Vec<f64> = (0..side).map(|i| (2 * i) as f64 - (side - 1) as f64).collect();
    // average energy of the odd grid: 2(M−1)/3
    let scale = (2.0 * (m as f64 - 1.0) / 3.0).sqrt().recip();
    let points = coords
        .iter()
        .flat_map(|&i| coords.iter().map(move |&q| (i * scale, q * scale)))
        .collect();
    Ok(UniformQam {
        m,
        points,
        probs: vec![1.0 / m as f64; m],
    })
}

/// Minimum-distance decision on `2·y`, undoing the ACO halving. Ties go to
/// the lowest index.
pub fn ml_detect(y_sub: (f64, f64), points: &[(f64, f64)]) -> usize {
    let (yr, yi) = (2.0 * y_sub.0, 2.0 * y_sub.1);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &(re, im)) in points.iter().enumerate() {
        let d = (yr - re).powi(2) + (yi - im).powi(2);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// `min(x, A)` with `A = sqrt(mean power) · 10^(cr_db/20)`.
pub fn amp_clip(x: &[f64], cr_db: f64) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let mean = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let a = mean.sqrt() * 10f64.powf(cr_db / 20.0);
    x.iter().map(|&v| v.min(a)).collect()
}

pub const SLM_DEFAULT_U: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlmConfig {
    pub u: usize,
    pub seed: u64,
}

impl Default for SlmConfig {
    fn default() -> Self {
        Self {
            u: SLM_DEFAULT_U,
            seed: 0,
        }
    }
}

/// Quaternary phase factor `{+1, −1, +j, −j}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase4 {
    PlusOne,
    MinusOne,
    PlusJ,
    MinusJ,
}

impl Phase4 {
    fn from_index(i: u32) -> Self {
        match i & 3 {
            0 => Phase4::PlusOne,
            1 => Phase4::MinusOne,
            2 => Phase4::PlusJ,
            _ => Phase4::MinusJ,
        }
    }

    pub fn rotate(self, (re, im): (f64, f64)) -> (f64, f64) {
        match self {
            Phase4::PlusOne => (re, im),
            Phase4::MinusOne => (-re, -im),
            Phase4::PlusJ => (-im, re),
            Phase4::MinusJ => (im, -re),
        }
    }

    pub fn conj(self) -> Self {
        match self {
            Phase4::PlusJ => Phase4::MinusJ,
            Phase4::MinusJ => Phase4::PlusJ,
            p => p,
        }
    }
}

/// The `U` candidate phase sequences over the data subcarriers. Candidate 0
/// is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SlmTable {
    pub sequences: Vec<Vec<Phase4>>,
}

impl SlmTable {
    pub fn new(cfg: &SlmConfig, n_data: usize) -> Result<Self> {
        if cfg.u == 0 {
            return Err(Error::config("u", "need at least one candidate"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sequences = vec![vec![Phase4::PlusOne; n_data]];
        for _ in 1..cfg.u {
            sequences.push((0..n_data).map(|_| Phase4::from_index(rng.random::<u32>())).collect());
        }
        Ok(Self { sequences })
    }

    pub fn u(&self) -> usize {
        self.sequences.len()
    }

    pub fn apply(&self, candidate: usize, data: &ComplexVector) -> ComplexVector {
        let seq = &self.sequences[candidate];
        let pairs: Vec<(f64, f64)> = (0..data.len()).map(|k| seq[k].rotate(data.get(k))).collect();
        ComplexVector::from_pairs(&pairs)
    }

    /// Undo candidate `candidate` on received data subcarriers.
    pub fn undo(&self, candidate: usize, y: &ComplexVector) -> ComplexVector {
        let seq = &self.sequences[candidate];
        let pairs: Vec<(f64, f64)> = (0..y.len()).map(|k| seq[k].conj().rotate(y.get(k))).collect();
        ComplexVector::from_pairs(&pairs)
    }
}

/// Modulate every candidate rotation and keep the lowest-PAPR frame
/// (first index on ties).
pub fn slm_select(data: &ComplexVector, table: &SlmTable, modem: &AcoModem) -> Result<(OfdmFrame, usize)> {
    let mut best: Option<(OfdmFrame, usize, f64)> = None;
    for c in 0..table.u() {
        let frame = modem.modulate(&table.apply(c, data))?;
        let p = papr(&frame.time_clipped)?.linear;
        if best.as_ref().is_none_or(|b| p < b.2) {
            best = Some((frame, c, p));
        }
    }
    let (frame, idx, _) = best.expect("u ≥ 1");
    Ok((frame, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ofdm::{channel, NoiseSpec};

    fn random_frame(q: &UniformQam, n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, ComplexVector) {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..q.m)).collect();
        let pairs: Vec<(f64, f64)> = idx.iter().map(|&i| q.points[i]).collect();
        (idx, ComplexVector::from_pairs(&pairs))
    }

    #[test]
    fn qam_grids() {
        let q4 = qam_constellation(4).unwrap();
        let s = 1.0 / 2f64.sqrt();
        for &(re, im) in &q4.points {
            assert!((re.abs() - s).abs() < 1e-15 && (im.abs() - s).abs() < 1e-15);
        }
        let q16 = qam_constellation(16).unwrap();
        assert!((q16.points[0].0 + 3.0 / 10f64.sqrt()).abs() < 1e-15);
        for m in [4, 16, 64] {
            let q = qam_constellation(m).unwrap();
            let e: f64 = q.points.iter().map(|(a, b)| a * a + b * b).sum::<f64>() / m as f64;
            assert!((e - 1.0).abs() < 1e-12);
            let sum_re: f64 = q.points.iter().map(|p| p.0).sum();
            assert!(sum_re.abs() < 1e-12);
        }
        assert!(qam_constellation(8).is_err());
        assert!(qam_constellation(1).is_err());
    }

    #[test]
    fn ml_tie_goes_low() {
        let pts = [(-1.0, 0.0), (1.0, 0.0)];
        assert_eq!(ml_detect((0.0, 0.0), &pts), 0);
        assert_eq!(ml_detect((0.3, 0.0), &pts), 1);
    }

    #[test]
    fn noiseless_chain_detects_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = qam_constellation(16).unwrap();
        let modem = AcoModem::new(16).unwrap();
        for _ in 0..200 {
            let (idx, data) = random_frame(&q, 16, &mut rng);
            let f = modem.modulate(&data).unwrap();
            let y = modem.demodulate(&f.time_clipped).unwrap();
            for k in 0..16 {
                assert_eq!(ml_detect(y.get(k), &q.points), idx[k]);
            }
        }
    }

    #[test]
    fn amp_clip_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = qam_constellation(16).unwrap();
        let modem = AcoModem::new(16).unwrap();
        for _ in 0..1000 {
            let (_, data) = random_frame(&q, 16, &mut rng);
            let x = modem.modulate(&data).unwrap().time_clipped;
            assert_eq!(amp_clip(&x, 200.0), x);
            let before = papr(&x).unwrap().db;
            let out = amp_clip(&x, 3.0);
            let after = papr(&out).unwrap().db;
            assert!(after <= before + 1e-12);
            // the clipped mean shrinks, so the bound picks up the power shift
            let shift = 10.0
                * (x.iter().map(|v| v * v).sum::<f64>() / out.iter().map(|v| v * v).sum::<f64>()).log10();
            assert!(after <= 3.0 + shift + 1e-9);
        }
    }

    #[test]
    fn slm_single_candidate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = qam_constellation(16).unwrap();
        let modem = AcoModem::new(16).unwrap();
        let table = SlmTable::new(&SlmConfig { u: 1, seed: 9 }, 16).unwrap();
        let (_, data) = random_frame(&q, 16, &mut rng);
        let (frame, idx) = slm_select(&data, &table, &modem).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(frame, modem.modulate(&data).unwrap());
        assert!(SlmTable::new(&SlmConfig { u: 0, seed: 0 }, 16).is_err());
    }

    #[test]
    fn slm_never_worse_and_stays_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = qam_constellation(16).unwrap();
        let modem = AcoModem::new(16).unwrap();
        let table = SlmTable::new(&SlmConfig { u: 16, seed: 1 }, 16).unwrap();
        for _ in 0..200 {
            let (idx, data) = random_frame(&q, 16, &mut rng);
            // modulate() rejects any imaginary residue ≥ 1e-10
            let (frame, c) = slm_select(&data, &table, &modem).unwrap();
            let orig = papr(&modem.modulate(&data).unwrap().time_clipped).unwrap().linear;
            assert!(papr(&frame.time_clipped).unwrap().linear <= orig);
            let y = table.undo(c, &modem.demodulate(&frame.time_clipped).unwrap());
            for k in 0..16 {
                assert_eq!(ml_detect(y.get(k), &q.points), idx[k]);
            }
        }
    }

    #[test]
    fn high_snr_16qam_ser_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = qam_constellation(16).unwrap();
        let modem = AcoModem::new(16).unwrap();
        let noise = NoiseSpec::from_snr_db(20.0);
        let frames = 1_000_000 / 16;
        let mut errors = 0usize;
        for _ in 0..frames {
            let (idx, data) = random_frame(&q, 16, &mut rng);
            let f = modem.modulate(&data).unwrap();
            let y = modem.demodulate(&channel(&f.time_clipped, &noise, &mut rng)).unwrap();
            errors += (0..16).filter(|&k| ml_detect(y.get(k), &q.points) != idx[k]).count();
        }
        let ser = errors as f64 / (frames * 16) as f64;
        // Es/N0 = 20 dB ⇒ SER ≈ 3·Q(√(3·100/15)) ≈ 2.3e-5
        assert!(ser < 1e-3, "{ser}");
    }
}
