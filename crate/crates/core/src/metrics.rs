//! Monte-Carlo evaluation: MI lower bound, SER and PAPR CCDF.
//!
//! Every frame draws from its own ChaCha stream keyed by `(seed, frame)`,
//! and per-frame results are reduced in frame order, so estimates do not
//! depend on the worker count.

use crate::baselines::{amp_clip, ml_detect, slm_select, SlmTable, UniformQam};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::ofdm::{channel, papr, AcoModem, NoiseSpec};
use crate::shaping::{entropy_nats, ShapedConstellation, ShapingModel};
use crate::tensor::{ComplexVector, RealTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::LN_2;
use std::fmt::Write as _;

/// Frames per NN3 inference call.
const CHUNK: usize = 64;

/// An `(x, y)` series with its sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricCurve {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub n_samples: Vec<u64>,
    /// Integer numerators when `y` is a ratio of counts.
    pub counts: Option<Vec<u64>>,
    pub seed: u64,
}

impl MetricCurve {
    pub fn new(label: impl Into<String>, seed: u64) -> Self {
        Self {
            label: label.into(),
            x: Vec::new(),
            y: Vec::new(),
            n_samples: Vec::new(),
            counts: None,
            seed,
        }
    }

    pub fn from_counts(label: impl Into<String>, x: Vec<f64>, counts: Vec<u64>, n: Vec<u64>) -> Self {
        let y = counts.iter().zip(&n).map(|(&c, &n)| c as f64 / n as f64).collect();
        Self {
            label: label.into(),
            x,
            y,
            n_samples: n,
            counts: Some(counts),
            seed: 0,
        }
    }

    pub fn push(&mut self, x: f64, y: f64, n: u64) {
        self.x.push(x);
        self.y.push(y);
        self.n_samples.push(n);
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_nonincreasing(&self) -> bool {
        self.y.windows(2).all(|w| w[1] <= w[0])
    }

    /// CSV with columns `x_name,y_name,n_name,seed`, preceded by `#` lines.
    pub fn to_csv(&self, columns: [&str; 3], comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            let _ = writeln!(out, "# {c}");
        }
        let _ = writeln!(out, "{},{},{},seed", columns[0], columns[1], columns[2]);
        for ((x, y), n) in self.x.iter().zip(&self.y).zip(&self.n_samples) {
            let _ = writeln!(out, "{x},{y},{n},{}", self.seed);
        }
        out
    }
}

pub const MI_COLUMNS: [&str; 3] = ["snr_db", "mi_bits", "n_symbols"];
pub const SER_COLUMNS: [&str; 3] = ["snr_db", "ser", "n_symbols"];
pub const CCDF_COLUMNS: [&str; 3] = ["papr0_db", "ccdf", "n_frames"];

/// Transmitter under evaluation.
#[derive(Debug, Clone)]
pub enum TxSystem<'a> {
    /// Learned alphabet drawn with its learned probabilities.
    Shaped(ShapedConstellation),
    /// Square QAM, uniform probabilities.
    Uniform(&'a UniformQam),
    /// Square QAM followed by amplitude clipping at `cr_db`.
    Clip { qam: &'a UniformQam, cr_db: f64 },
    /// Square QAM with SLM over the given candidate table.
    Slm { qam: &'a UniformQam, table: &'a SlmTable },
}

impl TxSystem<'_> {
    pub fn shaped(model: &ShapingModel, snr_db: f64) -> Result<TxSystem<'static>> {
        Ok(TxSystem::Shaped(model.constellation(snr_db)?))
    }

    fn points(&self) -> &[(f64, f64)] {
        match self {
            TxSystem::Shaped(c) => &c.points,
            TxSystem::Uniform(q) | TxSystem::Clip { qam: q, .. } | TxSystem::Slm { qam: q, .. } => &q.points,
        }
    }

    fn probs(&self) -> &[f64] {
        match self {
            TxSystem::Shaped(c) => &c.probs,
            TxSystem::Uniform(q) | TxSystem::Clip { qam: q, .. } | TxSystem::Slm { qam: q, .. } => &q.probs,
        }
    }

    pub fn entropy_bits(&self) -> f64 {
        entropy_nats(self.probs()) / LN_2
    }
}

struct TxFrame {
    indices: Vec<usize>,
    signal: Vec<f64>,
    slm_index: Option<usize>,
}

fn sample_index(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn cumulative(probs: &[f64]) -> Vec<f64> {
    probs
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect()
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    rng
}

fn transmit(sys: &TxSystem, cdf: &[f64], modem: &AcoModem, rng: &mut ChaCha8Rng) -> Result<TxFrame> {
    let n = modem.n_data();
    let points = sys.points();
    let indices: Vec<usize> = (0..n).map(|_| sample_index(cdf, rng)).collect();
    let data = ComplexVector::from_pairs(&indices.iter().map(|&i| points[i]).collect::<Vec<_>>());
    let (signal, slm_index) = match sys {
        TxSystem::Shaped(_) | TxSystem::Uniform(_) => (modem.modulate(&data)?.time_clipped, None),
        TxSystem::Clip { cr_db, .. } => (amp_clip(&modem.modulate(&data)?.time_clipped, *cr_db), None),
        TxSystem::Slm { table, .. } => {
            let (frame, c) = slm_select(&data, table, modem)?;
            (frame.time_clipped, Some(c))
        }
    };
    Ok(TxFrame {
        indices,
        signal,
        slm_index,
    })
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    Ok(pool.install(f))
}

/// Received data subcarriers of one chunk of frames plus what was sent.
struct ChunkRx {
    indices: Vec<usize>,
    pairs: Vec<f64>,
}

fn run_chunk(
    sys: &TxSystem,
    cdf: &[f64],
    modem: &AcoModem,
    noise: &NoiseSpec,
    seed: u64,
    frames: std::ops::Range<usize>,
) -> Result<ChunkRx> {
    let mut indices = Vec::new();
    let mut pairs = Vec::new();
    for f in frames {
        let mut rng = frame_rng(seed, f);
        let tx = transmit(sys, cdf, modem, &mut rng)?;
        let y = channel(&tx.signal, noise, &mut rng);
        let mut rx = modem.demodulate(&y)?;
        if let (TxSystem::Slm { table, .. }, Some(c)) = (sys, tx.slm_index) {
            rx = table.undo(c, &rx);
        }
        indices.extend(tx.indices);
        pairs.extend(rx.to_interleaved());
    }
    Ok(ChunkRx { indices, pairs })
}

fn chunked<T: Send>(
    n_frames: usize,
    threads: usize,
    work: impl Fn(std::ops::Range<usize>) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let chunks: Vec<std::ops::Range<usize>> = (0..n_frames)
        .step_by(CHUNK)
        .map(|s| s..(s + CHUNK).min(n_frames))
        .collect();
    with_pool(threads, || chunks.into_par_iter().map(&work).collect::<Result<Vec<T>>>())?
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimate {
    /// `H − CE` in bits per symbol.
    pub bits: f64,
    pub entropy_bits: f64,
    pub n_symbols: u64,
}

/// MI lower bound `H(p) − E[−log₂ p̃(s|Ỹ)]` of `sys` decoded by `demapper`.
pub fn eval_mi_with(
    sys: &TxSystem,
    demapper: &Mlp,
    n_data: usize,
    snr_db: f64,
    n_frames: usize,
    seed: u64,
    threads: usize,
) -> Result<MiEstimate> {
    if n_frames == 0 {
        return Err(Error::EmptySamples);
    }
    let modem = AcoModem::new(n_data)?;
    let noise = NoiseSpec::from_snr_db(snr_db);
    let cdf = cumulative(sys.probs());
    let per_chunk = chunked(n_frames, threads, |range| {
        let rx = run_chunk(sys, &cdf, &modem, &noise, seed, range)?;
        let k = rx.indices.len();
        let logits = demapper.infer(&RealTensor::new(vec![k, 2], rx.pairs)?)?;
        let lp = crate::graph::log_softmax_rows(&logits);
        Ok(rx
            .indices
            .iter()
            .enumerate()
            .map(|(r, &i)| -lp.get2(r, i))
            .sum::<f64>())
    })?;
    let n_symbols = (n_frames * n_data) as u64;
    let ce_bits = per_chunk.iter().sum::<f64>() / n_symbols as f64 / LN_2;
    let entropy_bits = sys.entropy_bits();
    Ok(MiEstimate {
        bits: entropy_bits - ce_bits,
        entropy_bits,
        n_symbols,
    })
}

/// MI of a trained model at `snr_db` using its own NN3.
pub fn eval_mi(
    model: &ShapingModel,
    n_data: usize,
    snr_db: f64,
    n_frames: usize,
    seed: u64,
    threads: usize,
) -> Result<MiEstimate> {
    let sys = TxSystem::shaped(model, snr_db)?;
    eval_mi_with(&sys, &model.nn3, n_data, snr_db, n_frames, seed, threads)
}

/// MI of `sys` under the exact Gaussian posterior, `H − E[−log₂ p(s|y)]`
/// with `p(s|y) ∝ p_s exp(−|2y − c_s|²/4σ²)`. Reference for the learned
/// demappers; needs `σ² > 0`.
pub fn eval_mi_exact(
    sys: &TxSystem,
    n_data: usize,
    noise: &NoiseSpec,
    n_frames: usize,
    seed: u64,
    threads: usize,
) -> Result<MiEstimate> {
    if n_frames == 0 {
        return Err(Error::EmptySamples);
    }
    if !(noise.sigma2 > 0.0) {
        return Err(Error::config("snr_db", "exact posterior needs a noisy channel"));
    }
    let modem = AcoModem::new(n_data)?;
    let cdf = cumulative(sys.probs());
    let points = sys.points();
    let log_prior: Vec<f64> = sys.probs().iter().map(|p| p.ln()).collect();
    let denom = 4.0 * noise.sigma2;
    let per_chunk = chunked(n_frames, threads, |range| {
        let rx = run_chunk(sys, &cdf, &modem, noise, seed, range)?;
        let mut acc = 0.0;
        let mut scores = vec![0.0; points.len()];
        for (pair, &sent) in rx.pairs.chunks_exact(2).zip(&rx.indices) {
            let (yr, yi) = (2.0 * pair[0], 2.0 * pair[1]);
            for (sc, (&(re, im), lp)) in scores.iter_mut().zip(points.iter().zip(&log_prior)) {
                *sc = lp - ((yr - re).powi(2) + (yi - im).powi(2)) / denom;
            }
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + scores.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
            acc += lse - scores[sent];
        }
        Ok(acc)
    })?;
    let n_symbols = (n_frames * n_data) as u64;
    let ce_bits = per_chunk.iter().sum::<f64>() / n_symbols as f64 / LN_2;
    let entropy_bits = sys.entropy_bits();
    Ok(MiEstimate {
        bits: entropy_bits - ce_bits,
        entropy_bits,
        n_symbols,
    })
}

/// Symbol decision rule.
#[derive(Debug, Clone, Copy)]
pub enum Detector<'a> {
    /// Argmax of NN3 posteriors.
    Demapper(&'a Mlp),
    /// Minimum distance on the ×2-descaled subcarrier.
    MinDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SerEstimate {
    pub errors: u64,
    pub n_symbols: u64,
}

impl SerEstimate {
    pub fn ser(&self) -> f64 {
        self.errors as f64 / self.n_symbols as f64
    }

    /// Normal-approximation binomial standard error.
    pub fn std_err(&self) -> f64 {
        let p = self.ser();
        (p * (1.0 - p) / self.n_symbols as f64).sqrt()
    }
}

/// SER over at least `n_symbols` (rounded up to whole frames).
pub fn eval_ser(
    sys: &TxSystem,
    detector: Detector,
    n_data: usize,
    noise: &NoiseSpec,
    n_symbols: usize,
    seed: u64,
    threads: usize,
) -> Result<SerEstimate> {
    let n_frames = n_symbols.div_ceil(n_data).max(1);
    let modem = AcoModem::new(n_data)?;
    let cdf = cumulative(sys.probs());
    let points = sys.points();
    let per_chunk = chunked(n_frames, threads, |range| {
        let rx = run_chunk(sys, &cdf, &modem, noise, seed, range)?;
        let decided: Vec<usize> = match detector {
            Detector::MinDistance => rx
                .pairs
                .chunks_exact(2)
                .map(|p| ml_detect((p[0], p[1]), points))
                .collect(),
            Detector::Demapper(nn3) => {
                let k = rx.indices.len();
                let logits = nn3.infer(&RealTensor::new(vec![k, 2], rx.pairs)?)?;
                (0..k)
                    .map(|r| {
                        let row = logits.row(r);
                        let mut best = 0;
                        for (i, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = i;
                            }
                        }
                        best
                    })
                    .collect()
            }
        };
        Ok(decided.iter().zip(&rx.indices).filter(|(a, b)| a != b).count() as u64)
    })?;
    Ok(SerEstimate {
        errors: per_chunk.iter().sum(),
        n_symbols: (n_frames * n_data) as u64,
    })
}

/// Per-frame PAPR (dB) of the transmitted signal.
pub fn eval_papr(sys: &TxSystem, n_data: usize, n_frames: usize, seed: u64, threads: usize) -> Result<Vec<f64>> {
    let modem = AcoModem::new(n_data)?;
    let cdf = cumulative(sys.probs());
    let per_chunk = chunked(n_frames, threads, |range| {
        range
            .map(|f| {
                let mut rng = frame_rng(seed, f);
                let tx = transmit(sys, &cdf, &modem, &mut rng)?;
                Ok(papr(&tx.signal)?.db)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(per_chunk.into_iter().flatten().collect())
}

pub fn eval_papr_ccdf(
    sys: &TxSystem,
    n_data: usize,
    n_frames: usize,
    thresholds_db: &[f64],
    seed: u64,
    threads: usize,
) -> Result<MetricCurve> {
    let paprs = eval_papr(sys, n_data, n_frames, seed, threads)?;
    Ok(crate::ofdm::ccdf(&paprs, thresholds_db)?.with_seed(seed))
}

/// Empirical `(1 − prob)` quantile: the PAPR₀ at which the CCDF reaches
/// `prob`.
pub fn papr_at_ccdf(paprs_db: &[f64], prob: f64) -> Result<f64> {
    if paprs_db.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut s = paprs_db.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let above = ((prob * n as f64).floor() as usize).min(n - 1);
    Ok(s[n - 1 - above])
}

/// Learned points and probabilities for plotting.
pub fn export_constellation(model: &ShapingModel, snr_db: f64) -> Result<ShapedConstellation> {
    model.constellation(snr_db)
}

/// Parse a `start:stop:step` grid (inclusive), e.g. `0:20:2`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::config("grid", format!("`{spec}` is not start:stop:step or a comma list"));
    if parts.len() == 1 {
        return spec
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect();
    }
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0) || stop < start {
        return Err(bad());
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}
