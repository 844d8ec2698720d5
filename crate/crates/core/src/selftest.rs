//! Fast invariant suite behind `oshape selftest`.

use crate::error::Result;
use crate::gradcheck::grad_check_entries_on;
use crate::graph::{Faults, Graph, Var};
use crate::metrics::{eval_papr_ccdf, TxSystem};
use crate::nn::Param;
use crate::ofdm::AcoModem;
use crate::shaping::{gumbel_draw, ShapingModel};
use crate::tensor::{ComplexVector, RealTensor};
use crate::trainer::{build_batch, BatchNoise, FrozenSte, Phase, TrainConfig};
use crate::baselines::qam_constellation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// 99% quantile of χ² with 15 degrees of freedom.
pub const CHI2_99_DF15: f64 = 30.577_914_166_892_5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub tolerance: String,
    pub observed: String,
    pub passed: bool,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} observed {:<28} tolerance {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.observed,
            self.tolerance
        )
    }
}

/// Worst errors over random 16-QAM frames: `|FFT(clip(x))_data − X/2|` and
/// `|x(n) + x(n+2N)|`.
pub fn aco_structure(frames: usize, n_data: usize, seed: u64) -> Result<(f64, f64)> {
    let q = qam_constellation(16)?;
    let modem = AcoModem::new(n_data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut half, mut anti) = (0.0f64, 0.0f64);
    for _ in 0..frames {
        let pairs: Vec<(f64, f64)> = (0..n_data).map(|_| q.points[rng.random_range(0..16)]).collect();
        let data = ComplexVector::from_pairs(&pairs);
        let frame = modem.modulate(&data)?;
        let y = modem.demodulate(&frame.time_clipped)?;
        for (k, &(re, im)) in pairs.iter().enumerate() {
            let (yr, yi) = y.get(k);
            half = half.max((yr - re / 2.0).abs()).max((yi - im / 2.0).abs());
        }
        let x = &frame.time_unclipped;
        let h = 2 * n_data;
        for n in 0..h {
            anti = anti.max((x[n] + x[n + h]).abs());
        }
    }
    Ok((half, anti))
}

/// Max relative error of the phase-2 loss gradient against central
/// differences on `n_params` random entries spread over NN1, NN2 and NN3.
/// Gumbel and channel noise, and the STE hard draws, are held fixed.
pub fn full_chain_grad_check(n_params: usize, frames: usize, seed: u64, faults: Faults) -> Result<f64> {
    let cfg = TrainConfig {
        batch_symbols: frames * 16,
        lambda: 0.01,
        seed,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ShapingModel::init(cfg.m, &mut rng);
    let mut noise = BatchNoise::sample(&cfg, &cfg.noise(), &mut rng);
    {
        let mut g = Graph::new();
        let b = build_batch(&mut g, &model, &cfg, &noise, Phase::Two)?;
        noise.frozen = Some(FrozenSte {
            indices: b.indices.clone(),
            soft: g.value(b.soft).clone(),
        });
    }
    let names: Vec<String> = model.params().map(|p| p.name.clone()).collect();
    let values: Vec<RealTensor> = model.params().map(|p| p.value.clone()).collect();
    let per_net = values.len() / 3;
    let entries: Vec<(usize, usize)> = (0..n_params)
        .map(|i| {
            let net = i % 3;
            let t = net * per_net + rng.random_range(0..per_net);
            (t, rng.random_range(0..values[t].len()))
        })
        .collect();
    let build = |g: &mut Graph, p: &[RealTensor]| -> Result<(Vec<Var>, Var)> {
        let params = names
            .iter()
            .zip(p)
            .map(|(n, v)| Param::new(n.clone(), v.clone()))
            .collect();
        let m = ShapingModel::from_params(cfg.m, params)?;
        let b = build_batch(g, &m, &cfg, &noise, Phase::Two)?;
        Ok((b.bound.all(), b.root))
    };
    grad_check_entries_on(|| Graph::with_faults(faults), build, &values, &entries, 1e-6)
}

/// Pearson statistic of `draws` Gumbel-max samples from a random 16-point
/// distribution.
pub fn gumbel_chi_square(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..16).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    let probs: Vec<f64> = w.iter().map(|x| x / total).collect();
    let mut counts = [0u64; 16];
    for _ in 0..draws {
        counts[gumbel_draw(&probs, 1.0, &mut rng)?.index] += 1;
    }
    Ok(counts
        .iter()
        .zip(&probs)
        .map(|(&c, &p)| {
            let e = p * draws as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum())
}

/// `E[max(soft)]` at each temperature, on shared noise.
pub fn gumbel_sharpness(taus: &[f64], draws: usize, seed: u64) -> Result<Vec<f64>> {
    let probs = vec![1.0 / 16.0; 16];
    taus.iter()
        .map(|&tau| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut acc = 0.0;
            for _ in 0..draws {
                let d = gumbel_draw(&probs, tau, &mut rng)?;
                acc += d.soft.iter().cloned().fold(f64::MIN, f64::max);
            }
            Ok(acc / draws as f64)
        })
        .collect()
}

pub fn run(faults: Faults) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    let grad = full_chain_grad_check(20, 4, 11, faults)?;
    out.push(CheckResult {
        name: "gradient-full-chain",
        tolerance: "rel err < 1e-4".into(),
        observed: format!("{grad:.3e}"),
        passed: grad < 1e-4,
    });

    let (half, anti) = aco_structure(100, 16, 12)?;
    out.push(CheckResult {
        name: "clipping-halving",
        tolerance: "max |Y − X/2| < 1e-9".into(),
        observed: format!("{half:.3e}"),
        passed: half < 1e-9,
    });
    out.push(CheckResult {
        name: "antisymmetry",
        tolerance: "max |x(n)+x(n+2N)| < 1e-10".into(),
        observed: format!("{anti:.3e}"),
        passed: anti < 1e-10,
    });

    let chi = gumbel_chi_square(100_000, 13)?;
    out.push(CheckResult {
        name: "gumbel-chi-square",
        tolerance: format!("chi2 < {CHI2_99_DF15:.3} (df 15, 99%)"),
        observed: format!("{chi:.3}"),
        passed: chi < CHI2_99_DF15,
    });

    let sharp = gumbel_sharpness(&[1.0, 0.1, 0.01], 5000, 14)?;
    out.push(CheckResult {
        name: "gumbel-temperature",
        tolerance: "E[max soft] increasing as tau falls".into(),
        observed: format!("{:.4}/{:.4}/{:.4}", sharp[0], sharp[1], sharp[2]),
        passed: sharp.windows(2).all(|w| w[1] > w[0]),
    });

    let q = qam_constellation(16)?;
    let thresholds: Vec<f64> = (0..=64).map(|i| i as f64 * 0.25).collect();
    let curve = eval_papr_ccdf(&TxSystem::Uniform(&q), 16, 2000, &thresholds, 15, 1)?;
    let worst_rise = curve
        .y
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::MIN, f64::max);
    out.push(CheckResult {
        name: "ccdf-monotone",
        tolerance: "no increase between thresholds".into(),
        observed: format!("max step {worst_rise:.3e}"),
        passed: curve.is_nonincreasing(),
    });
    Ok(out)
}
