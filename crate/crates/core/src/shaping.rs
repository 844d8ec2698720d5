//! Probabilistic and geometric shaping networks.
//!
//! NN1 turns the SNR (dB) into symbol logits, a Gumbel-softmax draw with a
//! straight-through estimator picks transmit symbols, NN2 maps the one-hot
//! alphabet to constellation points, and NN3 demaps received subcarriers to
//! symbol posteriors.

use crate::error::{Error, Result};
use crate::graph::{log_softmax_rows, softmax_rows, Graph, Var};
use crate::nn::{Mlp, NetConfig, Param};
use crate::tensor::RealTensor;
use rand::Rng;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

/// Floor applied to probabilities before taking logs for Gumbel sampling.
pub const PROB_FLOOR: f64 = 1e-30;

static CLAMP_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// Number of probability entries clamped to [`PROB_FLOOR`] so far.
pub fn clamp_warnings() -> u64 {
    CLAMP_WARNINGS.load(Ordering::Relaxed)
}

/// Learned transmit alphabet after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapedConstellation {
    pub points: Vec<(f64, f64)>,
    pub probs: Vec<f64>,
    pub gamma: f64,
}

impl ShapedConstellation {
    pub fn m(&self) -> usize {
        self.points.len()
    }

    pub fn average_energy(&self) -> f64 {
        self.points
            .iter()
            .zip(&self.probs)
            .map(|(&(re, im), p)| p * (re * re + im * im))
            .sum()
    }

    pub fn entropy_bits(&self) -> f64 {
        entropy_nats(&self.probs) / std::f64::consts::LN_2
    }

    /// `index re im prob` rows under a `#` header carrying the entropy.
    pub fn to_table(&self, header: &[String]) -> String {
        let mut out = String::new();
        for h in header {
            let _ = writeln!(out, "# {h}");
        }
        let _ = writeln!(out, "# entropy_bits={}", self.entropy_bits());
        let _ = writeln!(out, "# gamma={}", self.gamma);
        for (i, (&(re, im), p)) in self.points.iter().zip(&self.probs).enumerate() {
            let _ = writeln!(out, "{i} {re} {im} {p}");
        }
        out
    }

    /// Parse a table written by [`ShapedConstellation::to_table`].
    pub fn from_table(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        let mut probs = Vec::new();
        let mut gamma = 1.0;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("gamma=") {
                    gamma = v.parse().map_err(|_| Error::config("gamma", "bad value"))?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::config(format!("line {}", ln + 1), "expected `index re im prob`");
            if f.len() != 4 || f[0].parse::<usize>().ok() != Some(points.len()) {
                return Err(bad());
            }
            let re: f64 = f[1].parse().map_err(|_| bad())?;
            let im: f64 = f[2].parse().map_err(|_| bad())?;
            let p: f64 = f[3].parse().map_err(|_| bad())?;
            points.push((re, im));
            probs.push(p);
        }
        Ok(Self { points, probs, gamma })
    }
}

/// `−Σ p ln p`, skipping zero entries.
pub fn entropy_nats(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Scale `points` so that `Σ p|c|² = 1`.
pub fn normalize(points: &[(f64, f64)], probs: &[f64]) -> Result<ShapedConstellation> {
    if points.len() != probs.len() {
        return Err(Error::Dimension(format!(
            "{} points but {} probabilities",
            points.len(),
            probs.len()
        )));
    }
    let energy: f64 = points
        .iter()
        .zip(probs)
        .map(|(&(re, im), p)| p * (re * re + im * im))
        .sum();
    if !(energy > 0.0) || !energy.is_finite() {
        return Err(Error::Degenerate(format!("average energy {energy}")));
    }
    let gamma = energy.powf(-0.5);
    Ok(ShapedConstellation {
        points: points.iter().map(|&(re, im)| (gamma * re, gamma * im)).collect(),
        probs: probs.to_vec(),
        gamma,
    })
}

/// One categorical draw with its relaxation.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolDraw {
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
    pub index: usize,
}

/// Standard Gumbel samples `−ln(−ln u)`, `u ~ U(0,1)`.
pub fn gumbel_noise(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len)
        .map(|_| {
            // open interval: reject the (measure-zero) endpoint 0
            let mut u: f64 = rng.random();
            while u <= 0.0 {
                u = rng.random();
            }
            -(-u.ln()).ln()
        })
        .collect()
}

fn clamped_log(probs: &[f64]) -> Vec<f64> {
    probs
        .iter()
        .map(|&p| {
            if p < PROB_FLOOR {
                CLAMP_WARNINGS.fetch_add(1, Ordering::Relaxed);
                PROB_FLOOR.ln()
            } else {
                p.ln()
            }
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gumbel-max index with its temperature-`tau` softmax relaxation.
pub fn gumbel_draw(probs: &[f64], tau: f64, rng: &mut impl Rng) -> Result<SymbolDraw> {
    if !(tau > 0.0) {
        return Err(Error::config("tau", "temperature must be positive"));
    }
    let g = gumbel_noise(probs.len(), rng);
    Ok(draw_from_noise(&clamped_log(probs), &g, tau))
}

fn draw_from_noise(log_probs: &[f64], g: &[f64], tau: f64) -> SymbolDraw {
    let perturbed: Vec<f64> = log_probs.iter().zip(g).map(|(l, gi)| l + gi).collect();
    let index = argmax(&perturbed);
    let scaled = RealTensor::new(
        vec![1, perturbed.len()],
        perturbed.iter().map(|v| v / tau).collect(),
    )
    .expect("row");
    let soft = softmax_rows(&scaled).into_data();
    let mut hard = vec![0.0; perturbed.len()];
    hard[index] = 1.0;
    SymbolDraw { hard, soft, index }
}

/// Value the straight-through estimator forwards: the hard one-hot vector.
pub fn ste_combine(draw: &SymbolDraw) -> Vec<f64> {
    draw.hard.clone()
}

/// Draw indices for a batch given the `B×M` Gumbel noise.
pub fn hard_indices(log_probs: &[f64], gumbel: &RealTensor) -> Vec<usize> {
    let m = log_probs.len();
    gumbel
        .data()
        .chunks_exact(m)
        .map(|g| {
            let row: Vec<f64> = log_probs.iter().zip(g).map(|(l, gi)| l + gi).collect();
            argmax(&row)
        })
        .collect()
}

pub fn one_hot(indices: &[usize], m: usize) -> RealTensor {
    let mut t = RealTensor::zeros(&[indices.len(), m]);
    for (r, &i) in indices.iter().enumerate() {
        t.data_mut()[r * m + i] = 1.0;
    }
    t
}

/// The three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapingModel {
    pub cfg: NetConfig,
    pub nn1: Mlp,
    pub nn2: Mlp,
    pub nn3: Mlp,
}

/// Graph handles for a bound [`ShapingModel`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub nn1: Vec<Var>,
    pub nn2: Vec<Var>,
    pub nn3: Vec<Var>,
}

impl BoundModel {
    pub fn all(&self) -> Vec<Var> {
        self.nn1.iter().chain(&self.nn2).chain(&self.nn3).copied().collect()
    }
}

impl ShapingModel {
    pub fn init(m: usize, rng: &mut impl Rng) -> Self {
        let cfg = NetConfig::new(m);
        Self {
            cfg,
            nn1: Mlp::init("nn1", &cfg.nn1_widths(), rng),
            nn2: Mlp::init("nn2", &cfg.nn2_widths(), rng),
            nn3: Mlp::init("nn3", &cfg.nn3_widths(), rng),
        }
    }

    pub fn m(&self) -> usize {
        self.cfg.m
    }

    /// Build from named tensors (`nn1.*`, `nn2.*`, `nn3.*` in layer order),
    /// checking the widths against the alphabet size.
    pub fn from_params(m: usize, params: Vec<Param>) -> Result<Self> {
        let cfg = NetConfig::new(m);
        let mut groups: [Vec<Param>; 3] = Default::default();
        for p in params {
            let slot = match p.name.split('.').next() {
                Some("nn1") => 0,
                Some("nn2") => 1,
                Some("nn3") => 2,
                _ => {
                    return Err(Error::Dimension(format!("unexpected tensor {}", p.name)));
                }
            };
            groups[slot].push(p);
        }
        let [g1, g2, g3] = groups;
        let nn1 = Mlp::from_params(g1)?;
        let nn2 = Mlp::from_params(g2)?;
        let nn3 = Mlp::from_params(g3)?;
        for (net, want) in [
            (&nn1, cfg.nn1_widths()),
            (&nn2, cfg.nn2_widths()),
            (&nn3, cfg.nn3_widths()),
        ] {
            if net.widths() != want {
                return Err(Error::Dimension(format!(
                    "network widths {:?}, expected {:?}",
                    net.widths(),
                    want
                )));
            }
        }
        Ok(Self { cfg, nn1, nn2, nn3 })
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.nn1.params.iter().chain(&self.nn2.params).chain(&self.nn3.params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.nn1
            .params
            .iter_mut()
            .chain(self.nn2.params.iter_mut())
            .chain(self.nn3.params.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.nn1.param_count() + self.nn2.param_count() + self.nn3.param_count()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            nn1: self.nn1.bind(g),
            nn2: self.nn2.bind(g),
            nn3: self.nn3.bind(g),
        }
    }

    /// `log p_θP` from NN1 at `snr_db`, shape `1×M`.
    pub fn log_probs(&self, snr_db: f64) -> Result<Vec<f64>> {
        let logits = self.nn1.infer(&RealTensor::new(vec![1, 1], vec![snr_db])?)?;
        Ok(log_softmax_rows(&logits).into_data())
    }

    /// `p_θP = softmax(NN1(snr_db))`.
    pub fn nn1_distribution(&self, snr_db: f64) -> Result<Vec<f64>> {
        let logits = self.nn1.infer(&RealTensor::new(vec![1, 1], vec![snr_db])?)?;
        Ok(softmax_rows(&logits).into_data())
    }

    /// Unnormalized points: NN2 applied to every one-hot vector.
    pub fn nn2_constellation(&self) -> Result<Vec<(f64, f64)>> {
        let out = self.nn2.infer(&RealTensor::identity(self.m()))?;
        Ok(out.data().chunks_exact(2).map(|c| (c[0], c[1])).collect())
    }

    pub fn constellation(&self, snr_db: f64) -> Result<ShapedConstellation> {
        normalize(&self.nn2_constellation()?, &self.nn1_distribution(snr_db)?)
    }

    /// NN3 posteriors for `K×2` received (Re, Im) pairs; rows sum to 1.
    pub fn nn3_demap(&self, y_sub: &RealTensor) -> Result<RealTensor> {
        Ok(softmax_rows(&self.nn3.infer(y_sub)?))
    }

    /// NN3 log-posteriors for `K×2` received pairs.
    pub fn nn3_log_posteriors(&self, y_sub: &RealTensor) -> Result<RealTensor> {
        Ok(log_softmax_rows(&self.nn3.infer(y_sub)?))
    }
}

/// Graph form of NN1: `(log p, p)`, both `1×M`.
pub fn nn1_graph(g: &mut Graph, nn1: &[Var], snr_db: f64) -> Result<(Var, Var)> {
    let x = g.constant(RealTensor::new(vec![1, 1], vec![snr_db])?);
    let logits = Mlp::forward(g, nn1, x)?;
    let logp = g.log_softmax(logits);
    let p = g.exp(logp);
    Ok((logp, p))
}

/// Graph form of the Gumbel-softmax relaxation `softmax((log p + G)/τ)`.
pub fn gumbel_soft_graph(g: &mut Graph, logp: Var, gumbel: &RealTensor, tau: f64) -> Result<Var> {
    let rows = gumbel.dims2().0;
    let lp = g.broadcast_rows(logp, rows)?;
    let perturbed = g.add_const(lp, gumbel)?;
    let scaled = g.scale(perturbed, 1.0 / tau);
    Ok(g.softmax(scaled))
}

/// Graph form of the normalization: returns `γ` as a 1-element node.
pub fn gamma_graph(g: &mut Graph, points: Var, probs: Var) -> Result<Var> {
    let m = g.value(points).dims2().0;
    let sq = g.mul(points, points)?;
    let energy = g.sum_cols(sq);
    let p = g.reshape(probs, &[m])?;
    let weighted = g.mul(energy, p)?;
    let avg = g.sum(weighted);
    let e = g.scalar(avg);
    if !(e > 0.0) || !e.is_finite() {
        return Err(Error::Degenerate(format!("average energy {e}")));
    }
    Ok(g.powf(avg, -0.5))
}
