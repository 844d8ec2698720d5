//! Composite loss and two-phase training.
//!
//! Phase 1 minimizes `CE − H` (the negated MI lower bound). Phase 2 starts
//! from the phase-1 weights and adds `λ · mean PAPR` of the clipped frames.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Mlp, NetConfig, Param};
use crate::ofdm::{demodulate_graph, gaussian_noise, modulate_graph, NoiseSpec};
use crate::optim::Adam;
use crate::shaping::{gamma_graph, gumbel_noise, gumbel_soft_graph, hard_indices, nn1_graph, one_hot, BoundModel, ShapingModel};
use crate::tensor::RealTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub m: usize,
    pub n_data: usize,
    pub snr_db: f64,
    pub lambda: f64,
    pub tau: f64,
    pub batch_symbols: usize,
    pub steps_phase1: usize,
    pub steps_phase2: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: 16,
            n_data: 16,
            snr_db: 10.0,
            lambda: 0.01,
            tau: 1.0,
            // 188 whole frames of 16 symbols
            batch_symbols: 3008,
            steps_phase1: 150 * 30,
            steps_phase2: 150 * 30,
            lr: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::config("m", "need at least two symbols"));
        }
        if self.n_data == 0 || !self.n_data.is_power_of_two() {
            return Err(Error::config("n_data", "must be a positive power of two"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be ≥ 0"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", "must be > 0"));
        }
        if self.batch_symbols == 0 || !self.batch_symbols.is_multiple_of(self.n_data) {
            return Err(Error::config(
                "batch_symbols",
                format!("must be a positive multiple of n_data={}", self.n_data),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be > 0"));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::config("snr_db", "must be finite"));
        }
        Ok(())
    }

    pub fn frames_per_batch(&self) -> usize {
        self.batch_symbols / self.n_data
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec::from_snr_db(self.snr_db)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    One = 1,
    Two = 2,
}

/// Loss components in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub entropy: f64,
    /// Batch-mean PAPR of the clipped frames, linear.
    pub papr_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `H − CE`, the MI lower bound in nats.
    pub fn mi_estimate(&self) -> f64 {
        self.entropy - self.cross_entropy
    }

    pub fn mi_bits(&self) -> f64 {
        self.mi_estimate() / LN_2
    }

    pub fn papr_db(&self) -> f64 {
        10.0 * self.papr_term.log10()
    }
}

/// STE values reused across perturbed evaluations of a finite-difference
/// check. With these set, the relaxed sample enters the forward pass as
/// `hard + soft − soft₀`, whose true derivative is the STE adjoint.
#[derive(Debug, Clone)]
pub struct FrozenSte {
    pub indices: Vec<usize>,
    pub soft: RealTensor,
}

/// Randomness consumed by one training batch.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    /// `B×M` standard Gumbel samples.
    pub gumbel: RealTensor,
    /// `F×4N` channel noise.
    pub channel: RealTensor,
    pub frozen: Option<FrozenSte>,
}

impl BatchNoise {
    pub fn sample(cfg: &TrainConfig, noise: &NoiseSpec, rng: &mut impl Rng) -> Self {
        let b = cfg.batch_symbols;
        let f = cfg.frames_per_batch();
        let l = 4 * cfg.n_data;
        let gumbel = RealTensor::new(vec![b, cfg.m], gumbel_noise(b * cfg.m, rng)).expect("shape");
        let channel = RealTensor::new(vec![f, l], gaussian_noise(f * l, noise, rng)).expect("shape");
        Self {
            gumbel,
            channel,
            frozen: None,
        }
    }
}

/// A built batch graph.
#[derive(Debug)]
pub struct BatchGraph {
    pub root: Var,
    pub bound: BoundModel,
    pub breakdown: LossBreakdown,
    pub indices: Vec<usize>,
    pub soft: Var,
    pub clipped: Var,
}

/// Build the full differentiable chain for one batch on `g`.
pub fn build_batch(
    g: &mut Graph,
    model: &ShapingModel,
    cfg: &TrainConfig,
    noise: &BatchNoise,
    phase: Phase,
) -> Result<BatchGraph> {
    let m = cfg.m;
    let b = cfg.batch_symbols;
    let f = cfg.frames_per_batch();
    let bound = model.bind(g);

    let (logp, probs) = nn1_graph(g, &bound.nn1, cfg.snr_db)?;
    let soft = gumbel_soft_graph(g, logp, &noise.gumbel, cfg.tau)?;
    let (indices, ste) = match &noise.frozen {
        Some(frozen) => {
            let hard = one_hot(&frozen.indices, m);
            let offset = RealTensor::new(
                vec![b, m],
                hard.data().iter().zip(frozen.soft.data()).map(|(h, s)| h - s).collect(),
            )?;
            (frozen.indices.clone(), g.add_const(soft, &offset)?)
        }
        None => {
            let idx = hard_indices(g.value(logp).data(), &noise.gumbel);
            let hard = one_hot(&idx, m);
            (idx, g.straight_through(soft, hard)?)
        }
    };

    let eye = g.constant(RealTensor::identity(m));
    let table = Mlp::forward(g, &bound.nn2, eye)?;
    let gamma = gamma_graph(g, table, probs)?;
    let raw = g.matmul(ste, table)?;
    let scaled = g.mul_scalar(raw, gamma)?;
    let symbols = g.reshape(scaled, &[f, 2 * cfg.n_data])?;

    let (_, clipped) = modulate_graph(g, symbols)?;
    let received = g.add_const(clipped, &noise.channel)?;
    let rx = demodulate_graph(g, received)?;
    let rx_pairs = g.reshape(rx, &[b, 2])?;

    let logits = Mlp::forward(g, &bound.nn3, rx_pairs)?;
    let log_post = g.log_softmax(logits);
    let picked = g.pick_rows(log_post, indices.clone())?;
    let mean_lp = g.mean(picked);
    let ce = g.scale(mean_lp, -1.0);

    let plogp = g.mul(probs, logp)?;
    let neg_h = g.sum(plogp);
    let l1 = g.add(ce, neg_h)?;

    let paprs = g.papr_rows(clipped)?;
    let papr_mean = g.mean(paprs);

    let root = if phase == Phase::Two && cfg.lambda > 0.0 {
        let pen = g.scale(papr_mean, cfg.lambda);
        g.add(l1, pen)?
    } else {
        l1
    };

    let breakdown = LossBreakdown {
        cross_entropy: g.scalar(ce),
        entropy: -g.scalar(neg_h),
        papr_term: g.scalar(papr_mean),
        total: g.scalar(root),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            what: "batch loss".into(),
        });
    }
    Ok(BatchGraph {
        root,
        bound,
        breakdown,
        indices,
        soft,
        clipped,
    })
}

/// Sample a batch and evaluate its loss.
pub fn forward_batch(
    model: &ShapingModel,
    cfg: &TrainConfig,
    phase: Phase,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let noise = BatchNoise::sample(cfg, &cfg.noise(), rng);
    let mut g = Graph::new();
    Ok(build_batch(&mut g, model, cfg, &noise, phase)?.breakdown)
}

/// Seed of the fixed replay batch stored alongside checkpoints.
pub fn replay_seed(cfg: &TrainConfig) -> u64 {
    cfg.seed ^ 0x005e_ed0f_7e57
}

/// Phase-2 loss on the deterministic replay batch.
pub fn replay_loss(model: &ShapingModel, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut rng = ChaCha8Rng::seed_from_u64(replay_seed(cfg));
    forward_batch(model, cfg, Phase::Two, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub phase: Phase,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub cfg: TrainConfig,
    pub model: ShapingModel,
    pub trace: Vec<TraceRow>,
    pub final_loss: LossBreakdown,
}

/// Consecutive over-threshold steps tolerated before aborting.
pub const DIVERGENCE_PATIENCE: usize = 100;

struct DivergenceGuard {
    initial: Option<f64>,
    run: usize,
}

impl DivergenceGuard {
    fn new() -> Self {
        Self { initial: None, run: 0 }
    }

    // CE and the weighted PAPR are both positive, so the ratio test is
    // meaningful even though the total (≈ −MI) changes sign.
    fn check(&mut self, step: usize, phase: Phase, loss: &LossBreakdown, lambda: f64) -> Result<()> {
        let value = loss.cross_entropy + if phase == Phase::Two { lambda * loss.papr_term } else { 0.0 };
        let initial = *self.initial.get_or_insert(value);
        if value > 10.0 * initial {
            self.run += 1;
            if self.run >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step,
                    phase: phase as u8,
                    loss: value,
                    initial,
                });
            }
        } else {
            self.run = 0;
        }
        Ok(())
    }
}

fn gather_grads(model: &ShapingModel, bound: &BoundModel, grads: &mut crate::graph::Gradients) -> Vec<RealTensor> {
    model
        .params()
        .zip(bound.all())
        .map(|(p, v)| grads.take(v).unwrap_or_else(|| RealTensor::zeros(p.value.shape())))
        .collect()
}

/// Train both phases, reporting each step to `observe`.
pub fn train_two_phase_with(
    cfg: &TrainConfig,
    mut observe: impl FnMut(&TraceRow),
) -> Result<TrainRun> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ShapingModel::init(cfg.m, &mut rng);
    let noise_spec = cfg.noise();
    let mut opt = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps_phase1 + cfg.steps_phase2);
    let mut last = None;
    let mut step = 0;
    for (phase, steps) in [(Phase::One, cfg.steps_phase1), (Phase::Two, cfg.steps_phase2)] {
        let mut guard = DivergenceGuard::new();
        for _ in 0..steps {
            let noise = BatchNoise::sample(cfg, &noise_spec, &mut rng);
            let mut g = Graph::new();
            // numeric breakdowns mid-training surface as non-finite losses
            let batch = build_batch(&mut g, &model, cfg, &noise, phase).map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite { step, what },
                Error::Degenerate(what) => Error::NonFinite { step, what },
                Error::UndefinedPapr => Error::NonFinite {
                    step,
                    what: "all-zero frame".into(),
                },
                other => other,
            })?;
            guard.check(step, phase, &batch.breakdown, cfg.lambda)?;
            let mut grads = g.backward(batch.root)?;
            let grad_list = gather_grads(&model, &batch.bound, &mut grads);
            let mut params: Vec<Param> = model.params().cloned().collect();
            opt.step(&mut params, &grad_list, step)?;
            for (dst, src) in model.params_mut().zip(params) {
                *dst = src;
            }
            let row = TraceRow {
                step,
                phase,
                loss: batch.breakdown,
            };
            observe(&row);
            trace.push(row);
            last = Some(batch.breakdown);
            step += 1;
        }
    }
    let final_loss = match last {
        Some(l) => l,
        None => forward_batch(&model, cfg, Phase::Two, &mut rng)?,
    };
    Ok(TrainRun {
        cfg: cfg.clone(),
        model,
        trace,
        final_loss,
    })
}

pub fn train_two_phase(cfg: &TrainConfig) -> Result<TrainRun> {
    train_two_phase_with(cfg, |_| {})
}

/// `step,phase,cross_entropy,entropy,papr_db,total` rows.
pub fn trace_csv(trace: &[TraceRow], header_comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = header_comment {
        let _ = writeln!(out, "# {c}");
    }
    out.push_str("step,phase,cross_entropy,entropy,papr_db,total\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            r.phase as u8,
            r.loss.cross_entropy,
            r.loss.entropy,
            r.loss.papr_db(),
            r.loss.total
        );
    }
    out
}

/// Settings for training a stand-alone NN3 on a fixed alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct DemapperConfig {
    pub n_data: usize,
    pub snr_db: f64,
    pub batch_symbols: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Train an NN3 detector for a fixed, uniformly used constellation with
/// the same ACO chain and cross-entropy objective.
pub fn train_demapper(points: &[(f64, f64)], cfg: &DemapperConfig) -> Result<Mlp> {
    let m = points.len();
    if cfg.batch_symbols == 0 || !cfg.batch_symbols.is_multiple_of(cfg.n_data) {
        return Err(Error::config("batch_symbols", "must be a multiple of n_data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = NetConfig::new(m);
    let mut nn3 = Mlp::init("nn3", &net.nn3_widths(), &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let noise = NoiseSpec::from_snr_db(cfg.snr_db);
    let b = cfg.batch_symbols;
    let f = b / cfg.n_data;
    let l = 4 * cfg.n_data;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
        let sym: Vec<f64> = idx.iter().flat_map(|&i| [points[i].0, points[i].1]).collect();
        let z = gaussian_noise(f * l, &noise, &mut rng);
        let mut g = Graph::new();
        let s = g.constant(RealTensor::new(vec![f, 2 * cfg.n_data], sym)?);
        let (_, clipped) = modulate_graph(&mut g, s)?;
        let y = g.add_const(clipped, &RealTensor::new(vec![f, l], z)?)?;
        let rx = demodulate_graph(&mut g, y)?;
        let pairs = g.reshape(rx, &[b, 2])?;
        let vars = nn3.bind(&mut g);
        let logits = Mlp::forward(&mut g, &vars, pairs)?;
        let lp = g.log_softmax(logits);
        let picked = g.pick_rows(lp, idx)?;
        let mean = g.mean(picked);
        let loss = g.scale(mean, -1.0);
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "demapper loss".into(),
            });
        }
        let mut grads = g.backward(loss)?;
        let gl: Vec<RealTensor> = nn3
            .params
            .iter()
            .zip(&vars)
            .map(|(p, &v)| grads.take(v).unwrap_or_else(|| RealTensor::zeros(p.value.shape())))
            .collect();
        opt.step(&mut nn3.params, &gl, step)?;
    }
    Ok(nn3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            m: 16,
            n_data: 16,
            snr_db: 10.0,
            lambda: 0.01,
            tau: 1.0,
            batch_symbols: 256,
            steps_phase1: 3,
            steps_phase2: 3,
            lr: 0.01,
            seed: 5,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        assert!(c.validate().is_ok());
        c.batch_symbols = 3000;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "batch_symbols"));
        let mut c = small_cfg();
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::default().batch_symbols % 16, 0);
    }

    #[test]
    fn untrained_cross_entropy_near_ln_m() {
        let cfg = TrainConfig {
            lambda: 0.0,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ShapingModel::init(16, &mut rng);
        let l = forward_batch(&model, &cfg, Phase::One, &mut rng).unwrap();
        let ln16 = 16f64.ln();
        assert!((l.cross_entropy - ln16).abs() < 0.2 * ln16, "{}", l.cross_entropy);
        assert!(l.entropy <= ln16 + 1e-12);
        assert!((l.total - (l.cross_entropy - l.entropy)).abs() < 1e-12);
    }

    #[test]
    fn uniform_entropy_is_ln_m() {
        let h = crate::shaping::entropy_nats(&[1.0 / 16.0; 16]);
        assert!((h - 16f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn phase_two_with_zero_lambda_matches_phase_one() {
        let cfg = TrainConfig {
            lambda: 0.0,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = ShapingModel::init(16, &mut rng);
        let noise = BatchNoise::sample(&cfg, &cfg.noise(), &mut rng);
        let mut g1 = Graph::new();
        let a = build_batch(&mut g1, &model, &cfg, &noise, Phase::One).unwrap();
        let mut g2 = Graph::new();
        let b = build_batch(&mut g2, &model, &cfg, &noise, Phase::Two).unwrap();
        assert_eq!(a.breakdown, b.breakdown);
        let ga = g1.backward(a.root).unwrap();
        let gb = g2.backward(b.root).unwrap();
        for (va, vb) in a.bound.all().into_iter().zip(b.bound.all()) {
            assert_eq!(ga.get(va), gb.get(vb));
        }
        let with_pen = TrainConfig {
            lambda: 0.5,
            ..cfg.clone()
        };
        let mut g3 = Graph::new();
        let c = build_batch(&mut g3, &model, &with_pen, &noise, Phase::Two).unwrap();
        let want = c.breakdown.cross_entropy - c.breakdown.entropy + 0.5 * c.breakdown.papr_term;
        assert!((c.breakdown.total - want).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_cfg();
        let a = train_two_phase(&cfg).unwrap();
        let b = train_two_phase(&cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace.len(), 6);
        assert_eq!(a.trace[3].phase, Phase::Two);
        let csv = trace_csv(&a.trace, Some("hash=x"));
        assert!(csv.starts_with("# hash=x\nstep,phase,cross_entropy,entropy,papr_db,total\n0,1,"));
        assert_eq!(csv.lines().count(), 8);
    }

    #[test]
    fn divergence_guard_trips_after_patience() {
        let mut guard = DivergenceGuard::new();
        let ok = LossBreakdown {
            cross_entropy: 1.0,
            entropy: 1.0,
            papr_term: 1.0,
            total: 0.0,
        };
        guard.check(0, Phase::One, &ok, 0.0).unwrap();
        let bad = LossBreakdown {
            cross_entropy: 11.0,
            ..ok
        };
        for s in 1..DIVERGENCE_PATIENCE {
            guard.check(s, Phase::One, &bad, 0.0).unwrap();
        }
        assert!(matches!(
            guard.check(DIVERGENCE_PATIENCE, Phase::One, &bad, 0.0),
            Err(Error::Diverged { .. })
        ));
    }
}
