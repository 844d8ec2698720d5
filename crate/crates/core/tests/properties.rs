use oshape::baselines::{amp_clip, qam_constellation};
use oshape::checkpoint::{Checkpoint, CheckpointKind};
use oshape::config::ExperimentConfig;
use oshape::fft::unitary_dft;
use oshape::nn::Param;
use oshape::ofdm::{ccdf, hermitian_map, papr, AcoModem};
use oshape::shaping::{gumbel_draw, normalize};
use oshape::tensor::{ComplexVector, RealTensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn complex_vec(len: usize) -> impl Strategy<Value = ComplexVector> {
    (
        prop::collection::vec(-10.0f64..10.0, len),
        prop::collection::vec(-10.0f64..10.0, len),
    )
        .prop_map(|(re, im)| ComplexVector::new(re, im).unwrap())
}

fn sized_complex() -> impl Strategy<Value = ComplexVector> {
    (0u32..9).prop_flat_map(|p| complex_vec(1 << p))
}

proptest! {
    #[test]
    fn dft_round_trip_and_parseval(v in sized_complex()) {
        let f = unitary_dft(&v, false).unwrap();
        prop_assert!((f.energy() - v.energy()).abs() <= 1e-9 * (1.0 + v.energy()));
        let back = unitary_dft(&f, true).unwrap();
        for k in 0..v.len() {
            prop_assert!((back.re[k] - v.re[k]).abs() < 1e-9);
            prop_assert!((back.im[k] - v.im[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn hermitian_layout_gives_real_antisymmetric_signal(v in (0u32..6).prop_flat_map(|p| complex_vec(1 << p))) {
        let n = v.len();
        let modem = AcoModem::new(n).unwrap();
        let frame = modem.modulate(&v).unwrap();
        let x = &frame.time_unclipped;
        for i in 0..2 * n {
            prop_assert!((x[i] + x[i + 2 * n]).abs() < 1e-9);
        }
        let y = modem.demodulate(&frame.time_clipped).unwrap();
        for k in 0..n {
            prop_assert!((y.re[k] - v.re[k] / 2.0).abs() < 1e-9);
            prop_assert!((y.im[k] - v.im[k] / 2.0).abs() < 1e-9);
        }
        prop_assert_eq!(hermitian_map(&v).len(), 4 * n);
    }

    #[test]
    fn papr_is_scale_invariant_and_at_least_one(x in prop::collection::vec(-5.0f64..5.0, 2..128), s in 0.01f64..100.0) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-6));
        let a = papr(&x).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| v * s).collect();
        let b = papr(&scaled).unwrap();
        prop_assert!(a.linear >= 1.0 - 1e-12);
        prop_assert!((a.linear - b.linear).abs() <= 1e-9 * a.linear);
        prop_assert!(a.linear <= x.len() as f64 + 1e-9);
    }

    #[test]
    fn ccdf_is_monotone_count_ratio(samples in prop::collection::vec(0.0f64..20.0, 1..300)) {
        let thresholds: Vec<f64> = (0..=40).map(|i| i as f64 * 0.5).collect();
        let c = ccdf(&samples, &thresholds).unwrap();
        prop_assert!(c.is_nonincreasing());
        let counts = c.counts.as_ref().unwrap();
        for (i, &t) in thresholds.iter().enumerate() {
            let expect = samples.iter().filter(|&&p| p >= t).count() as u64;
            prop_assert_eq!(counts[i], expect);
            prop_assert!((0.0..=1.0).contains(&c.y[i]));
        }
    }

    #[test]
    fn normalization_gives_unit_energy(
        pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..32),
        w in prop::collection::vec(0.01f64..1.0, 32),
    ) {
        let w = &w[..pts.len()];
        let total: f64 = w.iter().sum();
        let probs: Vec<f64> = w.iter().map(|v| v / total).collect();
        prop_assume!(pts.iter().any(|(a, b)| a.abs() + b.abs() > 1e-3));
        let c = normalize(&pts, &probs).unwrap();
        prop_assert!((c.average_energy() - 1.0).abs() < 1e-9);
        prop_assert!((c.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gumbel_relaxation_is_a_distribution(
        w in prop::collection::vec(0.001f64..1.0, 2..20),
        tau in 0.01f64..5.0,
        seed in any::<u64>(),
    ) {
        let total: f64 = w.iter().sum();
        let probs: Vec<f64> = w.iter().map(|v| v / total).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = gumbel_draw(&probs, tau, &mut rng).unwrap();
        prop_assert!((d.soft.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(d.soft.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(d.hard.iter().sum::<f64>(), 1.0);
        prop_assert!(d.index < probs.len());
    }

    #[test]
    fn amp_clip_never_raises_papr(seed in any::<u64>(), cr in 0.5f64..12.0) {
        use rand::Rng;
        let q = qam_constellation(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(f64, f64)> = (0..16).map(|_| q.points[rng.random_range(0..16)]).collect();
        let x = AcoModem::new(16).unwrap().modulate(&ComplexVector::from_pairs(&pairs)).unwrap().time_clipped;
        let before = papr(&x).unwrap().linear;
        let after = papr(&amp_clip(&x, cr)).unwrap().linear;
        prop_assert!(after <= before * (1.0 + 1e-12));
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        tensors in prop::collection::vec((1usize..5, 1usize..5, -1e6f64..1e6), 1..6),
        snr in -5.0f64..30.0,
    ) {
        let params: Vec<Param> = tensors
            .iter()
            .enumerate()
            .map(|(i, &(r, c, v))| {
                let data = (0..r * c).map(|j| v / (j as f64 + 1.0)).collect();
                Param::new(format!("t{i}"), RealTensor::new(vec![r, c], data).unwrap())
            })
            .collect();
        let ck = Checkpoint {
            kind: CheckpointKind::UniformDemapper,
            meta: vec![("snr_db".into(), snr.to_string())],
            tensors: params,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.snr_db().unwrap().to_bits(), snr.to_bits());
    }

    #[test]
    fn config_round_trips_through_resolved_text(
        lambda in 0.0f64..1.0,
        snr in -5.0f64..30.0,
        seed in any::<u64>(),
        frames in 1usize..100_000,
    ) {
        let mut c = ExperimentConfig::default();
        c.train.lambda = lambda;
        c.train.snr_db = snr;
        c.train.seed = seed;
        c.n_frames = frames;
        let back = ExperimentConfig::from_text(&c.resolved_text()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }
}
