mod common;

use cesentry::adversary::{make_tilted_attack, AttackSpec, StartLaw};
use cesentry::detection::{DetectorConfig, SegmentThreshold, Verdict};
use cesentry::simulation::{delay_and_impact_stats, SymbolSampler};
use common::{chicken_family, family_from, Oracle};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn binary_streams_match_generalized_cusum_oracle() {
    let fam = family_from(&[0.0, 1.0], &[0.5, 0.5]);
    let oracle = Oracle::new(&[0.0, 1.0], &[0.5, 0.5]);
    let det = DetectorConfig::with_threshold(&fam, 0.2, 3.3).unwrap();
    let theta_min = oracle.theta_for_mean(0.3);
    assert!((det.theta_min - theta_min).abs() < 1e-9);
    assert!(det.m() > 12);

    let mut stopped = 0;
    for bits in 0u32..1 << 12 {
        let stream: Vec<f64> = (0..12).map(|i| ((bits >> i) & 1) as f64).collect();
        let got = det.run(&stream).unwrap().map(|(t, _)| t);
        assert_eq!(got, oracle.generalized_cusum_stop(theta_min, 3.3, &stream), "stream {bits:012b}");
        stopped += got.is_some() as usize;
    }
    assert!(stopped > 0 && stopped < 1 << 12);
}

#[test]
fn chicken_streams_match_generalized_cusum_oracle() {
    let fam = chicken_family();
    let oracle = Oracle::chicken();
    let theta_min = oracle.theta_for_mean(oracle.mean() - 0.5);
    let mu = 4.3;
    let det = DetectorConfig::with_threshold(&fam, 0.5, mu).unwrap();
    assert!((det.theta_min - theta_min).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut stopped = 0;
    for i in 0..1000 {
        let theta = 0.6 * (i as f64) / 1000.0;
        let sampler = SymbolSampler::new(&oracle.tilt(theta));
        let stream: Vec<f64> = (0..50).map(|_| oracle.alphabet[sampler.sample(&mut rng)]).collect();
        let got = det.run(&stream).unwrap().map(|(t, _)| t);
        assert_eq!(got, oracle.generalized_cusum_stop(theta_min, mu, &stream), "stream {i}: {stream:?}");
        stopped += got.is_some() as usize;
    }
    assert!(stopped > 100 && stopped < 900, "{stopped} of 1000 streams stopped");
}

#[test]
fn window_thresholds_solve_kl_equation() {
    let fam = chicken_family();
    let oracle = Oracle::chicken();
    let det = DetectorConfig::build(&fam, 0.5, 1e-3).unwrap();
    for (i, w) in det.windows.iter().enumerate() {
        let k = (i + 1) as f64;
        match *w {
            SegmentThreshold::Unreachable => assert!(det.mu / k >= 36f64.ln()),
            SegmentThreshold::Reachable { theta, z } => {
                assert!(theta >= det.theta_min);
                let d = oracle.kl(&oracle.tilt(theta));
                if theta > det.theta_min {
                    assert!((d - det.mu / k).abs() < 1e-9, "k = {k}");
                } else {
                    assert!(det.mu / k <= d + 1e-12);
                }
                let z_oracle = -det.mu / theta - k * oracle.b(theta) / theta;
                assert!((z - z_oracle).abs() < 1e-8 * z_oracle.abs().max(1.0));
            }
        }
    }
}

#[test]
fn no_attack_statistic_returns_to_zero() {
    let fam = chicken_family();
    let det = DetectorConfig::build(&fam, 0.5, 1e-3).unwrap();
    let sampler = SymbolSampler::new(fam.base_pmf());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut state = det.new_state();
    let mut zero_steps = 0;
    let mut steps = 0;
    while steps < 100_000 {
        if let Verdict::Stop(_) = det.step_index(&mut state, sampler.sample(&mut rng)) {
            state = det.new_state();
        }
        steps += 1;
        zero_steps += (state.r == 0.0) as usize;
    }
    let drift: f64 = fam.base_pmf().iter().zip(det.llr()).map(|(p, l)| p * l).sum();
    assert!(drift < 0.0);
    assert!(zero_steps > 0);
    assert!(zero_steps as f64 / steps as f64 > 0.1);
}

#[test]
fn reset_clears_partial_windows() {
    let fam = chicken_family();
    let det = DetectorConfig::build(&fam, 0.5, 1e-2).unwrap();
    let sampler = SymbolSampler::new(&fam.tilt(0.2));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut state = det.new_state();
    for _ in 0..5000 {
        if let Verdict::Stop(_) = det.step_index(&mut state, sampler.sample(&mut rng)) {
            state = det.new_state();
            continue;
        }
        let since = (state.t - state.t1) as usize;
        for (k, q) in state.q.iter().enumerate() {
            if k + 1 > since {
                assert_eq!(*q, 0.0);
            }
        }
    }
}

fn delay_ratio(fam: &cesentry::tilted::TiltedFamily, theta: f64, mu: f64) -> f64 {
    let det = DetectorConfig::with_threshold(fam, 0.5, mu).unwrap();
    let attack = make_tilted_attack(fam, theta, 0.5, StartLaw::Fixed { t: 1 }).unwrap();
    let s = delay_and_impact_stats(&det, &attack, 400, 1_000_000, 11).unwrap();
    assert_eq!(s.detect_rate, 1.0);
    s.mean_delay / (mu / fam.kl_from_base(theta))
}

#[test]
fn delay_approaches_threshold_over_kl() {
    let fam = chicken_family();
    let theta_min = fam.theta_for_epsilon(0.5).unwrap().theta;
    for theta in [theta_min, 0.1] {
        let ratios: Vec<f64> = [5.0, 10.0, 20.0].iter().map(|&mu| delay_ratio(&fam, theta, mu)).collect();
        assert!((ratios[2] - 1.0).abs() < 0.2, "theta {theta}: ratios {ratios:?}");
        assert!((ratios[2] - 1.0).abs() < (ratios[0] - 1.0).abs(), "theta {theta}: ratios {ratios:?}");
    }
}

#[test]
fn point_mass_on_worst_symbol_stops_quickly() {
    let fam = chicken_family();
    let det = DetectorConfig::build(&fam, 0.5, 1e-4).unwrap();
    let mut tau = vec![0.0; fam.len()];
    tau[0] = 1.0;
    let attack = AttackSpec::explicit(&fam, "worst", tau, StartLaw::Fixed { t: 1 }).unwrap();
    let s = delay_and_impact_stats(&det, &attack, 50, 1000, 1).unwrap();
    let bound = (det.mu / 36f64.ln()).ceil() + 1.0;
    assert_eq!(s.detect_rate, 1.0);
    assert!(s.mean_delay <= bound, "delay {} bound {bound}", s.mean_delay);
}
