use proptest::prelude::*;
use tasnet_core::audio::Waveform;
use tasnet_core::dataset::Example;
use tasnet_core::metrics::{evaluate_with, si_sdr, stoi, to_stoi_rate};

/// 32-bit linear congruential generator, uniform in [-0.5, 0.5).
fn lcg(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = (s * 1_664_525 + 1_013_904_223) % (1 << 32);
            s as f64 / (1u64 << 32) as f64 - 0.5
        })
        .collect()
}

/// Modulated harmonic tone with a 0.3 s gap starting at 1 s.
fn clean(n: usize, fs: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    (0..n)
        .map(|i| {
            let t = i as f64;
            let f = fs as f64;
            if i >= fs && i < (1.3 * f) as usize {
                return 0.0;
            }
            let env = (0.5 * (1.0 - (2.0 * PI * 4.0 * t / f).cos())).powi(2);
            env * ((2.0 * PI * 220.0 * t / f).sin()
                + 0.6 * (2.0 * PI * 660.0 * t / f + 0.3).sin()
                + 0.3 * (2.0 * PI * 1800.0 * t / f).sin())
        })
        .collect()
}

// Values produced by the reference Python package (pystoi 0.4.1) on the same signals.
const PYSTOI: [(usize, &str, f64); 6] = [
    (10000, "light", 0.6015140785308726),
    (10000, "heavy", 0.5125698246155803),
    (10000, "mixed", 0.6369488980086768),
    (8000, "light", 0.5910574352396175),
    (8000, "heavy", 0.4839304637857027),
    (8000, "mixed", 0.6311276544555613),
];

#[test]
fn stoi_matches_reference_package() {
    for (fs, name, want) in PYSTOI {
        let n = (2.5 * fs as f64) as usize;
        let x = clean(n, fs);
        let v = lcg(n, 7);
        let y: Vec<f64> = match name {
            "light" => x.iter().zip(&v).map(|(a, b)| a + b).collect(),
            "heavy" => x.iter().zip(&v).map(|(a, b)| a + 3.0 * b).collect(),
            _ => x.iter().zip(&v).map(|(a, b)| 0.8 * a + 0.2 * b).collect(),
        };
        let got = stoi(&y, &x, fs as u32).unwrap();
        assert!((got - want).abs() < 1e-6, "{fs} {name}: {got} vs {want}");
    }
}

#[test]
fn resampler_matches_reference_package() {
    let r = to_stoi_rate(&clean(20000, 8000), 8000);
    assert_eq!(r.len(), 25000);
    for (i, want) in [
        (100, 0.0001161463196133754),
        (1250, -0.17731498288281602),
        (3770, -0.986381777168098),
        (16251, -0.2595740375888109),
        (23733, 0.870137920693995),
    ] {
        assert!((r[i] - want).abs() < 1e-12, "sample {i}: {} vs {want}", r[i]);
    }
}

#[test]
fn stoi_of_identical_signals_is_one() {
    let x = clean(24000, 8000);
    assert!((stoi(&x, &x, 8000).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn stoi_drops_with_snr() {
    let x = clean(24000, 8000);
    let v = lcg(24000, 3);
    let px: f64 = x.iter().map(|a| a * a).sum();
    let pv: f64 = v.iter().map(|a| a * a).sum();
    let at = |snr_db: f64| {
        let g = (px / pv / 10f64.powf(snr_db / 10.0)).sqrt();
        let y: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + g * b).collect();
        stoi(&y, &x, 8000).unwrap()
    };
    assert!(at(-10.0) < at(0.0));
}

#[test]
fn stoi_rejects_short_and_mismatched_input() {
    let x = clean(2000, 8000);
    assert!(stoi(&x, &x, 8000).is_err());
    assert!(stoi(&x[..100], &x, 8000).is_err());
}

fn example(len: usize, seed: u64, two: bool) -> Example {
    let x = clean(len, 8000);
    let u: Vec<f64> = lcg(len, seed).iter().map(|v| 0.3 * v).collect();
    let (sources, mixture): (Vec<Vec<f64>>, Vec<f64>) = if two {
        let other: Vec<f64> = x.iter().rev().cloned().collect();
        let y = x.iter().zip(&other).map(|(a, b)| a + b).collect();
        (vec![x, other], y)
    } else {
        let y = x.iter().zip(&u).map(|(a, b)| a + b).collect();
        (vec![x], y)
    };
    Example {
        mixture: Waveform::new(mixture, 8000),
        sources: sources.into_iter().map(|s| Waveform::new(s, 8000)).collect(),
        noise: None,
    }
}

#[test]
fn identity_model_matches_noisy_columns() {
    let exs: Vec<Example> = (0..3).map(|i| example(16000, i, false)).collect();
    let ids: Vec<String> = (0..3).map(|i| format!("f{i}")).collect();
    let r = evaluate_with(&ids, &exs, |y| Ok(vec![y.to_vec()])).unwrap();
    for row in &r.rows {
        assert_eq!(row.noisy_stoi, row.proc_stoi);
        assert_eq!(row.noisy_sisdr, row.proc_sisdr);
    }
    let mean = r.rows.iter().map(|x| x.proc_stoi).sum::<f64>() / 3.0;
    assert!((r.summary.proc_stoi - mean).abs() < 1e-15);
}

#[test]
fn oracle_model_is_infinite_and_excluded() {
    let exs: Vec<Example> = (0..2).map(|i| example(16000, i, false)).collect();
    let ids: Vec<String> = vec!["a".into(), "b".into()];
    let clean_out: Vec<Vec<f64>> = exs.iter().map(|e| e.sources[0].samples.clone()).collect();
    let r = evaluate_with(&ids, &exs, |y| {
        let i = exs.iter().position(|e| e.mixture.samples == y).unwrap();
        Ok(vec![clean_out[i].clone()])
    })
    .unwrap();
    assert!(r.rows.iter().all(|x| x.proc_sisdr == f64::INFINITY));
    assert_eq!(r.summary.proc_sisdr_excluded, 2);
}

#[test]
fn swapped_two_source_outputs_score_the_same() {
    let exs = vec![example(16000, 1, true)];
    let ids = vec!["p".to_string()];
    let srcs: Vec<Vec<f64>> = exs[0].sources.iter().map(|s| s.samples.iter().map(|v| v * 0.9 + 0.01).collect()).collect();
    let a = evaluate_with(&ids, &exs, |_| Ok(srcs.clone())).unwrap();
    let b = evaluate_with(&ids, &exs, |_| Ok(vec![srcs[1].clone(), srcs[0].clone()])).unwrap();
    assert_eq!(a.rows, b.rows);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn si_sdr_is_scale_invariant(seed in 0u64..1000, alpha in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
        let s = lcg(257, seed);
        let e: Vec<f64> = s.iter().zip(lcg(257, seed + 1)).map(|(a, b)| a + 0.5 * b).collect();
        let scaled: Vec<f64> = e.iter().map(|v| alpha * v).collect();
        let d = si_sdr(&scaled, &s).unwrap() - si_sdr(&e, &s).unwrap();
        prop_assert!(d.abs() < 1e-9, "{}", d);
    }
}
