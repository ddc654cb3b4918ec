use proptest::prelude::*;
use tasnet_core::analysis::{
    inner_representation, overlap_curve, run_overlap_study, stft_magnitude, threshold_sweep, InnerRepresentation,
    LearnedEncoder, Representation, Stft, StftConfig, StudyPair, WindowKind, STUDY_HEADER,
};
use tasnet_core::models::{EncoderMode, NormChoice, TasNet, TasNetConfig};

fn tasnet(encoder: EncoderMode) -> TasNet {
    let cfg = TasNetConfig {
        window: 16,
        hop: 8,
        filters: 12,
        blocks: 2,
        repeats: 1,
        bottleneck: 4,
        hidden: 6,
        kernel: 3,
        norm: NormChoice::Gln,
        causal: false,
        speakers: 1,
        encoder,
    };
    TasNet::new(cfg, 3).unwrap()
}

fn wiggle(len: usize, phase: f64) -> Vec<f64> {
    (0..len).map(|i| (i as f64 * 0.173 + phase).sin() * (i as f64 * 0.011).cos()).collect()
}

#[test]
fn encoder_frame_count_and_linearity() {
    let m = tasnet(EncoderMode::Linear);
    for len in [16, 24, 800, 8000] {
        let r = inner_representation(&m, &wiggle(len, 0.3)).unwrap();
        assert_eq!(r.rows, 12);
        assert_eq!(r.frames, (len - 16) / 8 + 1);
    }
    let x = wiggle(400, 1.0);
    let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    let a = inner_representation(&m, &x).unwrap();
    let b = inner_representation(&m, &x2).unwrap();
    for (u, v) in a.data.iter().zip(&b.data) {
        assert!((2.0 * u - v).abs() <= 1e-5 * (1.0 + v.abs()));
    }
    assert_eq!(a.representation, "encoder-linear");
    assert!(inner_representation(&m, &x[..15]).is_err());
}

#[test]
fn zero_input_gives_zero_coefficients_in_both_modes() {
    for mode in [EncoderMode::Linear, EncoderMode::Rectified] {
        let r = inner_representation(&tasnet(mode), &[0.0; 200]).unwrap();
        assert!(r.data.iter().all(|&v| v == 0.0));
    }
    let s = stft_magnitude(&[0.0; 600], &StftConfig::default()).unwrap();
    assert!(s.data.iter().all(|&v| v == 0.0));
}

#[test]
fn bin_centred_sine_occupies_one_row() {
    let n = 64;
    let bin = 5;
    let x: Vec<f64> = (0..4 * n)
        .map(|i| (2.0 * std::f64::consts::PI * bin as f64 * i as f64 / n as f64).cos())
        .collect();
    let cfg = StftConfig {
        window: n,
        hop: 16,
        dft_size: n,
        kind: WindowKind::Rectangular,
    };
    let r = stft_magnitude(&x, &cfg).unwrap();
    assert_eq!(r.rows, n / 2 + 1);
    let peak = r.max();
    for row in 0..r.rows {
        for k in 0..r.frames {
            let v = r.at(row, k);
            if row == bin {
                assert!((v - n as f64 / 2.0).abs() < 1e-9);
            } else {
                assert!(20.0 * (v / peak + 1e-300).log10() < -60.0, "row {row}: {v}");
            }
        }
    }
}

#[test]
fn parseval_per_frame() {
    let x = wiggle(1000, 0.1);
    let cfg = StftConfig {
        window: 100,
        hop: 37,
        dft_size: 128,
        kind: WindowKind::Hann,
    };
    let r = stft_magnitude(&x, &cfg).unwrap();
    let w = tasnet_core::dsp::hann(100);
    let (mut spec, mut time) = (0.0, 0.0);
    for k in 0..r.frames {
        for row in 0..r.rows {
            let e = if row == 0 || row == 64 { 1.0 } else { 2.0 };
            spec += e * r.at(row, k).powi(2) / 128.0;
        }
        time += (0..100).map(|i| (x[k * 37 + i] * w[i]).powi(2)).sum::<f64>();
    }
    assert!((spec - time).abs() / time < 1e-6, "{spec} vs {time}");
}

#[test]
fn dft_smaller_than_window_is_rejected() {
    let cfg = StftConfig {
        window: 256,
        hop: 8,
        dft_size: 128,
        kind: WindowKind::Hann,
    };
    assert!(stft_magnitude(&[0.0; 1000], &cfg).is_err());
}

#[test]
fn study_emits_one_row_per_pair_representation_and_threshold() {
    let m = tasnet(EncoderMode::Rectified);
    let targets: Vec<Vec<f64>> = (0..3).map(|i| wiggle(2000, i as f64)).collect();
    let noises: Vec<Vec<f64>> = (0..3).map(|i| wiggle(2000, 10.0 + i as f64)).collect();
    let kinds = ["speaker", "ssn", "speaker"];
    let pairs: Vec<StudyPair> = (0..3)
        .map(|i| StudyPair {
            target_id: format!("t{i}"),
            noise_id: format!("n{i}"),
            noise_type: kinds[i].into(),
            target: &targets[i],
            noise: &noises[i],
        })
        .collect();
    let enc = LearnedEncoder(&m);
    let stft = Stft(StftConfig::default());
    let reps: Vec<&dyn Representation> = vec![&enc, &stft];
    let th = threshold_sweep(-40.0, 5.0);
    let study = run_overlap_study(&pairs, &reps, &th).unwrap();
    let csv = study.curves_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], STUDY_HEADER);
    assert_eq!(lines.len(), 1 + 3 * 2 * th.len());
    assert!(lines[1].starts_with("encoder-rectified,t0,n0,0,"));
    let sp = study.mean("speaker", "stft").unwrap();
    assert_eq!(sp.pairs, 2);
    let want = (study.curves[0 * 2 + 1].overlap[4] + study.curves[2 * 2 + 1].overlap[4]) / 2.0;
    assert!((sp.overlap[4] - want).abs() < 1e-15);
    assert_eq!(study.means.len(), 4);
}

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            prop::collection::vec(0.0f64..1.0, r * c),
            prop::collection::vec(0.0f64..1.0, r * c),
        )
    })
}

fn brute_force(x: &InnerRepresentation, v: &InnerRepresentation, t: f64) -> (usize, usize, usize) {
    let lx = x.data.iter().cloned().fold(0.0, f64::max) * 10f64.powf(t / 20.0);
    let lv = v.data.iter().cloned().fold(0.0, f64::max) * 10f64.powf(t / 20.0);
    let mut sx = std::collections::HashSet::new();
    let mut sv = std::collections::HashSet::new();
    for n in 0..x.rows {
        for k in 0..x.frames {
            if x.at(n, k) > lx {
                sx.insert((n, k));
            }
            if v.at(n, k) > lv {
                sv.insert((n, k));
            }
        }
    }
    (sx.intersection(&sv).count(), sx.len(), sv.len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn overlap_properties((r, c, a, b) in matrix(), scale_x in 0.01f64..100.0, scale_v in 0.01f64..100.0) {
        let x = InnerRepresentation::new(r, c, a.clone()).unwrap();
        let v = InnerRepresentation::new(r, c, b.clone()).unwrap();
        let th = threshold_sweep(-60.0, 3.0);
        let curve = overlap_curve(&x, &v, &th).unwrap();
        let total = (r * c) as f64;
        for w in curve.overlap.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        for (i, &t) in th.iter().enumerate() {
            let (both, nx, nv) = brute_force(&x, &v, t);
            prop_assert_eq!(curve.overlap[i], both as f64 / total);
            prop_assert!(both <= nx.min(nv));
            prop_assert!((0.0..=1.0).contains(&curve.overlap_union[i]));
        }
        // Scale by powers of two so the relative thresholds stay bit-exact.
        let px = 2f64.powi(scale_x.log2().round() as i32);
        let pv = 2f64.powi(scale_v.log2().round() as i32);
        let xs = InnerRepresentation::new(r, c, a.iter().map(|v| v * px).collect()).unwrap();
        let vs = InnerRepresentation::new(r, c, b.iter().map(|v| v * pv).collect()).unwrap();
        prop_assert_eq!(overlap_curve(&xs, &vs, &th).unwrap().overlap, curve.overlap.clone());
        let same = overlap_curve(&x, &x, &th).unwrap();
        for (i, &t) in th.iter().enumerate() {
            let (_, nx, _) = brute_force(&x, &x, t);
            prop_assert_eq!(same.overlap[i], nx as f64 / total);
        }
    }
}
