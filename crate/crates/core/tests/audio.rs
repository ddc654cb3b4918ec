use proptest::prelude::*;
use tasnet_core::audio::{fix_length, read_wav, vad_trim, write_wav, write_wav_as, Waveform, WavEncoding};

#[test]
fn stereo_file_keeps_channel_zero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("stereo.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 16000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let left: Vec<i16> = (0..500).map(|i| (i * 37 % 2000) as i16 - 1000).collect();
    let mut w = hound::WavWriter::create(&p, spec).unwrap();
    for &l in &left {
        w.write_sample(l).unwrap();
        w.write_sample(-l / 2 + 7).unwrap();
    }
    w.finalize().unwrap();
    let got = read_wav(&p).unwrap();
    assert_eq!(got.sample_rate, 16000);
    assert_eq!(got.len(), left.len());
    for (g, &l) in got.samples.iter().zip(&left) {
        assert_eq!(*g, l as f64 / 32768.0);
    }
}

#[test]
fn float_file_from_reference_writer() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 8000,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let vals = [0.1f32, -0.75, 0.333, 1.0];
    let mut w = hound::WavWriter::create(&p, spec).unwrap();
    for v in vals {
        w.write_sample(v).unwrap();
    }
    w.finalize().unwrap();
    let got = read_wav(&p).unwrap();
    assert_eq!(got.samples, vals.iter().map(|&v| v as f64).collect::<Vec<_>>());
}

#[test]
fn our_pcm_output_reads_in_reference_reader() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("o.wav");
    write_wav(&p, &Waveform::new(vec![0.5, -0.5, 0.0, -1.0], 8000)).unwrap();
    let mut r = hound::WavReader::open(&p).unwrap();
    assert_eq!(r.spec().channels, 1);
    let s: Vec<i16> = r.samples::<i16>().map(|s| s.unwrap()).collect();
    assert_eq!(s, vec![16384, -16384, 0, -32768]);
}

fn signal() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..3000)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn float_round_trip_is_exact(x in signal()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let x: Vec<f64> = x.iter().map(|&v| v as f32 as f64).collect();
        let w = Waveform::new(x, 8000);
        write_wav_as(&p, &w, WavEncoding::Float32).unwrap();
        prop_assert_eq!(read_wav(&p).unwrap(), w);
    }

    #[test]
    fn pcm_round_trip_error_is_one_step(x in signal()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let w = Waveform::new(x, 8000);
        write_wav(&p, &w).unwrap();
        let r = read_wav(&p).unwrap();
        for (a, b) in r.samples.iter().zip(&w.samples) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn vad_is_idempotent_and_segment_aligned(
        segs in prop::collection::vec((0.0f64..1.0, -6i32..0), 1..30),
        tail in 0usize..200,
    ) {
        let mut x = Vec::new();
        for (i, (a, e)) in segs.iter().enumerate() {
            let amp = a * 10f64.powi(*e);
            x.extend((0..200).map(|k| amp * if (k + i) % 2 == 0 { 1.0 } else { -0.5 }));
        }
        x.extend((0..tail).map(|k| 0.3 * (k as f64 * 0.1).sin()));
        let w = Waveform::new(x, 8000);
        let once = vad_trim(&w, 25.0, 40.0).unwrap();
        prop_assert!(once.len() <= w.len());
        prop_assert!(once.len() % 200 == 0 || once.len() % 200 == tail % 200);
        if !once.is_empty() {
            prop_assert_eq!(vad_trim(&once, 25.0, 40.0).unwrap(), once);
        }
    }

    #[test]
    fn fix_length_is_exact(n in 1usize..50000, secs in 0.5f64..6.0) {
        let w = Waveform::new(vec![0.1; n], 8000);
        prop_assert_eq!(fix_length(&w, secs).unwrap().len(), (secs * 8000.0).round() as usize);
    }
}
