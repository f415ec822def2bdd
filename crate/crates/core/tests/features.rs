use std::f64::consts::PI;

use manatee_core::dataset::{self, window_count};
use manatee_core::dsp::{self, compute_stats, normalize, FilterbankFeature, FRAME_LEN, HOP, N_FFT_BINS, N_FRAMES};
use manatee_core::{Annotation, AudioClip, RecordingSession};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct O(n^2) DFT power of one Hamming-windowed frame.
fn dft_power(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let w: Vec<f64> = (0..n).map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / (n - 1) as f64).cos()).collect();
    (0..n / 2 + 1)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, (&x, &wt)) in frame.iter().zip(&w).enumerate() {
                let phase = -2.0 * PI * (k * t) as f64 / n as f64;
                re += x * wt * phase.cos();
                im += x * wt * phase.sin();
            }
            re * re + im * im
        })
        .collect()
}

#[test]
fn stft_matches_direct_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let clip = AudioClip::new((0..48_000).map(|_| rng.random_range(-0.5f32..0.5)).collect());
    let power = dsp::stft_power(&clip).unwrap();
    // first frame, a middle one, and the zero-padded last one
    for t in [0, 64, N_FRAMES - 1] {
        let frame: Vec<f64> = (0..FRAME_LEN)
            .map(|k| clip.samples.get(t * HOP + k).copied().unwrap_or(0.0) as f64)
            .collect();
        let want = dft_power(&frame);
        for k in 0..N_FFT_BINS {
            let got = power[k * N_FRAMES + t];
            assert!((got - want[k]).abs() <= 1e-9 * want[k].max(1.0), "frame {t} bin {k}: {got} vs {want:?}", want = want[k]);
        }
    }
}

#[test]
fn ten_minute_session_has_1199_windows() {
    assert_eq!(window_count(600 * 48_000), 1199);
}

proptest! {
    #[test]
    fn mel_round_trip(f in 0.0f64..48_000.0) {
        let back = dsp::mel_to_hz(dsp::mel_scale(f).unwrap());
        prop_assert!((back - f).abs() <= 1e-9 * f.max(1.0));
    }

    #[test]
    fn mel_is_increasing(a in 0.0f64..24_000.0, d in 1e-3f64..1000.0) {
        prop_assert!(dsp::mel_scale(a + d).unwrap() > dsp::mel_scale(a).unwrap());
    }

    #[test]
    fn window_count_matches_enumeration(n in 1usize..2_000_000) {
        // starts every hop until a window reaches the end
        let mut k = 0;
        while k * 24_000 + 48_000 < n {
            k += 1;
        }
        prop_assert_eq!(window_count(n), k + 1);
    }

    #[test]
    fn windows_cover_every_sample(n in 1usize..1_000_000) {
        let last_start = (window_count(n) - 1) * 24_000;
        prop_assert!(last_start + 48_000 >= n);
        prop_assert!(last_start < n);
    }

    #[test]
    fn normalized_train_features_are_standardized(seed in 0u64..1000, gain in 0.01f32..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<FilterbankFeature> = (0..3)
            .map(|_| dsp::log_mel(&AudioClip::new((0..48_000).map(|_| rng.random_range(-gain..gain)).collect())).unwrap())
            .collect();
        let stats = compute_stats(feats.iter()).unwrap();
        let all: Vec<f64> = feats.iter().flat_map(|f| normalize(f, &stats).unwrap().values).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn injected_noise_hits_target_snr(seed in 0u64..10_000, snr in -5.0f64..30.0, amp in 1e-3f32..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clip = AudioClip::new((0..48_000).map(|_| rng.random_range(-amp..amp)).collect());
        let noisy = dataset::inject_noise(&clip, snr, &mut rng);
        let p_noise = noisy
            .samples
            .iter()
            .zip(&clip.samples)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / 48_000.0;
        let measured = 10.0 * (clip.power() / p_noise).log10();
        prop_assert!((measured - snr).abs() < 0.3, "{measured} vs {snr}");
    }

    #[test]
    fn noise_never_changes_labels_or_geometry(seed in 0u64..1000, n in 48_000usize..200_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dur = n as f64 / 48_000.0;
        let s = rng.random_range(0.0..dur - 0.05);
        let ann = vec![Annotation::new(s, (s + 0.3).min(dur)).unwrap()];
        let clip = AudioClip::new((0..n).map(|_| rng.random_range(-0.1f32..0.1)).collect());
        let noisy = dataset::inject_noise(&clip, 10.0, &mut rng);
        prop_assert_eq!(noisy.len(), clip.len());
        let a = dataset::window_and_label(&RecordingSession::new("s", clip, ann.clone()).unwrap());
        let b = dataset::window_and_label(&RecordingSession::new("s", noisy, ann).unwrap());
        prop_assert_eq!(a, b);
    }
}
