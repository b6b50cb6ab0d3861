use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robotize_core::metrics::{frame_mse_255, psnr_from_mse, score_clip, ssim, ssim_gray};
use robotize_core::VideoClip;

/// Direct per-window SSIM with a 2D Gaussian built from scratch.
fn ssim_brute(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let n = 11;
    let mut k2 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            k2[i * n + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s: f64 = k2.iter().sum();
    k2.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - n {
        for x in 0..=w - n {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let p = (y + i) * w + x + j;
                    ma += k2[i * n + j] * a[p];
                    mb += k2[i * n + j] * b[p];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let p = (y + i) * w + x + j;
                    let g = k2[i * n + j];
                    va += g * (a[p] - ma).powi(2);
                    vb += g * (b[p] - mb).powi(2);
                    cov += g * (a[p] - ma) * (b[p] - mb);
                }
            }
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_brute_force() {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (11 + rng.random_range(0..20), 11 + rng.random_range(0..20));
        let a: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..255.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| (v + rng.random_range(-40.0..40.0)).clamp(0.0, 255.0)).collect();
        let fast = ssim_gray(&a, &b, h, w).unwrap();
        let slow = ssim_brute(&a, &b, h, w);
        assert!((fast - slow).abs() < 1e-9, "seed {seed}: {fast} vs {slow}");
    }
}

#[test]
fn psnr_anchor_points() {
    assert_eq!(psnr_from_mse(65025.0), 0.0);
    assert_eq!(psnr_from_mse(0.0), 100.0);
    assert!((psnr_from_mse(255.0 * 255.0 / 100.0) - 20.0).abs() < 1e-12);
}

#[test]
fn clip_psnr_is_per_frame_mean() {
    let (h, w) = (12, 12);
    let n = h * w * 3;
    let reference = VideoClip::filled(2, h, w, 3, (8, 1), 0.5).unwrap();
    let mut data = vec![0.5f32; 2 * n];
    data[..n].iter_mut().for_each(|v| *v = 0.75);
    let pred = VideoClip::new(2, h, w, 3, (8, 1), data).unwrap();
    let s = score_clip("c", &pred, &reference).unwrap();
    let f0 = psnr_from_mse(63.75f64 * 63.75);
    assert!((s.psnr - (f0 + 100.0) / 2.0).abs() < 1e-9, "{}", s.psnr);
}

proptest! {
    #[test]
    fn halving_error_adds_six_db(k in 1u32..128, len in 3usize..200) {
        // dyadic offsets keep every value exact in f32
        let e = k as f32 / 256.0;
        let reference = vec![0.25f32; len];
        let full: Vec<f32> = reference.iter().enumerate().map(|(i, r)| if i % 3 == 0 { r - e } else { r + e }).collect();
        let half: Vec<f32> = reference.iter().enumerate().map(|(i, r)| if i % 3 == 0 { r - e / 2.0 } else { r + e / 2.0 }).collect();
        let gain = psnr_from_mse(frame_mse_255(&half, &reference)) - psnr_from_mse(frame_mse_255(&full, &reference));
        prop_assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-6);
        prop_assert!((gain - 6.0206).abs() < 1e-4);
    }
}

#[test]
fn negative_of_a_checkerboard_is_dissimilar() {
    let (h, w) = (32, 32);
    let data: Vec<f32> = (0..h * w * 3).map(|i| (((i / 3) % w / 4 + (i / 3) / w / 4) % 2) as f32).collect();
    let neg: Vec<f32> = data.iter().map(|v| 1.0 - v).collect();
    let a = VideoClip::new(1, h, w, 3, (8, 1), data).unwrap();
    let b = VideoClip::new(1, h, w, 3, (8, 1), neg).unwrap();
    assert!(ssim(&a, &b).unwrap() < 0.1);
}

#[test]
fn metrics_are_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mk = |rng: &mut ChaCha8Rng| VideoClip::new(2, 16, 20, 3, (8, 1), (0..2 * 16 * 20 * 3).map(|_| rng.random::<f32>()).collect()).unwrap();
    let (a, b) = (mk(&mut rng), mk(&mut rng));
    let (x, y) = (score_clip("a", &a, &b).unwrap(), score_clip("b", &b, &a).unwrap());
    assert_eq!(x.mse, y.mse);
    assert_eq!(x.psnr, y.psnr);
    assert!((x.ssim - y.ssim).abs() < 1e-12);
}

#[test]
fn aggregate_is_plain_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items: Vec<(String, VideoClip, VideoClip)> = (0..5)
        .map(|i| {
            let a = VideoClip::new(1, 12, 12, 3, (8, 1), (0..432).map(|_| rng.random::<f32>()).collect()).unwrap();
            let b = VideoClip::new(1, 12, 12, 3, (8, 1), (0..432).map(|_| rng.random::<f32>()).collect()).unwrap();
            (format!("c{i}"), a, b)
        })
        .collect();
    let r = robotize_core::metrics::evaluate_pairs(&items).unwrap();
    let hand: f64 = r.clips.iter().map(|c| c.psnr).sum::<f64>() / 5.0;
    assert!((r.mean_psnr - hand).abs() < 1e-12);
    assert_eq!(r.clips.iter().map(|c| c.clip_id.as_str()).collect::<Vec<_>>(), ["c0", "c1", "c2", "c3", "c4"]);
}
