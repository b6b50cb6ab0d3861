//! Frame-level PSNR and SSIM on 8-bit scaled values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::VideoClip;

/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const PEAK: f64 = 255.0;

fn check_pair(a: &VideoClip, b: &VideoClip) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("cannot compare clips of shape {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared error of two equally sized frames after scaling to `[0, 255]`.
pub fn frame_mse_255(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "frame lengths differ");
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x as f64 - *y as f64) * PEAK;
            d * d
        })
        .sum();
    s / a.len() as f64
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP)
    }
}

/// Normalised 1D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Channel-mean grayscale in `[0, 255]` of an interleaved frame.
pub fn gray_255(frame: &[f32], channels: usize) -> Vec<f64> {
    frame
        .chunks_exact(channels)
        .map(|p| p.iter().map(|v| *v as f64).sum::<f64>() / channels as f64 * PEAK)
        .collect()
}

/// Valid-mode separable filtering of an `h x w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let r = &img[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&r[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two grayscale `h x w` images over all valid 11x11 windows.
pub fn ssim_gray(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let c1 = (K1 * PEAK).powi(2);
    let c2 = (K2 * PEAK).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean squared error over every voxel of two clips on the `[0, 255]` scale.
pub fn mse_255(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_pair(a, b)?;
    Ok(frame_mse_255(a.data(), b.data()))
}

/// Mean of per-frame PSNR.
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.frames();
    Ok((0..n).map(|t| psnr_from_mse(frame_mse_255(a.frame(t), b.frame(t)))).sum::<f64>() / n as f64)
}

/// Mean of per-frame SSIM on channel-mean grayscale.
pub fn ssim(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_pair(a, b)?;
    let [n, h, w, c] = a.dims();
    let mut total = 0.0;
    for t in 0..n {
        total += ssim_gray(&gray_255(a.frame(t), c), &gray_255(b.frame(t), c), h, w)?;
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip_id: String,
    /// Mean of per-frame PSNR in dB.
    pub psnr: f64,
    /// Mean of per-frame SSIM.
    pub ssim: f64,
    /// Mean squared error on the 8-bit scale over the whole clip.
    pub mse: f64,
}

pub fn score_clip(clip_id: &str, pred: &VideoClip, reference: &VideoClip) -> Result<ClipScore> {
    Ok(ClipScore {
        clip_id: clip_id.to_string(),
        psnr: psnr(pred, reference)?,
        ssim: ssim(pred, reference)?,
        mse: mse_255(pred, reference)?,
    })
}

/// Metric constants echoed into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub peak: f64,
    pub psnr_cap: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub grayscale: String,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            peak: PEAK,
            psnr_cap: PSNR_CAP,
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            k1: K1,
            k2: K2,
            grayscale: "channel-mean".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_mse: f64,
    pub frames: usize,
    pub metrics: MetricConfig,
    /// Seconds since the Unix epoch when the report was assembled.
    pub timestamp: u64,
}

impl EvalReport {
    /// Aggregates per-clip scores with equal clip weights.
    pub fn new(clips: Vec<ClipScore>, frames: usize) -> Self {
        let n = clips.len().max(1) as f64;
        let mean = |f: fn(&ClipScore) -> f64| clips.iter().map(f).sum::<f64>() / n;
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        EvalReport {
            mean_psnr: mean(|c| c.psnr),
            mean_ssim: mean(|c| c.ssim),
            mean_mse: mean(|c| c.mse),
            clips,
            frames,
            metrics: MetricConfig::default(),
            timestamp,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip_id,psnr,ssim,mse\n");
        for c in &self.clips {
            s += &format!("{},{:.6},{:.6},{:.6}\n", c.clip_id, c.psnr, c.ssim, c.mse);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str, origin: &std::path::Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))
    }
}

/// Scores `(id, prediction, reference)` triples in parallel; output keeps input order.
pub fn evaluate_pairs(items: &[(String, VideoClip, VideoClip)]) -> Result<EvalReport> {
    use rayon::prelude::*;
    let clips = items
        .par_iter()
        .map(|(id, p, r)| score_clip(id, p, r))
        .collect::<Result<Vec<_>>>()?;
    let frames = items.iter().map(|(_, p, _)| p.frames()).sum();
    Ok(EvalReport::new(clips, frames))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(data: Vec<f32>, h: usize, w: usize) -> VideoClip {
        let frames = data.len() / (h * w * 3);
        VideoClip::new(frames, h, w, 3, (8, 1), data).unwrap()
    }

    #[test]
    fn identical_clips_hit_the_caps() {
        let a = clip((0..2 * 16 * 16 * 3).map(|i| (i % 7) as f32 / 7.0).collect(), 16, 16);
        let s = score_clip("a", &a, &a).unwrap();
        assert_eq!(s.psnr, PSNR_CAP);
        assert!((s.ssim - 1.0).abs() < 1e-12);
        assert_eq!(s.mse, 0.0);
    }

    #[test]
    fn black_against_white_is_zero_db() {
        let a = clip(vec![0.0; 16 * 16 * 3], 16, 16);
        let b = clip(vec![1.0; 16 * 16 * 3], 16, 16);
        let s = score_clip("x", &a, &b).unwrap();
        assert_eq!(s.mse, 65025.0);
        assert_eq!(s.psnr, 0.0);
    }

    #[test]
    fn small_frames_and_shape_mismatch_are_errors() {
        let a = clip(vec![0.5; 8 * 8 * 3], 8, 8);
        assert!(score_clip("s", &a, &a).is_err());
        let b = clip(vec![0.5; 16 * 16 * 3], 16, 16);
        assert!(score_clip("s", &a, &b).is_err());
    }

    #[test]
    fn kernel_is_normalised_and_symmetric() {
        let k = gaussian_kernel(11, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(k[i], k[10 - i]);
        }
    }

    #[test]
    fn csv_layout() {
        let r = EvalReport::new(vec![ClipScore { clip_id: "p".into(), psnr: 30.0, ssim: 0.9, mse: 1.0 }], 4);
        assert_eq!(r.to_csv(), "clip_id,psnr,ssim,mse\np,30.000000,0.900000,1.000000\n");
        assert_eq!(r.mean_psnr, 30.0);
        let back = EvalReport::from_json(&r.to_json(), std::path::Path::new("r.json")).unwrap();
        assert_eq!(back, r);
    }
}
