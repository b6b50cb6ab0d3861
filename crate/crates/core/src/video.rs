//! `VideoClip` and its on-disk containers.
//!
//! XHV1 layout: `"XHV1"`, then u32 little-endian `T, H, W, C, fps_num,
//! fps_den`, then `T*H*W*C` f32 little-endian samples in `[0, 1]`, frame-major
//! with `(y, x, channel)` order inside a frame.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CLIP_MAGIC: &[u8; 4] = b"XHV1";

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    fps: (u32, u32),
    data: Vec<f32>,
}

impl VideoClip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        fps: (u32, u32),
        data: Vec<f32>,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "clip extents must be positive, got T={frames} H={height} W={width} C={channels}"
            )));
        }
        if fps.0 == 0 || fps.1 == 0 {
            return Err(Error::invalid(format!("frame rate {}/{} is not positive", fps.0, fps.1)));
        }
        let n = frames * height * width * channels;
        if data.len() != n {
            return Err(Error::shape(format!(
                "clip {frames}x{height}x{width}x{channels} needs {n} samples, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("clip sample {bad} lies outside [0, 1]")));
        }
        Ok(VideoClip {
            frames,
            height,
            width,
            channels,
            fps,
            data,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, channels: usize, fps: (u32, u32), value: f32) -> Result<Self> {
        Self::new(frames, height, width, channels, fps, vec![value; frames * height * width * channels])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn fps(&self) -> (u32, u32) {
        self.fps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// (T, H, W, C)
    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(t, y, x, c)]
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::shape(format!(
                "frame window [{start}, {}) exceeds clip length {}",
                start + len,
                self.frames
            )));
        }
        let n = self.frame_len();
        Ok(VideoClip {
            frames: len,
            data: self.data[start * n..(start + len) * n].to_vec(),
            ..*self
        })
    }

    pub fn same_layout(&self, other: &VideoClip) -> bool {
        self.dims() == other.dims()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.data.len() * 4);
        out.extend_from_slice(CLIP_MAGIC);
        for v in [
            self.frames as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            self.fps.0,
            self.fps.1,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 28 || &bytes[..4] != CLIP_MAGIC {
            return Err(Error::format(origin, "missing XHV1 header"));
        }
        let word = |i: usize| {
            let o = 4 + 4 * i;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
        };
        let (t, h, w, c) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3) as usize);
        let fps = (word(4), word(5));
        let n = t
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::format(origin, "clip extents overflow"))?;
        if bytes.len() != 28 + n * 4 {
            return Err(Error::format(
                origin,
                format!("expected {} payload bytes for {t}x{h}x{w}x{c}, found {}", n * 4, bytes.len() - 28),
            ));
        }
        let data = bytes[28..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        VideoClip::new(t, h, w, c, fps, data).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Writes one binary PPM (P6) per frame as `<prefix>_<index>.ppm`.
    /// Single-channel clips are replicated to grey RGB.
    pub fn export_ppm(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let path = dir.join(format!("{prefix}_{t:04}.ppm"));
            let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
            for y in 0..self.height {
                for x in 0..self.width {
                    for c in 0..3 {
                        let ch = if self.channels >= 3 { c } else { 0 };
                        let v = self.get(t, y, x, ch);
                        buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip(t: usize, h: usize, w: usize, c: usize, seed: u32) -> VideoClip {
        let n = t * h * w * c;
        let data = (0..n)
            .map(|i| ((i as u32).wrapping_mul(2_654_435_761).wrapping_add(seed) % 1000) as f32 / 999.0)
            .collect();
        VideoClip::new(t, h, w, c, (8, 1), data).unwrap()
    }

    #[test]
    fn header_layout() {
        let b = clip(2, 3, 4, 3, 0).to_bytes();
        assert_eq!(&b[..4], b"XHV1");
        let words: Vec<u32> = (0..6)
            .map(|i| u32::from_le_bytes(b[4 + 4 * i..8 + 4 * i].try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![2, 3, 4, 3, 8, 1]);
        assert_eq!(b.len(), 28 + 2 * 3 * 4 * 3 * 4);
    }

    #[test]
    fn rejects_out_of_range_and_truncated() {
        assert!(VideoClip::new(1, 1, 1, 1, (1, 1), vec![1.5]).is_err());
        let b = clip(1, 2, 2, 3, 1).to_bytes();
        assert!(VideoClip::from_bytes(&b[..b.len() - 4], Path::new("x")).is_err());
    }

    #[test]
    fn ppm_export_writes_p6_frames() {
        let dir = tempfile::tempdir().unwrap();
        let c = clip(3, 4, 5, 3, 2);
        let paths = c.export_ppm(dir.path(), "f").unwrap();
        assert_eq!(paths.len(), 3);
        let bytes = std::fs::read(&paths[1]).unwrap();
        assert!(bytes.starts_with(b"P6\n5 4\n255\n"));
        assert_eq!(bytes.len(), b"P6\n5 4\n255\n".len() + 4 * 5 * 3);
    }

    proptest! {
        #[test]
        fn xhv_round_trip_is_bit_exact(t in 1usize..4, h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u32>()) {
            let a = clip(t, h, w, c, seed);
            let b = VideoClip::from_bytes(&a.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(a.to_bytes(), b.to_bytes());
        }
    }
}
