//! Lossless spatio-temporal patchifier.
//!
//! A clip of extents `(T, H, W, C)` is cut into non-overlapping `(pt, ph, pw)`
//! patches. Token `k` holds the voxels of one patch flattened in
//! `(dt, dy, dx, c)` order, and tokens are laid out in `(t, h, w)` raster order
//! over the patch lattice.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::video::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

impl PatchSpec {
    pub fn new(pt: usize, ph: usize, pw: usize) -> Self {
        PatchSpec { pt, ph, pw }
    }

    pub fn voxels(&self) -> usize {
        self.pt * self.ph * self.pw
    }

    pub fn token_dim(&self, channels: usize) -> usize {
        self.voxels() * channels
    }

    /// Checks that the patch tiles `(frames, height, width)` exactly.
    pub fn check_divides(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        if self.pt == 0 || self.ph == 0 || self.pw == 0 {
            return Err(Error::invalid(format!("patch extents must be positive, got {self:?}")));
        }
        if !frames.is_multiple_of(self.pt) || !height.is_multiple_of(self.ph) || !width.is_multiple_of(self.pw) {
            return Err(Error::shape(format!(
                "clip extents T={frames} H={height} W={width} must be divisible by the patch (pt={}, ph={}, pw={})",
                self.pt, self.ph, self.pw
            )));
        }
        Ok(())
    }
}

/// Position of a token on the `(t, h, w)` patch lattice.
pub type Position = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    tokens: Tensor<f32>,
    positions: Vec<Position>,
    patch: PatchSpec,
    channels: usize,
    /// Lattice extents (nt, nh, nw) covered by this grid.
    lattice: [usize; 3],
    /// Lattice index of the first temporal row.
    t_offset: usize,
    fps: (u32, u32),
}

impl TokenGrid {
    fn raster_positions(lattice: [usize; 3], t_offset: usize) -> Vec<Position> {
        let [nt, nh, nw] = lattice;
        let mut out = Vec::with_capacity(nt * nh * nw);
        for t in 0..nt {
            for h in 0..nh {
                for w in 0..nw {
                    out.push([t + t_offset, h, w]);
                }
            }
        }
        out
    }

    pub fn tokens(&self) -> &Tensor<f32> {
        &self.tokens
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn patch(&self) -> PatchSpec {
        self.patch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn lattice(&self) -> [usize; 3] {
        self.lattice
    }

    pub fn t_offset(&self) -> usize {
        self.t_offset
    }

    pub fn fps(&self) -> (u32, u32) {
        self.fps
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn dim(&self) -> usize {
        self.patch.token_dim(self.channels)
    }

    /// Tokens per temporal lattice row.
    pub fn row_len(&self) -> usize {
        self.lattice[1] * self.lattice[2]
    }

    /// Same lattice, different token values (e.g. noise or a model prediction).
    pub fn with_tokens(&self, tokens: Tensor<f32>) -> Result<Self> {
        if tokens.shape() != self.tokens.shape() {
            return Err(Error::shape(format!(
                "replacement tokens {:?} do not match grid {:?}",
                tokens.shape(),
                self.tokens.shape()
            )));
        }
        Ok(TokenGrid {
            tokens,
            ..self.clone()
        })
    }

    /// True when both grids cover the same positions with the same patch layout.
    pub fn same_lattice(&self, other: &TokenGrid) -> bool {
        self.patch == other.patch
            && self.channels == other.channels
            && self.lattice == other.lattice
            && self.t_offset == other.t_offset
    }

    /// Temporal rows `[start, start + rows)` of the lattice (positions keep
    /// their absolute time index).
    pub fn time_window(&self, start: usize, rows: usize) -> Result<Self> {
        if rows == 0 || start + rows > self.lattice[0] {
            return Err(Error::shape(format!(
                "temporal rows [{start}, {}) exceed lattice extent {}",
                start + rows,
                self.lattice[0]
            )));
        }
        let per = self.row_len();
        let dim = self.dim();
        let data = self.tokens.data()[start * per * dim..(start + rows) * per * dim].to_vec();
        let lattice = [rows, self.lattice[1], self.lattice[2]];
        Ok(TokenGrid {
            tokens: Tensor::new(vec![rows * per, dim], data)?,
            positions: self.positions[start * per..(start + rows) * per].to_vec(),
            lattice,
            t_offset: self.t_offset + start,
            ..self.clone()
        })
    }

    /// Joins consecutive temporal windows back into one grid.
    pub fn concat_time(parts: &[TokenGrid]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("no grids to join"))?;
        let mut data = Vec::new();
        let mut positions = Vec::new();
        let mut rows = 0;
        for p in parts {
            let contiguous = p.t_offset == first.t_offset + rows;
            if p.patch != first.patch
                || p.channels != first.channels
                || p.lattice[1..] != first.lattice[1..]
                || !contiguous
            {
                return Err(Error::shape("grids to join must be contiguous windows of one lattice"));
            }
            data.extend_from_slice(p.tokens.data());
            positions.extend_from_slice(&p.positions);
            rows += p.lattice[0];
        }
        let lattice = [rows, first.lattice[1], first.lattice[2]];
        Ok(TokenGrid {
            tokens: Tensor::new(vec![positions.len(), first.dim()], data)?,
            positions,
            lattice,
            ..first.clone()
        })
    }
}

/// Rearranges a clip into patch tokens.
pub fn encode(clip: &VideoClip, patch: PatchSpec) -> Result<TokenGrid> {
    let [t, h, w, c] = clip.dims();
    patch.check_divides(t, h, w)?;
    let lattice = [t / patch.pt, h / patch.ph, w / patch.pw];
    let dim = patch.token_dim(c);
    let count = lattice.iter().product::<usize>();
    let src = clip.data();
    let mut data = Vec::with_capacity(count * dim);
    for lt in 0..lattice[0] {
        for lh in 0..lattice[1] {
            for lw in 0..lattice[2] {
                for dt in 0..patch.pt {
                    for dy in 0..patch.ph {
                        let base = clip.index(lt * patch.pt + dt, lh * patch.ph + dy, lw * patch.pw, 0);
                        data.extend_from_slice(&src[base..base + patch.pw * c]);
                    }
                }
            }
        }
    }
    Ok(TokenGrid {
        tokens: Tensor::new(vec![count, dim], data)?,
        positions: TokenGrid::raster_positions(lattice, 0),
        patch,
        channels: c,
        lattice,
        t_offset: 0,
        fps: clip.fps(),
    })
}

fn scatter(grid: &TokenGrid, tokens: &[f32], clamp: bool) -> Result<VideoClip> {
    let dim = grid.dim();
    let count = grid.lattice.iter().product::<usize>();
    if tokens.len() != count * dim || grid.tokens.shape() != [count, dim] {
        return Err(Error::shape(format!(
            "token matrix {:?} is inconsistent with patch {:?} x {} channels on lattice {:?} (expected [{count}, {dim}])",
            grid.tokens.shape(),
            grid.patch,
            grid.channels,
            grid.lattice
        )));
    }
    let p = grid.patch;
    let c = grid.channels;
    let (t, h, w) = (grid.lattice[0] * p.pt, grid.lattice[1] * p.ph, grid.lattice[2] * p.pw);
    let mut data = vec![0.0f32; t * h * w * c];
    let mut k = 0;
    for lt in 0..grid.lattice[0] {
        for lh in 0..grid.lattice[1] {
            for lw in 0..grid.lattice[2] {
                for dt in 0..p.pt {
                    for dy in 0..p.ph {
                        let y = lh * p.ph + dy;
                        let base = (((lt * p.pt + dt) * h + y) * w + lw * p.pw) * c;
                        let run = &tokens[k..k + p.pw * c];
                        data[base..base + p.pw * c].copy_from_slice(run);
                        k += p.pw * c;
                    }
                }
            }
        }
    }
    if clamp {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
    }
    VideoClip::new(t, h, w, c, grid.fps, data)
}

/// Exact inverse of [`encode`].
pub fn decode(grid: &TokenGrid) -> Result<VideoClip> {
    scatter(grid, grid.tokens.data(), false)
}

/// Like [`decode`] but clamps samples into `[0, 1]`, for model predictions.
pub fn decode_clamped(grid: &TokenGrid) -> Result<VideoClip> {
    scatter(grid, grid.tokens.data(), true)
}

/// Shortest and longest wavelength, in lattice steps, of the embedding bands.
pub const MIN_PERIOD: f64 = 3.0;
pub const MAX_PERIOD: f64 = 64.0;

/// Factorised sinusoidal embedding of `(t, h, w)` triples.
///
/// Each axis gets `dim / 3` channels: `dim / 6` sines followed by `dim / 6`
/// cosines whose wavelengths run geometrically from [`MIN_PERIOD`] to
/// [`MAX_PERIOD`] lattice steps. Short wavelengths keep neighbouring positions
/// distinguishable on the small lattices used here. The result only depends on
/// the triple.
pub fn positional_embedding<S: Scalar>(positions: &[Position], dim: usize) -> Result<Tensor<S>> {
    if dim == 0 || !dim.is_multiple_of(6) {
        return Err(Error::invalid(format!(
            "positional embedding dim must be a positive multiple of 6, got {dim}"
        )));
    }
    if positions.is_empty() {
        return Err(Error::invalid("positional embedding of zero positions"));
    }
    let bands = dim / 6;
    let (hi, lo) = (std::f64::consts::TAU / MIN_PERIOD, std::f64::consts::TAU / MAX_PERIOD);
    let freqs: Vec<f64> = (0..bands)
        .map(|j| if bands == 1 { hi } else { hi * (lo / hi).powf(j as f64 / (bands - 1) as f64) })
        .collect();
    let mut data = Vec::with_capacity(positions.len() * dim);
    for pos in positions {
        for &p in pos {
            let p = p as f64;
            data.extend(freqs.iter().map(|f| S::of((p * f).sin())));
            data.extend(freqs.iter().map(|f| S::of((p * f).cos())));
        }
    }
    Tensor::new(vec![positions.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;
    use std::collections::HashSet;

    fn random_clip(t: usize, h: usize, w: usize, c: usize, seed: u64) -> VideoClip {
        let mut rng = substream(seed, "codec", &[]);
        let data = (0..t * h * w * c).map(|_| rng.random::<f32>()).collect();
        VideoClip::new(t, h, w, c, (8, 1), data).unwrap()
    }

    #[test]
    fn token_count_and_dim() {
        let g = encode(&random_clip(8, 32, 32, 3, 1), PatchSpec::new(2, 4, 4)).unwrap();
        assert_eq!(g.count(), 4 * 8 * 8);
        assert_eq!(g.count(), 256);
        assert_eq!(g.dim(), 96);
        assert_eq!(g.tokens().shape(), &[256, 96]);
    }

    #[test]
    fn constant_clip_gives_identical_tokens() {
        let clip = VideoClip::filled(4, 8, 8, 3, (8, 1), 0.25).unwrap();
        let g = encode(&clip, PatchSpec::new(2, 4, 4)).unwrap();
        let first = &g.tokens().data()[..g.dim()];
        for k in 0..g.count() {
            assert_eq!(&g.tokens().data()[k * g.dim()..(k + 1) * g.dim()], first);
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for seed in 0..50 {
            let clip = random_clip(4, 8, 12, 3, seed);
            let g = encode(&clip, PatchSpec::new(2, 4, 3)).unwrap();
            let back = decode(&g).unwrap();
            assert_eq!(back.to_bytes(), clip.to_bytes());
            let again = encode(&back, PatchSpec::new(2, 4, 3)).unwrap();
            assert_eq!(again, g);
        }
    }

    #[test]
    fn single_token_grid_is_the_clip() {
        let clip = random_clip(2, 4, 4, 3, 3);
        let g = encode(&clip, PatchSpec::new(2, 4, 4)).unwrap();
        assert_eq!(g.count(), 1);
        assert_eq!(g.tokens().data(), clip.data());
        assert_eq!(decode(&g).unwrap(), clip);
    }

    #[test]
    fn token_holds_its_patch_voxels() {
        let clip = random_clip(4, 8, 8, 3, 9);
        let p = PatchSpec::new(2, 4, 4);
        let g = encode(&clip, p).unwrap();
        // token at lattice (1, 1, 0), voxel (dt=1, dy=2, dx=3, c=2)
        let k = (8 / 4) * (8 / 4) + 2;
        let off = ((4 + 2) * 4 + 3) * 3 + 2;
        assert_eq!(g.positions()[k], [1, 1, 0]);
        assert_eq!(g.tokens().at(&[k, off]), clip.get(3, 6, 3, 2));
    }

    #[test]
    fn non_divisible_extents_are_rejected() {
        let err = encode(&random_clip(3, 8, 8, 3, 0), PatchSpec::new(2, 4, 4)).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn mismatched_dim_is_rejected() {
        let g = encode(&random_clip(2, 4, 4, 3, 0), PatchSpec::new(2, 2, 2)).unwrap();
        let mut bad = g.clone();
        bad.patch = PatchSpec::new(2, 2, 4);
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn windows_keep_absolute_time_and_rejoin() {
        let clip = random_clip(8, 4, 4, 3, 5);
        let g = encode(&clip, PatchSpec::new(2, 2, 2)).unwrap();
        let w = g.time_window(1, 2).unwrap();
        assert_eq!(w.positions()[0], [1, 0, 0]);
        assert_eq!(decode(&w).unwrap(), clip.window(2, 4).unwrap());
        let parts = [g.time_window(0, 1).unwrap(), g.time_window(1, 3).unwrap()];
        assert_eq!(TokenGrid::concat_time(&parts).unwrap(), g);
    }

    #[test]
    fn zero_position_embedding_is_zero_phase() {
        let e = positional_embedding::<f64>(&[[0, 0, 0]], 12).unwrap();
        let expected = [0.0, 0.0, 1.0, 1.0].repeat(3);
        assert_eq!(e.data(), expected.as_slice());
    }

    #[test]
    fn embedding_depends_only_on_the_triple() {
        let a = positional_embedding::<f32>(&[[3, 1, 2], [0, 5, 5]], 24).unwrap();
        let b = positional_embedding::<f32>(&[[0, 5, 5], [3, 1, 2]], 24).unwrap();
        assert_eq!(&a.data()[..24], &b.data()[24..]);
    }

    #[test]
    fn embeddings_are_distinct_over_a_lattice() {
        let positions = TokenGrid::raster_positions([4, 8, 8], 0);
        let e = positional_embedding::<f64>(&positions, 24).unwrap();
        let mut seen = HashSet::new();
        for k in 0..positions.len() {
            let key: Vec<u64> = e.data()[k * 24..(k + 1) * 24].iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(key), "duplicate embedding at {:?}", positions[k]);
        }
    }

    #[test]
    fn embedding_dim_must_be_multiple_of_six() {
        assert!(positional_embedding::<f32>(&[[0, 0, 0]], 128).is_err());
    }

    #[test]
    fn random_access_round_trip() {
        let mut rng = substream(1, "codec-shapes", &[]);
        for seed in 0..10 {
            let pt = rng.random_range(1..3);
            let ph = rng.random_range(1..4);
            let pw = rng.random_range(1..4);
            let clip = random_clip(pt * 2, ph * 3, pw * 2, 3, seed);
            let g = encode(&clip, PatchSpec::new(pt, ph, pw)).unwrap();
            assert_eq!(decode(&g).unwrap(), clip);
        }
    }
}
