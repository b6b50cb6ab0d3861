use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::anim::{library_clip, AnimationClip, ANIMATIONS};
use super::render::{render_pair, CameraTrack, Embodiment, Obstacle, RenderSettings, Rgb, SceneSpec};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub animations: usize,
    pub cameras: usize,
    /// Number of pairs to render; `None` renders every scene/animation/camera combination.
    pub pairs: Option<usize>,
    pub validation_scenes: usize,
    pub width: usize,
    pub height: usize,
    pub fps: u32,
    pub frames: usize,
    /// Frames in each source animation (at least `frames`).
    pub animation_frames: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scenes: 14,
            animations: 6,
            cameras: 2,
            pairs: Some(72),
            validation_scenes: 2,
            width: 64,
            height: 48,
            fps: 8,
            frames: 24,
            animation_frames: 24,
            seed: crate::rng::DEFAULT_SEED,
        }
    }
}

impl DatasetConfig {
    pub fn combinations(&self) -> usize {
        self.scenes * self.animations * self.cameras
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.unwrap_or_else(|| self.combinations())
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.animations == 0 || self.cameras == 0 {
            return Err(Error::config("scenes, animations and cameras must all be at least 1"));
        }
        if self.animations > ANIMATIONS.len() {
            return Err(Error::config(format!(
                "at most {} animations are available, {} requested",
                ANIMATIONS.len(),
                self.animations
            )));
        }
        if self.pair_count() == 0 || self.pair_count() > self.combinations() {
            return Err(Error::config(format!(
                "pairs must be between 1 and {} combinations, got {}",
                self.combinations(),
                self.pair_count()
            )));
        }
        if self.validation_scenes >= self.scenes {
            return Err(Error::config("at least one scene must remain for training"));
        }
        if self.width == 0 || self.height == 0 || self.fps == 0 || self.frames == 0 {
            return Err(Error::config("resolution, frame rate and clip length must be positive"));
        }
        if self.animation_frames < self.frames {
            return Err(Error::config(format!(
                "animations of {} frames are shorter than the {} frame clips",
                self.animation_frames, self.frames
            )));
        }
        Ok(())
    }

    pub fn settings(&self) -> RenderSettings {
        RenderSettings {
            width: self.width,
            height: self.height,
            fps: self.fps,
            frames: self.frames,
        }
    }

    pub fn is_validation_scene(&self, scene: usize) -> bool {
        scene >= self.scenes - self.validation_scenes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub pair_id: String,
    pub scene: usize,
    pub anim: String,
    pub camera: usize,
    pub split: Split,
    /// Paths relative to the manifest's directory.
    pub human_path: PathBuf,
    pub humanoid_path: PathBuf,
}

impl ManifestRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.pair_id,
            self.scene,
            self.anim,
            self.camera,
            self.split,
            self.human_path.display(),
            self.humanoid_path.display()
        )
    }

    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(format!("expected 7 tab-separated fields, found {}", f.len()));
        }
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
        let split = match f[4] {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(format!("bad split {other:?}")),
        };
        Ok(ManifestRecord {
            pair_id: f[0].to_string(),
            scene: num(f[1], "scene")?,
            anim: f[2].to_string(),
            camera: num(f[3], "camera")?,
            split,
            human_path: PathBuf::from(f[5]),
            humanoid_path: PathBuf::from(f[6]),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| r.to_line() + "\n").collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let r = ManifestRecord::parse(line).map_err(|m| Error::format(path, format!("line {}: {m}", i + 1)))?;
            records.push(r);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { root, records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }
}

fn color(rng: &mut Rng, lo: f32, hi: f32) -> Rgb {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Static part of a scene: palette, texture and obstacles. Every other scene
/// is guaranteed an in-front occluder near the character's start.
pub fn scene_layout(seed: u64, scene: usize) -> (u64, [Rgb; 3], Vec<Obstacle>) {
    let mut rng = substream(seed, "scene", &[scene as u64]);
    let texture_seed = rng.random();
    let palette = [color(&mut rng, 0.25, 0.9), color(&mut rng, 0.25, 0.9), color(&mut rng, 0.1, 0.5)];
    let mut obstacles = Vec::new();
    if rng.random_bool(0.6) {
        let x0 = rng.random_range(-2.5..1.5);
        obstacles.push(Obstacle {
            rect: [x0, 0.0, x0 + rng.random_range(0.4..1.2), rng.random_range(0.5..1.6)],
            color: color(&mut rng, 0.1, 0.7),
            in_front: false,
        });
    }
    if scene.is_multiple_of(2) || rng.random_bool(0.25) {
        let x0 = rng.random_range(-0.7..0.6);
        let y0 = rng.random_range(-0.2..0.6);
        obstacles.push(Obstacle {
            rect: [x0, y0, x0 + rng.random_range(0.25..0.55), y0 + rng.random_range(0.3..0.8)],
            color: color(&mut rng, 0.05, 0.8),
            in_front: true,
        });
    }
    (texture_seed, palette, obstacles)
}

/// Camera `camera` of `scene`, following the animation's root with a
/// per-camera lag, off-centre bias, zoom drift and exposure flicker.
pub fn camera_track(seed: u64, scene: usize, camera: usize, anim: &AnimationClip, frames: usize) -> CameraTrack {
    let mut rng = substream(seed, "camera", &[scene as u64, camera as u64]);
    let follow = if camera.is_multiple_of(2) { 1.0 } else { rng.random_range(0.3..0.7) };
    let bias = rng.random_range(-0.4..0.4);
    let zoom0 = rng.random_range(0.85..1.2);
    let zoom_drift = rng.random_range(-0.15..0.15);
    let gain0 = rng.random_range(0.75..1.25);
    let flicker = rng.random_range(0.0..0.08);
    let jitter = [rng.random_range(-6.0..6.0), rng.random_range(-3.0..3.0)];
    let n = frames.max(1) as f64;
    CameraTrack {
        pan: (0..frames).map(|k| follow * anim.frames[k].root[0] + bias).collect(),
        zoom: (0..frames).map(|k| zoom0 * (1.0 + zoom_drift * k as f64 / n)).collect(),
        gain: (0..frames).map(|k| gain0 * (1.0 + flicker * (k as f64 * 1.7).sin())).collect(),
        jitter,
    }
}

/// `(scene, animation, camera)` for each pair: scenes are visited round-robin
/// and each scene draws its combinations from a seeded permutation.
pub fn assign_pairs(cfg: &DatasetConfig) -> Vec<(usize, usize, usize)> {
    let orders: Vec<Vec<(usize, usize)>> = (0..cfg.scenes)
        .map(|s| {
            let mut combos: Vec<(usize, usize)> = (0..cfg.animations)
                .flat_map(|a| (0..cfg.cameras).map(move |c| (a, c)))
                .collect();
            combos.shuffle(&mut substream(cfg.seed, "combos", &[s as u64]));
            combos
        })
        .collect();
    (0..cfg.pair_count())
        .map(|k| {
            let s = k % cfg.scenes;
            let (a, c) = orders[s][k / cfg.scenes];
            (s, a, c)
        })
        .collect()
}

pub fn scene_spec(cfg: &DatasetConfig, scene: usize, camera: usize, anim: &AnimationClip) -> SceneSpec {
    let (texture_seed, palette, obstacles) = scene_layout(cfg.seed, scene);
    SceneSpec {
        texture_seed,
        palette,
        obstacles,
        camera: camera_track(cfg.seed, scene, camera, anim, cfg.frames),
    }
}

/// Renders every pair into `out` and writes the manifest.
pub fn generate_dataset(cfg: &DatasetConfig, out: &Path, overwrite: bool) -> Result<Manifest> {
    cfg.validate()?;
    let manifest_path = out.join(MANIFEST_FILE);
    if manifest_path.exists() && !overwrite {
        return Err(Error::invalid(format!(
            "{} already exists (pass --overwrite to replace it)",
            manifest_path.display()
        )));
    }
    let clips = out.join("clips");
    std::fs::create_dir_all(&clips).map_err(|e| Error::io(&clips, e))?;
    let anims: Vec<AnimationClip> = ANIMATIONS[..cfg.animations]
        .iter()
        .map(|n| library_clip(n, cfg.fps, cfg.animation_frames))
        .collect::<Result<_>>()?;
    let human = Embodiment::human();
    let humanoid = Embodiment::humanoid();
    let settings = cfg.settings();
    let records = assign_pairs(cfg)
        .into_par_iter()
        .enumerate()
        .map(|(k, (s, a, c))| {
            let scene = scene_spec(cfg, s, c, &anims[a]);
            let pair = render_pair(&anims[a], &scene, &human, &humanoid, &settings, (s, a, c))?;
            let pair_id = format!("pair_{k:04}");
            let human_path = PathBuf::from("clips").join(format!("{pair_id}_human.xhv"));
            let humanoid_path = PathBuf::from("clips").join(format!("{pair_id}_humanoid.xhv"));
            pair.human.write(&out.join(&human_path))?;
            pair.humanoid.write(&out.join(&humanoid_path))?;
            Ok(ManifestRecord {
                pair_id,
                scene: s,
                anim: ANIMATIONS[a].to_string(),
                camera: c,
                split: if cfg.is_validation_scene(s) { Split::Val } else { Split::Train },
                human_path,
                humanoid_path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: out.to_path_buf(),
        records,
    };
    std::fs::write(&manifest_path, manifest.to_text()).map_err(|e| Error::io(&manifest_path, e))?;
    let cfg_path = out.join("dataset.json");
    let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}
