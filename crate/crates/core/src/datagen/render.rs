//! Hard-edged side-view rasterizer for paired clips.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::anim::{bake, retarget, AnimationClip, RetargetMap};
use super::skeleton::{canonical_skeleton, Point, Skeleton};
use crate::error::{Error, Result};
use crate::video::VideoClip;

pub type Rgb = [f32; 3];

/// Vertical extent (world units) framed by the camera at zoom 1.
const VIEW_HEIGHT: f64 = 2.6;
/// World height the camera centres on.
const VIEW_CENTER_Y: f64 = 0.95;
/// Resolution at which pixel widths are specified.
const REFERENCE_HEIGHT: f64 = 48.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoneStyle {
    /// Half-width in pixels at zoom 1 and the reference resolution.
    pub half_width: f64,
    pub color: Rgb,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum HeadShape {
    /// Radius in world units.
    Circle(f64),
    /// Half side in world units.
    Box(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStyle {
    pub shape: HeadShape,
    pub color: Rgb,
    /// Optional visor stripe across the upper half.
    pub accent: Option<Rgb>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embodiment {
    pub id: String,
    /// Style of the bone ending at each joint, by joint name.
    pub bones: BTreeMap<String, BoneStyle>,
    pub head: HeadStyle,
    pub retarget: RetargetMap,
    /// Bone length multipliers relative to the canonical skeleton.
    pub length_scale: BTreeMap<String, f64>,
}

/// Fixed paint order: far limbs, torso, head, near limbs.
const PAINT_ORDER: &[&str] = &[
    "l_knee", "l_ankle", "l_toe", "l_elbow", "l_wrist", "chest", "neck", "r_knee", "r_ankle", "r_toe", "r_elbow", "r_wrist",
];

fn shade(c: Rgb, k: f32) -> Rgb {
    [c[0] * k, c[1] * k, c[2] * k]
}

impl Embodiment {
    pub fn human() -> Self {
        let skin = [0.93, 0.74, 0.6];
        let shirt = [0.85, 0.3, 0.25];
        let pants = [0.2, 0.25, 0.5];
        let shoe = [0.15, 0.1, 0.08];
        Self::build(
            "human",
            &[
                ("chest", 3.2, shirt),
                ("neck", 1.2, skin),
                ("elbow", 1.4, shirt),
                ("wrist", 1.1, skin),
                ("knee", 1.8, pants),
                ("ankle", 1.5, pants),
                ("toe", 1.0, shoe),
            ],
            HeadStyle {
                shape: HeadShape::Circle(0.13),
                color: skin,
                accent: None,
            },
            &[],
        )
    }

    pub fn humanoid() -> Self {
        let shell = [0.9, 0.92, 0.95];
        let joint = [0.3, 0.32, 0.36];
        Self::build(
            "humanoid",
            &[
                ("chest", 3.8, shell),
                ("neck", 1.0, joint),
                ("elbow", 1.7, shell),
                ("wrist", 1.3, joint),
                ("knee", 2.1, shell),
                ("ankle", 1.8, joint),
                ("toe", 1.2, joint),
            ],
            HeadStyle {
                shape: HeadShape::Box(0.12),
                color: shell,
                accent: Some([0.1, 0.75, 0.95]),
            },
            &[
                ("chest", 1.08),
                ("neck", 0.7),
                ("l_elbow", 1.1),
                ("r_elbow", 1.1),
                ("l_wrist", 1.05),
                ("r_wrist", 1.05),
                ("l_knee", 0.95),
                ("r_knee", 0.95),
                ("l_ankle", 0.97),
                ("r_ankle", 0.97),
            ],
        )
    }

    fn build(id: &str, styles: &[(&str, f64, Rgb)], head: HeadStyle, scale: &[(&str, f64)]) -> Self {
        let canon = canonical_skeleton();
        let mut bones = BTreeMap::new();
        for name in canon.names().skip(1).filter(|n| *n != "head") {
            let suffix = name.rsplit('_').next().unwrap_or(name);
            let (_, hw, color) = styles.iter().find(|(k, _, _)| *k == suffix).copied().expect("style for every bone");
            // far side drawn slightly darker
            let color = if name.starts_with("l_") { shade(color, 0.78) } else { color };
            bones.insert(name.to_string(), BoneStyle { half_width: hw, color });
        }
        Embodiment {
            id: id.to_string(),
            bones,
            head,
            retarget: RetargetMap::identity(&canon),
            length_scale: scale.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    /// Checks the retarget map covers the canonical joint set.
    pub fn validate(&self) -> Result<()> {
        let canon = canonical_skeleton();
        for n in canon.names() {
            if !self.retarget.joints.contains_key(n) {
                return Err(Error::invalid(format!("embodiment {}: unmapped joint: {n}", self.id)));
            }
        }
        Ok(())
    }

    /// The embodiment's skeleton, standing on the ground line.
    pub fn skeleton(&self) -> Result<Skeleton> {
        let mut s = canonical_skeleton().scaled(&self.length_scale)?;
        s.root_position = [0.0, s.leg_length()];
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    /// World-space rectangle `[x0, y0, x1, y1]`.
    pub rect: [f64; 4],
    pub color: Rgb,
    pub in_front: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraTrack {
    /// World x the camera centres on, per frame.
    pub pan: Vec<f64>,
    pub zoom: Vec<f64>,
    /// Multiplicative exposure, per frame.
    pub gain: Vec<f64>,
    /// Off-centre framing in pixels at the reference resolution.
    pub jitter: [f64; 2],
}

impl CameraTrack {
    pub fn steady(frames: usize, pan: f64, zoom: f64, gain: f64) -> Self {
        CameraTrack {
            pan: vec![pan; frames],
            zoom: vec![zoom; frames],
            gain: vec![gain; frames],
            jitter: [0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub texture_seed: u64,
    /// Wall colours A and B, then the ground colour.
    pub palette: [Rgb; 3],
    pub obstacles: Vec<Obstacle>,
    pub camera: CameraTrack,
}

/// Obstacles must lie inside this world box.
pub const WORLD_BOUNDS: [f64; 4] = [-20.0, -2.0, 20.0, 6.0];

impl SceneSpec {
    pub fn validate(&self, frames: usize) -> Result<()> {
        let c = &self.camera;
        if c.pan.len() < frames || c.zoom.len() < frames || c.gain.len() < frames {
            return Err(Error::invalid(format!("camera track is shorter than {frames} frames")));
        }
        if let Some(z) = c.zoom.iter().find(|z| !(**z > 0.0 && z.is_finite())) {
            return Err(Error::invalid(format!("zoom factor {z} must be positive")));
        }
        if let Some(g) = c.gain.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            return Err(Error::invalid(format!("exposure gain {g} must be non-negative")));
        }
        for o in &self.obstacles {
            let [x0, y0, x1, y1] = o.rect;
            let [bx0, by0, bx1, by1] = WORLD_BOUNDS;
            if !(x0 < x1 && y0 < y1 && x0 >= bx0 && x1 <= bx1 && y0 >= by0 && y1 <= by1) {
                return Err(Error::invalid(format!("obstacle {:?} is empty or outside the world bounds", o.rect)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub width: usize,
    pub height: usize,
    pub fps: u32,
    pub frames: usize,
}

/// World-to-pixel mapping for one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct View {
    pub scale: f64,
    pub cx: f64,
    pub cy: f64,
    pub pan: f64,
}

impl View {
    pub fn new(scene: &SceneSpec, settings: &RenderSettings, frame: usize) -> Self {
        let r = settings.height as f64 / REFERENCE_HEIGHT;
        View {
            scale: settings.height as f64 / VIEW_HEIGHT * scene.camera.zoom[frame],
            cx: settings.width as f64 / 2.0 + scene.camera.jitter[0] * r,
            cy: settings.height as f64 / 2.0 + scene.camera.jitter[1] * r,
            pan: scene.camera.pan[frame],
        }
    }

    pub fn to_screen(&self, p: Point) -> Point {
        [self.cx + (p[0] - self.pan) * self.scale, self.cy - (p[1] - VIEW_CENTER_Y) * self.scale]
    }

    pub fn to_world(&self, s: Point) -> Point {
        [self.pan + (s[0] - self.cx) / self.scale, VIEW_CENTER_Y - (s[1] - self.cy) / self.scale]
    }
}

fn hash01(seed: u64, x: i64, y: i64) -> f64 {
    let mut h = seed ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in `[0, 1]`.
pub fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (xf, yf) = (x.floor(), y.floor());
    let (ix, iy) = (xf as i64, yf as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (u, v) = (s(x - xf), s(y - yf));
    let a = hash01(seed, ix, iy);
    let b = hash01(seed, ix + 1, iy);
    let c = hash01(seed, ix, iy + 1);
    let d = hash01(seed, ix + 1, iy + 1);
    let top = a + (b - a) * u;
    let bot = c + (d - c) * u;
    top + (bot - top) * v
}

fn background(scene: &SceneSpec, w: Point) -> Rgb {
    let [a, b, ground] = scene.palette;
    if w[1] < 0.0 {
        let n = value_noise(scene.texture_seed ^ 0x51, w[0] * 3.0, w[1] * 3.0) as f32;
        shade(ground, 0.8 + 0.35 * n)
    } else {
        let n = (0.7 * value_noise(scene.texture_seed, w[0] * 1.2, w[1] * 1.2)
            + 0.3 * value_noise(scene.texture_seed ^ 0x77, w[0] * 4.0, w[1] * 4.0)) as f32;
        [a[0] + (b[0] - a[0]) * n, a[1] + (b[1] - a[1]) * n, a[2] + (b[2] - a[2]) * n]
    }
}

/// One filled screen-space primitive of a character.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Capsule { a: Point, b: Point, radius: f64, color: Rgb },
    Disc { c: Point, radius: f64, color: Rgb },
    Rect { min: Point, max: Point, color: Rgb },
}

fn seg_dist2(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    qx * qx + qy * qy
}

impl Primitive {
    pub fn color(&self) -> Rgb {
        match self {
            Primitive::Capsule { color, .. } | Primitive::Disc { color, .. } | Primitive::Rect { color, .. } => *color,
        }
    }

    pub fn covers(&self, p: Point) -> bool {
        match *self {
            Primitive::Capsule { a, b, radius, .. } => seg_dist2(p, a, b) <= radius * radius,
            Primitive::Disc { c, radius, .. } => {
                let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                dx * dx + dy * dy <= radius * radius
            }
            Primitive::Rect { min, max, .. } => p[0] >= min[0] && p[0] <= max[0] && p[1] >= min[1] && p[1] <= max[1],
        }
    }

    /// Pixel bounding box `[x0, y0, x1, y1)` clipped to the frame.
    fn bounds(&self, w: usize, h: usize) -> [usize; 4] {
        let (lo, hi) = match *self {
            Primitive::Capsule { a, b, radius, .. } => (
                [a[0].min(b[0]) - radius, a[1].min(b[1]) - radius],
                [a[0].max(b[0]) + radius, a[1].max(b[1]) + radius],
            ),
            Primitive::Disc { c, radius, .. } => ([c[0] - radius, c[1] - radius], [c[0] + radius, c[1] + radius]),
            Primitive::Rect { min, max, .. } => (min, max),
        };
        let clip = |v: f64, n: usize| v.floor().clamp(0.0, n as f64) as usize;
        [clip(lo[0], w), clip(lo[1], h), clip(hi[0] + 1.0, w), clip(hi[1] + 1.0, h)]
    }
}

/// Screen-space primitives of a posed character in paint order.
pub fn character_primitives(emb: &Embodiment, skel: &Skeleton, pose: &[Point], view: &View, settings: &RenderSettings) -> Vec<Primitive> {
    let px = view.scale / (settings.height as f64 / VIEW_HEIGHT) * settings.height as f64 / REFERENCE_HEIGHT;
    let mut out = Vec::new();
    let mut head_drawn = false;
    for &name in PAINT_ORDER {
        let (Some(j), Some(style)) = (skel.index_of(name), emb.bones.get(name)) else {
            continue;
        };
        let parent = skel.joints()[j].parent.expect("non-root bone");
        out.push(Primitive::Capsule {
            a: view.to_screen(pose[parent]),
            b: view.to_screen(pose[j]),
            radius: style.half_width * px,
            color: style.color,
        });
        if name == "neck" && !head_drawn {
            head_drawn = true;
            if let Some(h) = skel.index_of("head") {
                let c = view.to_screen(pose[h]);
                match emb.head.shape {
                    HeadShape::Circle(r) => out.push(Primitive::Disc {
                        c,
                        radius: r * view.scale,
                        color: emb.head.color,
                    }),
                    HeadShape::Box(half) => {
                        let s = half * view.scale;
                        out.push(Primitive::Rect {
                            min: [c[0] - s, c[1] - s],
                            max: [c[0] + s, c[1] + s],
                            color: emb.head.color,
                        });
                        if let Some(accent) = emb.head.accent {
                            out.push(Primitive::Rect {
                                min: [c[0] - s * 0.2, c[1] - s * 0.6],
                                max: [c[0] + s, c[1] - s * 0.1],
                                color: accent,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Rendered frames plus per-frame character silhouettes.
pub struct Rendered {
    pub clip: VideoClip,
    pub silhouettes: Vec<Vec<bool>>,
}

/// Renders a baked pose sequence of one embodiment in a scene.
pub fn render_clip(
    poses: &[Vec<Point>],
    skel: &Skeleton,
    emb: &Embodiment,
    scene: &SceneSpec,
    settings: &RenderSettings,
) -> Result<Rendered> {
    let (w, h) = (settings.width, settings.height);
    if w == 0 || h == 0 || settings.frames == 0 {
        return Err(Error::invalid("render resolution and length must be positive"));
    }
    if poses.len() < settings.frames {
        return Err(Error::invalid(format!(
            "animation has {} frames, {} requested",
            poses.len(),
            settings.frames
        )));
    }
    scene.validate(settings.frames)?;
    let mut data = Vec::with_capacity(settings.frames * w * h * 3);
    let mut silhouettes = Vec::with_capacity(settings.frames);
    for (t, pose) in poses.iter().take(settings.frames).enumerate() {
        let view = View::new(scene, settings, t);
        let mut frame = vec![[0f32; 3]; w * h];
        for y in 0..h {
            for x in 0..w {
                let wp = view.to_world([x as f64 + 0.5, y as f64 + 0.5]);
                let mut c = background(scene, wp);
                for o in scene.obstacles.iter().filter(|o| !o.in_front) {
                    if inside(o, wp) {
                        c = o.color;
                    }
                }
                frame[y * w + x] = c;
            }
        }
        let mut mask = vec![false; w * h];
        for prim in character_primitives(emb, skel, pose, &view, settings) {
            let [x0, y0, x1, y1] = prim.bounds(w, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    if prim.covers([x as f64 + 0.5, y as f64 + 0.5]) {
                        frame[y * w + x] = prim.color();
                        mask[y * w + x] = true;
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let wp = view.to_world([x as f64 + 0.5, y as f64 + 0.5]);
                for o in scene.obstacles.iter().filter(|o| o.in_front) {
                    if inside(o, wp) {
                        frame[y * w + x] = o.color;
                    }
                }
            }
        }
        let gain = scene.camera.gain[t] as f32;
        for px in &frame {
            data.extend(px.iter().map(|v| (v * gain).clamp(0.0, 1.0)));
        }
        silhouettes.push(mask);
    }
    let clip = VideoClip::new(settings.frames, h, w, 3, (settings.fps, 1), data)?;
    Ok(Rendered { clip, silhouettes })
}

pub fn inside(o: &Obstacle, p: Point) -> bool {
    let [x0, y0, x1, y1] = o.rect;
    p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub human: VideoClip,
    pub humanoid: VideoClip,
    pub scene: usize,
    pub anim: usize,
    pub camera: usize,
}

/// Retargets the canonical animation onto both embodiments, bakes it and
/// renders both under the same scene and camera.
#[allow(clippy::too_many_arguments)]
pub fn render_pair(
    canonical: &AnimationClip,
    scene: &SceneSpec,
    human: &Embodiment,
    humanoid: &Embodiment,
    settings: &RenderSettings,
    ids: (usize, usize, usize),
) -> Result<PairedSample> {
    if canonical.len() < settings.frames {
        return Err(Error::invalid(format!(
            "animation has {} frames, shorter than the requested {}",
            canonical.len(),
            settings.frames
        )));
    }
    if canonical.fps != settings.fps {
        return Err(Error::invalid(format!(
            "animation runs at {} fps, clip requested at {}",
            canonical.fps, settings.fps
        )));
    }
    let canon = canonical_skeleton();
    let mut clips = Vec::with_capacity(2);
    for emb in [human, humanoid] {
        emb.validate()?;
        let skel = emb.skeleton()?;
        let anim = retarget(canonical, &canon, &skel, &emb.retarget)?;
        let poses = bake(&anim, &skel)?;
        clips.push(render_clip(&poses, &skel, emb, scene, settings)?.clip);
    }
    let humanoid_clip = clips.pop().expect("two clips");
    let human_clip = clips.pop().expect("two clips");
    Ok(PairedSample {
        human: human_clip,
        humanoid: humanoid_clip,
        scene: ids.0,
        anim: ids.1,
        camera: ids.2,
    })
}
