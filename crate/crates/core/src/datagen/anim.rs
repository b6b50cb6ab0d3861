use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::skeleton::{canonical_skeleton, Point, Skeleton};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimFrame {
    /// Joint angle offsets from the rest pose, by joint name.
    pub angles: BTreeMap<String, f64>,
    /// Root translation relative to the skeleton's root position.
    pub root: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimationClip {
    pub fps: u32,
    pub frames: Vec<AnimFrame>,
}

impl AnimationClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks that every frame names exactly the joints of `skel`.
    pub fn check_against(&self, skel: &Skeleton) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid("animation has no frames"));
        }
        for (k, f) in self.frames.iter().enumerate() {
            if f.angles.len() != skel.len() {
                return Err(Error::invalid(format!(
                    "frame {k} specifies {} joints, skeleton has {}",
                    f.angles.len(),
                    skel.len()
                )));
            }
            if let Some(j) = skel.names().find(|j| !f.angles.contains_key(*j)) {
                return Err(Error::invalid(format!("frame {k} lacks joint {j}")));
            }
        }
        Ok(())
    }
}

/// Destination joint name to source joint name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetargetMap {
    pub joints: BTreeMap<String, String>,
}

impl RetargetMap {
    pub fn identity(skel: &Skeleton) -> Self {
        RetargetMap {
            joints: skel.names().map(|n| (n.to_string(), n.to_string())).collect(),
        }
    }
}

/// Copies angles through the correspondence and rescales root motion by the
/// ratio of leg-chain lengths so ground contact is preserved.
pub fn retarget(anim: &AnimationClip, src: &Skeleton, dst: &Skeleton, map: &RetargetMap) -> Result<AnimationClip> {
    for name in dst.names() {
        let s = map
            .joints
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unmapped joint: {name}")))?;
        if src.index_of(s).is_none() {
            return Err(Error::invalid(format!("joint {name} maps to {s}, which the source skeleton lacks")));
        }
    }
    anim.check_against(src)?;
    let ratio = dst.leg_length() / src.leg_length();
    let frames = anim
        .frames
        .iter()
        .map(|f| AnimFrame {
            angles: dst.names().map(|n| (n.to_string(), f.angles[&map.joints[n]])).collect(),
            root: if ratio == 1.0 { f.root } else { [f.root[0] * ratio, f.root[1] * ratio] },
        })
        .collect();
    Ok(AnimationClip { fps: anim.fps, frames })
}

/// Per-frame world positions of every joint, in skeleton order.
pub type BakedPoses = Vec<Vec<Point>>;

pub fn bake(anim: &AnimationClip, skel: &Skeleton) -> Result<BakedPoses> {
    anim.check_against(skel)?;
    Ok(anim
        .frames
        .iter()
        .map(|f| {
            let angles: Vec<f64> = skel.names().map(|n| f.angles[n]).collect();
            skel.solve(&angles, f.root)
        })
        .collect())
}

pub const ANIMATIONS: &[&str] = &["walk", "wave", "squat", "reach", "jump", "kick"];

fn smooth_pos(x: f64) -> f64 {
    x.max(0.0)
}

/// Procedural motion on the canonical joint set.
pub fn library_clip(name: &str, fps: u32, frames: usize) -> Result<AnimationClip> {
    if fps == 0 || frames == 0 {
        return Err(Error::invalid("animation needs a positive frame rate and length"));
    }
    let skel = canonical_skeleton();
    let motion: fn(f64, &mut BTreeMap<&'static str, f64>) -> Point = match name {
        "walk" => |t, a| {
            let w = 2.0 * PI * 1.1 * t;
            let s = 0.45 * w.sin();
            a.insert("l_knee", s);
            a.insert("r_knee", -s);
            a.insert("l_ankle", -0.5 * smooth_pos(-(w + 0.6).sin()));
            a.insert("r_ankle", -0.5 * smooth_pos((w + 0.6).sin()));
            a.insert("l_elbow", -0.8 * s);
            a.insert("r_elbow", 0.8 * s);
            a.insert("l_wrist", 0.3);
            a.insert("r_wrist", 0.3);
            [0.45 * t, 0.02 * (1.0 - (2.0 * w).cos())]
        },
        "wave" => |t, a| {
            let w = 2.0 * PI * 1.4 * t;
            a.insert("r_elbow", -PI + 0.5);
            a.insert("r_wrist", 0.5 + 0.6 * w.sin());
            a.insert("l_elbow", 0.1 * (0.3 * w).sin());
            a.insert("head", 0.15 * (0.5 * w).sin());
            [0.0, 0.0]
        },
        "squat" => |t, a| {
            let c = 0.5 * (1.0 - (2.0 * PI * 0.6 * t).cos());
            for side in ["l", "r"] {
                let k = if side == "l" { 1.0 } else { 0.92 };
                a.insert(if side == "l" { "l_knee" } else { "r_knee" }, 1.0 * c * k);
                a.insert(if side == "l" { "l_ankle" } else { "r_ankle" }, -1.8 * c * k);
                a.insert(if side == "l" { "l_toe" } else { "r_toe" }, 0.8 * c * k);
                a.insert(if side == "l" { "l_elbow" } else { "r_elbow" }, 1.3 * c * k);
            }
            a.insert("chest", -0.3 * c);
            [0.0, -0.3 * c]
        },
        "reach" => |t, a| {
            let c = 0.5 * (1.0 - (2.0 * PI * 0.5 * t).cos());
            a.insert("l_elbow", (PI - 0.4) * c);
            a.insert("r_elbow", (PI - 0.7) * c);
            a.insert("l_wrist", 0.2 * c);
            a.insert("r_wrist", 0.3 * c);
            a.insert("chest", -0.2 * c);
            a.insert("head", 0.3 * c);
            [0.1 * c, 0.0]
        },
        "jump" => |t, a| {
            let s = (2.0 * PI * 0.7 * t).sin();
            let up = smooth_pos(s);
            let crouch = smooth_pos(-s);
            for (knee, ankle, elbow) in [("l_knee", "l_ankle", "l_elbow"), ("r_knee", "r_ankle", "r_elbow")] {
                a.insert(knee, 0.7 * crouch + 0.3 * up);
                a.insert(ankle, -1.2 * crouch - 0.4 * up);
                a.insert(elbow, 2.2 * up - 0.5 * crouch);
            }
            [0.15 * t, 0.4 * up - 0.2 * crouch]
        },
        "kick" => |t, a| {
            let k = smooth_pos((2.0 * PI * 0.6 * t).sin()).powi(2);
            a.insert("r_knee", 1.3 * k);
            a.insert("r_ankle", -0.4 * (1.0 - k));
            a.insert("l_ankle", -0.15 * k);
            a.insert("l_elbow", 0.7 * k);
            a.insert("r_elbow", -0.5 * k);
            a.insert("pelvis", -0.12 * k);
            [0.0, 0.0]
        },
        other => {
            return Err(Error::invalid(format!(
                "unknown animation {other:?}; known: {}",
                ANIMATIONS.join(", ")
            )))
        }
    };
    let frames = (0..frames)
        .map(|k| {
            let t = k as f64 / fps as f64;
            let mut a: BTreeMap<&'static str, f64> = BTreeMap::new();
            let root = motion(t, &mut a);
            // a little idle motion on top so no joint is ever perfectly still
            let sway = 0.03 * (2.0 * PI * 0.4 * t).sin();
            let angles = skel
                .names()
                .map(|n| {
                    let base = a.get(n).copied().unwrap_or(0.0);
                    let extra = match n {
                        "neck" | "chest" => sway,
                        _ => 0.0,
                    };
                    (n.to_string(), base + extra)
                })
                .collect();
            AnimFrame { angles, root }
        })
        .collect();
    Ok(AnimationClip { fps, frames })
}
