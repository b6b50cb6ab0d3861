//! Procedural paired video synthesis.
//!
//! One canonical animation library is retargeted onto a human and a humanoid
//! embodiment, baked to per-frame poses by forward kinematics and rendered under
//! identical scene and camera state, so a pair differs only where the two
//! characters are drawn.

pub mod anim;
pub mod dataset;
pub mod render;
pub mod skeleton;

pub use anim::{bake, library_clip, retarget, AnimFrame, AnimationClip, BakedPoses, RetargetMap, ANIMATIONS};
pub use dataset::{generate_dataset, DatasetConfig, Manifest, ManifestRecord, Split, MANIFEST_FILE};
pub use render::{render_pair, CameraTrack, Embodiment, Obstacle, PairedSample, RenderSettings, SceneSpec};
pub use skeleton::{canonical_skeleton, Joint, Point, Skeleton};
