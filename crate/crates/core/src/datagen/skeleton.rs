use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// Index of the parent joint; `None` only for the root.
    pub parent: Option<usize>,
    /// Length of the bone from the parent to this joint (0 for the root).
    pub length: f64,
    /// Angle of the bone relative to the parent bone at rest.
    pub rest_angle: f64,
}

/// A 2D kinematic tree. Joints are stored parents-first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    joints: Vec<Joint>,
    pub root_position: Point,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>, root_position: Point) -> Result<Self> {
        let roots = joints.iter().filter(|j| j.parent.is_none()).count();
        if roots != 1 || joints.first().is_none_or(|j| j.parent.is_some()) {
            return Err(Error::invalid(format!(
                "skeleton needs exactly one root stored first, found {roots}"
            )));
        }
        let mut seen = BTreeMap::new();
        for (i, j) in joints.iter().enumerate() {
            if seen.insert(j.name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate joint name {}", j.name)));
            }
            if let Some(p) = j.parent {
                // parents-first storage makes the tree acyclic and connected
                if p >= i {
                    return Err(Error::invalid(format!("joint {} must come after its parent", j.name)));
                }
                if !(j.length > 0.0 && j.length.is_finite()) {
                    return Err(Error::invalid(format!("bone {} has non-positive length {}", j.name, j.length)));
                }
            }
        }
        Ok(Skeleton { joints, root_position })
    }

    /// Builds a skeleton from `(name, parent name, length, rest angle)` rows,
    /// the first row being the root.
    pub fn from_rows(rows: &[(&str, Option<&str>, f64, f64)], root_position: Point) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut joints = Vec::with_capacity(rows.len());
        for (i, &(name, parent, length, rest_angle)) in rows.iter().enumerate() {
            let parent = parent
                .map(|p| {
                    index
                        .get(p)
                        .copied()
                        .ok_or_else(|| Error::invalid(format!("joint {name} refers to unknown parent {p}")))
                })
                .transpose()?;
            index.insert(name, i);
            joints.push(Joint {
                name: name.to_string(),
                parent,
                length,
                rest_angle,
            });
        }
        Skeleton::new(joints, root_position)
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn root(&self) -> &Joint {
        &self.joints[0]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.joints.iter().map(|j| j.name.as_str())
    }

    /// Copy with bone lengths multiplied per joint (missing entries keep 1).
    pub fn scaled(&self, scale: &BTreeMap<String, f64>) -> Result<Self> {
        let joints = self
            .joints
            .iter()
            .map(|j| Joint {
                length: j.length * scale.get(&j.name).copied().unwrap_or(1.0),
                ..j.clone()
            })
            .collect();
        Skeleton::new(joints, self.root_position)
    }

    /// Total bone length from the root down to `joint`.
    pub fn chain_length(&self, joint: usize) -> f64 {
        let mut total = 0.0;
        let mut j = Some(joint);
        while let Some(i) = j {
            total += self.joints[i].length;
            j = self.joints[i].parent;
        }
        total
    }

    /// Length of the leg chain used for root-motion retargeting: root to
    /// `l_ankle` when present, otherwise the longest root-to-leaf chain.
    pub fn leg_length(&self) -> f64 {
        match self.index_of("l_ankle") {
            Some(i) => self.chain_length(i),
            None => (0..self.len()).map(|i| self.chain_length(i)).fold(0.0, f64::max),
        }
    }

    /// Forward kinematics. `angles[i]` is added to the rest angle of joint `i`;
    /// the root angle rotates the whole body.
    pub fn solve(&self, angles: &[f64], root_offset: Point) -> Vec<Point> {
        let mut abs = vec![0.0; self.len()];
        let mut pos = vec![[0.0; 2]; self.len()];
        for (i, j) in self.joints.iter().enumerate() {
            match j.parent {
                None => {
                    abs[i] = j.rest_angle + angles[i];
                    pos[i] = [self.root_position[0] + root_offset[0], self.root_position[1] + root_offset[1]];
                }
                Some(p) => {
                    abs[i] = abs[p] + j.rest_angle + angles[i];
                    pos[i] = [pos[p][0] + j.length * abs[i].cos(), pos[p][1] + j.length * abs[i].sin()];
                }
            }
        }
        pos
    }
}

/// The shared joint set, scaled so a standing figure is about 1.8 units tall.
pub fn canonical_skeleton() -> Skeleton {
    use std::f64::consts::{FRAC_PI_2, PI};
    let rows: &[(&str, Option<&str>, f64, f64)] = &[
        ("pelvis", None, 0.0, 0.0),
        ("chest", Some("pelvis"), 0.5, FRAC_PI_2),
        ("neck", Some("chest"), 0.12, 0.0),
        ("head", Some("neck"), 0.14, 0.0),
        ("l_elbow", Some("chest"), 0.3, PI - 0.1),
        ("l_wrist", Some("l_elbow"), 0.28, 0.0),
        ("r_elbow", Some("chest"), 0.3, PI + 0.1),
        ("r_wrist", Some("r_elbow"), 0.28, 0.0),
        ("l_knee", Some("pelvis"), 0.45, -FRAC_PI_2),
        ("l_ankle", Some("l_knee"), 0.43, 0.0),
        ("l_toe", Some("l_ankle"), 0.14, FRAC_PI_2),
        ("r_knee", Some("pelvis"), 0.45, -FRAC_PI_2),
        ("r_ankle", Some("r_knee"), 0.43, 0.0),
        ("r_toe", Some("r_ankle"), 0.14, FRAC_PI_2),
    ];
    Skeleton::from_rows(rows, [0.0, 0.88]).expect("canonical skeleton is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn chain(l1: f64, l2: f64) -> Skeleton {
        Skeleton::from_rows(&[("a", None, 0.0, 0.0), ("b", Some("a"), l1, 0.0), ("c", Some("b"), l2, 0.0)], [0.0, 0.0]).unwrap()
    }

    #[test]
    fn straight_chain() {
        let p = chain(1.0, 1.0).solve(&[0.0; 3], [0.0, 0.0]);
        assert_eq!(p, vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
    }

    #[test]
    fn quarter_turn_chain() {
        let p = chain(1.0, 1.0).solve(&[0.0, FRAC_PI_2, 0.0], [0.0, 0.0]);
        let expect = [[0.0, 0.0], [0.0, 1.0], [0.0, 2.0]];
        for (a, b) in p.iter().zip(expect) {
            assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_skeletons() {
        assert!(Skeleton::from_rows(&[("a", None, 0.0, 0.0), ("b", None, 1.0, 0.0)], [0.0; 2]).is_err());
        assert!(Skeleton::from_rows(&[("a", None, 0.0, 0.0), ("b", Some("a"), 0.0, 0.0)], [0.0; 2]).is_err());
        assert!(Skeleton::from_rows(&[("a", None, 0.0, 0.0), ("b", Some("zz"), 1.0, 0.0)], [0.0; 2]).is_err());
    }

    #[test]
    fn canonical_leg_length() {
        let s = canonical_skeleton();
        assert!((s.leg_length() - 0.88).abs() < 1e-12);
        assert_eq!(s.root_position, [0.0, 0.88]);
    }

    proptest! {
        #[test]
        fn end_effector_matches_direct_trigonometry(angles in proptest::collection::vec(-3.2f64..3.2, 4), lengths in proptest::collection::vec(0.1f64..2.0, 3)) {
            let s = Skeleton::from_rows(&[
                ("r", None, 0.0, 0.0),
                ("a", Some("r"), lengths[0], 0.0),
                ("b", Some("a"), lengths[1], 0.0),
                ("c", Some("b"), lengths[2], 0.0),
            ], [0.0, 0.0]).unwrap();
            let p = s.solve(&angles, [0.0, 0.0]);
            let mut theta = angles[0];
            let (mut x, mut y) = (0.0, 0.0);
            for k in 0..3 {
                theta += angles[k + 1];
                x += lengths[k] * theta.cos();
                y += lengths[k] * theta.sin();
            }
            prop_assert!((p[3][0] - x).abs() < 1e-12 && (p[3][1] - y).abs() < 1e-12);
            let total: f64 = lengths.iter().sum();
            prop_assert!((p[3][0].hypot(p[3][1])) <= total + 1e-12);
        }

        #[test]
        fn colinear_chain_reaches_full_radius(root in -3.2f64..3.2, lengths in proptest::collection::vec(0.1f64..2.0, 3)) {
            let s = Skeleton::from_rows(&[
                ("r", None, 0.0, 0.0),
                ("a", Some("r"), lengths[0], 0.0),
                ("b", Some("a"), lengths[1], 0.0),
                ("c", Some("b"), lengths[2], 0.0),
            ], [0.0, 0.0]).unwrap();
            let p = s.solve(&[root, 0.0, 0.0, 0.0], [0.0, 0.0]);
            let total: f64 = lengths.iter().sum();
            prop_assert!((p[3][0].hypot(p[3][1]) - total).abs() < 1e-12);
        }

        #[test]
        fn doubling_lengths_doubles_offsets(angles in proptest::collection::vec(-3.2f64..3.2, 14)) {
            let s = canonical_skeleton();
            let twice: BTreeMap<String, f64> = s.names().map(|n| (n.to_string(), 2.0)).collect();
            let d = s.scaled(&twice).unwrap();
            // place the root at the origin so offsets are the positions themselves
            let origin = [-s.root_position[0], -s.root_position[1]];
            let a = s.solve(&angles, origin);
            let b = d.solve(&angles, origin);
            prop_assert_eq!(a[0], [0.0, 0.0]);
            for (pa, pb) in a.iter().zip(&b) {
                prop_assert_eq!([2.0 * pa[0], 2.0 * pa[1]], *pb);
            }
        }
    }
}
