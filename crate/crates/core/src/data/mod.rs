//! Annotated scene frames, label vocabularies, dataset I/O and the synthetic
//! crowd generator.

mod io;
mod synth;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::cluster::Partition;
use crate::error::{Error, Result};
use crate::nn::Tensor2;

pub use io::{load_dataset, read_feature_blob, save_dataset, write_feature_blob, FeatureStorage};
pub use synth::{synth_generate, FeatureTables, SynthConfig};

pub type LabelSet = BTreeSet<usize>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocab {
    pub individual_actions: Vec<String>,
    pub social_activities: Vec<String>,
    pub global_activities: Vec<String>,
}

impl Default for LabelVocab {
    fn default() -> Self {
        Self::with_counts(27, 11, 7).expect("default vocabulary")
    }
}

impl LabelVocab {
    /// Vocabulary with placeholder names (`action_00`, `social_00`, ...).
    pub fn with_counts(actions: usize, social: usize, global: usize) -> Result<Self> {
        let names = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}_{i:02}")).collect();
        let v = Self {
            individual_actions: names("action", actions),
            social_activities: names("social", social),
            global_activities: names("global", global),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        for (tier, names) in [
            ("individual", &self.individual_actions),
            ("social", &self.social_activities),
            ("global", &self.global_activities),
        ] {
            if names.is_empty() {
                return Err(Error::config(format!("{tier} vocabulary is empty")));
            }
            let unique: BTreeSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::config(format!(
                    "{tier} vocabulary has duplicate names"
                )));
            }
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        self.individual_actions.len()
    }

    pub fn num_social(&self) -> usize {
        self.social_activities.len()
    }

    pub fn num_global(&self) -> usize {
        self.global_activities.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectAnnotation {
    pub id: u64,
    /// `[x, y, w, h]` in pixels, `(x, y)` the top-left corner.
    pub bbox: [f64; 4],
    pub feature: Vec<f64>,
    pub actions: LabelSet,
}

impl SubjectAnnotation {
    /// Midpoint of the bottom edge of the box.
    pub fn anchor(&self) -> (f64, f64) {
        let [x, y, w, h] = self.bbox;
        (x + w / 2.0, y + h)
    }

    pub fn area(&self) -> f64 {
        self.bbox[2] * self.bbox[3]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAnnotation {
    pub members: BTreeSet<u64>,
    pub activities: LabelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_id: u64,
    pub image_width: u32,
    pub image_height: u32,
    pub subjects: Vec<SubjectAnnotation>,
    /// One-member groups are allowed and treated as singletons.
    pub groups: Vec<GroupAnnotation>,
    pub global_activities: LabelSet,
}

impl FrameAnnotation {
    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.subjects.first().map(|s| s.feature.len()).unwrap_or(0)
    }

    /// Structural checks; label ranges are only checked when `vocab` is given.
    pub fn validate(&self, vocab: Option<&LabelVocab>) -> Result<()> {
        let bad = |msg: String| Err(Error::data(None, format!("frame {}: {msg}", self.frame_id)));
        if self.subjects.is_empty() {
            return bad("no subjects".into());
        }
        let dim = self.feature_dim();
        let mut ids = BTreeSet::new();
        for s in &self.subjects {
            if !ids.insert(s.id) {
                return bad(format!("duplicate subject id {}", s.id));
            }
            if !(s.bbox[2] > 0.0 && s.bbox[3] > 0.0) || s.bbox.iter().any(|v| !v.is_finite()) {
                return bad(format!("subject {} has an invalid box {:?}", s.id, s.bbox));
            }
            if s.feature.len() != dim {
                return bad(format!(
                    "subject {} feature dim {} differs from {dim}",
                    s.id,
                    s.feature.len()
                ));
            }
            if s.feature.iter().any(|v| !v.is_finite()) {
                return bad(format!("subject {} has a non-finite feature", s.id));
            }
        }
        let mut seen = BTreeSet::new();
        for (k, g) in self.groups.iter().enumerate() {
            if g.members.is_empty() {
                return bad(format!("group {k} has no members"));
            }
            for m in &g.members {
                if !ids.contains(m) {
                    return bad(format!("group {k} cites unknown subject id {m}"));
                }
                if !seen.insert(*m) {
                    return bad(format!("subject {m} belongs to more than one group"));
                }
            }
        }
        if let Some(v) = vocab {
            let check = |labels: &LabelSet, n: usize, tier: &str| -> Result<()> {
                match labels.iter().find(|&&l| l >= n) {
                    Some(l) => Err(Error::data(
                        None,
                        format!(
                            "frame {}: {tier} label {l} outside vocabulary of {n}",
                            self.frame_id
                        ),
                    )),
                    None => Ok(()),
                }
            };
            for s in &self.subjects {
                check(&s.actions, v.num_actions(), "individual")?;
            }
            for g in &self.groups {
                check(&g.activities, v.num_social(), "social")?;
            }
            check(&self.global_activities, v.num_global(), "global")?;
        }
        Ok(())
    }

    pub fn id_to_index(&self) -> HashMap<u64, usize> {
        self.subjects
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id, i))
            .collect()
    }

    pub fn features(&self) -> Tensor2 {
        let rows: Vec<&[f64]> = self.subjects.iter().map(|s| s.feature.as_slice()).collect();
        Tensor2::from_rows(&rows).expect("validated frame")
    }

    /// Ground-truth groups with at least two members, as subject indices,
    /// paired with their social labels. Order follows `groups`.
    pub fn multi_member_groups(&self) -> Vec<(BTreeSet<usize>, LabelSet)> {
        let index = self.id_to_index();
        self.groups
            .iter()
            .filter(|g| g.members.len() >= 2)
            .map(|g| {
                let members = g.members.iter().map(|id| index[id]).collect();
                (members, g.activities.clone())
            })
            .collect()
    }

    /// Ground-truth partition over subject indices.
    pub fn gt_partition(&self) -> Partition {
        let groups = self
            .multi_member_groups()
            .into_iter()
            .map(|(m, _)| m)
            .collect();
        Partition::from_groups(self.num_subjects(), groups).expect("validated frame")
    }
}

/// Binary co-membership matrix: 1 where two subjects share a group, diagonal 1.
pub fn ground_truth_relation(frame: &FrameAnnotation) -> Tensor2 {
    frame.gt_partition().to_relation()
}

/// Loss mask selecting off-diagonal entries.
pub fn off_diagonal_mask(n: usize) -> Tensor2 {
    let mut m = Tensor2::full(n, n, 1.0);
    for i in 0..n {
        m[(i, i)] = 0.0;
    }
    m
}
