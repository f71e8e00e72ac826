//! Synthetic crowd scenes with a planted group structure.
//!
//! Groups (and singletons) are placed in distinct cells of a grid laid over
//! the arena, so members of one group are always much closer to each other
//! than to anyone else. Labels follow a fixed activity -> action table, and
//! every feature is a sum of fixed label embeddings plus Gaussian noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FrameAnnotation, GroupAnnotation, LabelSet, LabelVocab, SubjectAnnotation};
use crate::error::{Error, Result};

/// Box size at the top of the usable area is `BASE_BOX * 0.6`, at the bottom
/// `BASE_BOX * 1.4`.
const BASE_BOX: (f64, f64) = (30.0, 75.0);
const CANDIDATE_ACTIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_frames: usize,
    pub n_subjects: usize,
    pub n_groups: usize,
    pub arena_width: u32,
    pub arena_height: u32,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub embedding_seed: u64,
    pub singleton_fraction: f64,
    /// Radius of the disc that holds a group's members, in pixels.
    pub group_radius: f64,
    /// Probability of a second label per subject / group.
    pub extra_label_prob: f64,
    /// Frame ids advance by this much (one key frame per stride).
    pub frame_stride: u64,
    /// Ungrouped subjects carry the embedding of the frame's dominant
    /// activity in place of a group embedding.
    pub singleton_scene_context: bool,
    pub num_actions: usize,
    pub num_social: usize,
    pub num_global: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_frames: 100,
            n_subjects: 10,
            n_groups: 3,
            arena_width: 1280,
            arena_height: 720,
            feature_dim: 32,
            noise_sigma: 0.05,
            embedding_seed: 7,
            singleton_fraction: 0.2,
            group_radius: 15.0,
            extra_label_prob: 0.3,
            frame_stride: 15,
            singleton_scene_context: true,
            num_actions: 27,
            num_social: 11,
            num_global: 7,
        }
    }
}

struct Layout {
    cols: usize,
    rows: usize,
    cell_w: f64,
    cell_h: f64,
    top: f64,
    jitter: f64,
}

impl SynthConfig {
    pub fn vocab(&self) -> Result<LabelVocab> {
        LabelVocab::with_counts(self.num_actions, self.num_social, self.num_global)
    }

    fn singletons(&self) -> usize {
        if self.n_groups == 0 {
            return self.n_subjects;
        }
        let s = (self.singleton_fraction * self.n_subjects as f64).round() as usize;
        s.min(self.n_subjects - 2 * self.n_groups)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config(m));
        if self.n_subjects == 0 {
            return err("n_subjects must be positive".into());
        }
        if self.n_groups > self.n_subjects {
            return err("n_groups exceeds n_subjects".into());
        }
        if 2 * self.n_groups > self.n_subjects {
            return err(format!(
                "{} groups of at least two need more than {} subjects",
                self.n_groups, self.n_subjects
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err("noise_sigma must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.singleton_fraction) {
            return err("singleton_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.extra_label_prob) {
            return err("extra_label_prob must lie in [0, 1]".into());
        }
        if self.feature_dim == 0 || self.group_radius.is_nan() || self.group_radius <= 0.0 {
            return err("feature_dim and group_radius must be positive".into());
        }
        if self.frame_stride == 0 {
            return err("frame_stride must be positive".into());
        }
        self.vocab()?;
        self.layout().map(|_| ())
    }

    fn layout(&self) -> Result<Layout> {
        let units = self.n_groups + self.singletons();
        let top = BASE_BOX.1 * 1.4;
        let (w, h) = (self.arena_width as f64, self.arena_height as f64 - top);
        if h <= 0.0 {
            return Err(Error::config("arena too short for the subject boxes"));
        }
        let cols = ((units as f64 * w / h).sqrt().ceil() as usize).clamp(1, units);
        let rows = units.div_ceil(cols);
        let (cell_w, cell_h) = (w / cols as f64, h / rows as f64);
        // inter-group gaps must be at least 3x the intra-group spread (2r)
        let need = 8.0 * self.group_radius;
        let cell_min = cell_w.min(cell_h);
        if cell_min < need {
            return Err(Error::config(format!(
                "arena {}x{} too small to separate {units} groups/singletons of radius {}",
                self.arena_width, self.arena_height, self.group_radius
            )));
        }
        Ok(Layout {
            cols,
            rows,
            cell_w,
            cell_h,
            top,
            jitter: (cell_min - need) / 4.0,
        })
    }

    /// Candidate individual actions for members of a group doing `activity`.
    pub fn action_candidates(&self, activity: usize) -> Vec<usize> {
        let mut c: Vec<usize> = (0..CANDIDATE_ACTIONS)
            .map(|j| (CANDIDATE_ACTIONS * activity + j) % self.num_actions)
            .collect();
        c.dedup();
        c
    }

    pub fn global_for(&self, activity: usize) -> usize {
        activity % self.num_global
    }
}

/// Fixed label embeddings shared by every dataset generated with the same
/// `embedding_seed`.
#[derive(Debug, Clone)]
pub struct FeatureTables {
    pub actions: Vec<Vec<f64>>,
    pub social: Vec<Vec<f64>>,
}

impl FeatureTables {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.embedding_seed);
        let normal = Normal::new(0.0, 1.0 / (cfg.feature_dim as f64).sqrt()).expect("finite std");
        let mut table = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..cfg.feature_dim)
                        .map(|_| normal.sample(&mut rng))
                        .collect()
                })
                .collect()
        };
        let actions = table(cfg.num_actions);
        let social = table(cfg.num_social);
        Self { actions, social }
    }
}

fn draw_labels(rng: &mut ChaCha8Rng, candidates: &[usize], extra_prob: f64) -> LabelSet {
    let mut set = LabelSet::new();
    let first = candidates[rng.random_range(0..candidates.len())];
    set.insert(first);
    if candidates.len() > 1 && rng.random_bool(extra_prob) {
        loop {
            let c = candidates[rng.random_range(0..candidates.len())];
            if c != first {
                set.insert(c);
                break;
            }
        }
    }
    set
}

fn other_activity(rng: &mut ChaCha8Rng, n: usize, not: usize) -> usize {
    if n == 1 {
        return not;
    }
    let k = rng.random_range(0..n - 1);
    if k >= not {
        k + 1
    } else {
        k
    }
}

/// Generates `cfg.n_frames` frames; identical `(cfg, seed)` give identical output.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<FrameAnnotation>> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let tables = FeatureTables::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.n_frames)
        .map(|i| generate_frame(cfg, &layout, &tables, &mut rng, i as u64 * cfg.frame_stride))
        .collect()
}

fn generate_frame(
    cfg: &SynthConfig,
    layout: &Layout,
    tables: &FeatureTables,
    rng: &mut ChaCha8Rng,
    frame_id: u64,
) -> Result<FrameAnnotation> {
    let n_single = cfg.singletons();
    let mut sizes = vec![2usize; cfg.n_groups];
    for _ in 0..(cfg.n_subjects - n_single - 2 * cfg.n_groups) {
        let k = rng.random_range(0..cfg.n_groups);
        sizes[k] += 1;
    }

    let dominant = rng.random_range(0..cfg.num_social);
    let majority = cfg.n_groups / 2 + 1;
    let primaries: Vec<usize> = (0..cfg.n_groups)
        .map(|k| {
            if k < majority {
                dominant
            } else {
                other_activity(rng, cfg.num_social, dominant)
            }
        })
        .collect();

    let mut cells: Vec<usize> = (0..layout.cols * layout.rows).collect();
    cells.shuffle(rng);
    let centroid = |unit: usize, rng: &mut ChaCha8Rng| {
        let cell = cells[unit];
        let (cx, cy) = (cell % layout.cols, cell / layout.cols);
        let jx = rng.random_range(-1.0..=1.0) * layout.jitter;
        let jy = rng.random_range(-1.0..=1.0) * layout.jitter;
        (
            (cx as f64 + 0.5) * layout.cell_w + jx,
            layout.top + (cy as f64 + 0.5) * layout.cell_h + jy,
        )
    };

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let mut groups = Vec::with_capacity(cfg.n_groups);
    let make_subject = |rng: &mut ChaCha8Rng,
                        id: u64,
                        pos: (f64, f64),
                        context: usize,
                        group_labels: Option<&LabelSet>|
     -> SubjectAnnotation {
        let actions = draw_labels(rng, &cfg.action_candidates(context), cfg.extra_label_prob);
        let mut feature = vec![0.0; cfg.feature_dim];
        for &a in &actions {
            for (f, e) in feature.iter_mut().zip(&tables.actions[a]) {
                *f += e;
            }
        }
        for &s in group_labels.into_iter().flatten() {
            for (f, e) in feature.iter_mut().zip(&tables.social[s]) {
                *f += e;
            }
        }
        for f in feature.iter_mut() {
            if cfg.noise_sigma > 0.0 {
                *f += noise.sample(rng);
            }
            // keep values exactly representable in the f32 blob
            *f = *f as f32 as f64;
        }
        let scale = 0.6 + 0.8 * (pos.1 / cfg.arena_height as f64);
        let (w, h) = (BASE_BOX.0 * scale, BASE_BOX.1 * scale);
        SubjectAnnotation {
            id,
            bbox: [pos.0 - w / 2.0, pos.1 - h, w, h],
            feature,
            actions,
        }
    };

    let mut next_id = 1u64;
    for (k, &size) in sizes.iter().enumerate() {
        let c = centroid(k, rng);
        let mut activities = LabelSet::new();
        activities.insert(primaries[k]);
        if rng.random_bool(cfg.extra_label_prob) && cfg.num_social > 1 {
            activities.insert(other_activity(rng, cfg.num_social, primaries[k]));
        }
        let mut members = std::collections::BTreeSet::new();
        for _ in 0..size {
            let r = cfg.group_radius * rng.random::<f64>().sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let pos = (c.0 + r * theta.cos(), c.1 + r * theta.sin());
            subjects.push(make_subject(
                rng,
                next_id,
                pos,
                primaries[k],
                Some(&activities),
            ));
            members.insert(next_id);
            next_id += 1;
        }
        groups.push(GroupAnnotation {
            members,
            activities,
        });
    }
    for u in 0..n_single {
        let pos = centroid(cfg.n_groups + u, rng);
        let scene = cfg
            .singleton_scene_context
            .then(|| LabelSet::from([dominant]));
        subjects.push(make_subject(rng, next_id, pos, dominant, scene.as_ref()));
        next_id += 1;
    }

    let frame = FrameAnnotation {
        frame_id,
        image_width: cfg.arena_width,
        image_height: cfg.arena_height,
        subjects,
        groups,
        global_activities: [cfg.global_for(dominant)].into_iter().collect(),
    };
    frame.validate(None)?;
    Ok(frame)
}
