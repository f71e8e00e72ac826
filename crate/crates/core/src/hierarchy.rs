//! Bottom-up aggregation (scene geometry, relation matrix, all-in-one
//! aggregation into group and global nodes) and top-down readouts.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::Partition;
use crate::data::FrameAnnotation;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, MlpParams, MlpSpec, MlpVars, Tape, Tensor2, Var};

/// Anchor points (bottom-edge midpoints) and box areas of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub anchors: Vec<(f64, f64)>,
    pub areas: Vec<f64>,
    pub image_width: f64,
}

impl SceneGeometry {
    pub fn from_frame(frame: &FrameAnnotation) -> Self {
        let (w, h) = (frame.image_width as f64, frame.image_height as f64);
        let anchors: Vec<(f64, f64)> = frame.subjects.iter().map(|s| s.anchor()).collect();
        for (s, &(x, y)) in frame.subjects.iter().zip(&anchors) {
            if !(0.0..=w).contains(&x) || !(0.0..=h).contains(&y) {
                warn!(
                    "frame {}: subject {} anchor ({x}, {y}) outside the image",
                    frame.frame_id, s.id
                );
            }
        }
        Self {
            anchors,
            areas: frame.subjects.iter().map(|s| s.area()).collect(),
            image_width: w,
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Anchor distance normalized by `sqrt(S_u + S_v)`; `euclid` keeps the raw
/// pixel distance.
pub fn spatial_distance_matrix(geom: &SceneGeometry, euclid: bool) -> Result<Tensor2> {
    let n = geom.len();
    if geom.areas.len() != n {
        return Err(Error::invalid("anchor and area counts differ"));
    }
    if let Some(s) = geom.areas.iter().find(|&&s| s.is_nan() || s <= 0.0) {
        return Err(Error::invalid(format!("box area {s} is not positive")));
    }
    let mut d = Tensor2::zeros(n, n);
    for u in 0..n {
        for v in (u + 1)..n {
            let (a, b) = (geom.anchors[u], geom.anchors[v]);
            let mut dist = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            if !euclid {
                dist /= (geom.areas[u] + geom.areas[v]).sqrt();
            }
            d[(u, v)] = dist;
            d[(v, u)] = dist;
        }
    }
    Ok(d)
}

/// Additive mask: 0 where `D <= rho` (and on the diagonal), `-inf` elsewhere.
pub fn distance_mask(d: &Tensor2, rho: f64) -> Result<Tensor2> {
    if rho.is_nan() || rho <= 0.0 {
        return Err(Error::invalid(format!(
            "distance threshold {rho} must be positive"
        )));
    }
    let mut m = d.map(|v| if v <= rho { 0.0 } else { f64::NEG_INFINITY });
    for i in 0..d.rows().min(d.cols()) {
        m[(i, i)] = 0.0;
    }
    Ok(m)
}

/// `sigmoid(1 / D)`, with coincident anchors mapped to the limit 1.
pub fn distance_affinity(d: &Tensor2) -> Tensor2 {
    d.map(|v| if v == 0.0 { 1.0 } else { sigmoid(1.0 / v) })
}

/// `R_raw = λ E + (1 - λ) D̆`, symmetrized, unit diagonal.
pub fn relation_matrix(e: &Tensor2, dbreve: &Tensor2, lambda: f64) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let ev = tape.constant(e.clone());
    let r = relation_var(&mut tape, ev, dbreve, lambda)?;
    Ok(tape.value(r).clone())
}

pub fn relation_var(tape: &mut Tape, e: Var, dbreve: &Tensor2, lambda: f64) -> Result<Var> {
    let n = tape.value(e).rows();
    if tape.value(e).shape() != (n, n) || dbreve.shape() != (n, n) {
        return Err(Error::invalid("relation_matrix: shape mismatch"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let weighted_e = tape.scale(e, lambda);
    let dist = tape.constant(dbreve.scale(1.0 - lambda));
    let raw = tape.add(weighted_e, dist)?;
    let raw_t = tape.transpose(raw);
    let sum = tape.add(raw, raw_t)?;
    let sym = tape.scale(sum, 0.5);
    let off = tape.constant(crate::data::off_diagonal_mask(n));
    let off_part = tape.mul(sym, off)?;
    let eye = tape.constant(Tensor2::identity(n));
    tape.add(off_part, eye)
}

/// Everything derived from geometry and `E` for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationBundle {
    pub d: Tensor2,
    pub dbreve: Tensor2,
    pub mask: Tensor2,
    pub r: Tensor2,
    pub lambda: f64,
    pub rho: f64,
}

/// Pooling used to collapse a node set into one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Aio,
    MaxPool,
}

/// Local bilinear graph used by all-in-one aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AioParams {
    pub g1: MlpParams,
    pub g2: MlpParams,
}

impl AioParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            g1: MlpParams::init(MlpSpec::linear(dim, dim), rng)?,
            g2: MlpParams::init(MlpSpec::projection(dim, dim), rng)?,
        })
    }

    pub fn register(&self, tape: &mut Tape) -> AioVars {
        AioVars {
            g1: self.g1.register(tape),
            g2: self.g2.register(tape),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AioVars {
    pub g1: MlpVars,
    pub g2: MlpVars,
}

impl AioVars {
    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.g1.leaves().chain(self.g2.leaves())
    }
}

/// Collapses the rows of `x` (m x d) into a 1 x d node.
pub fn aio_var(tape: &mut Tape, x: Var, aio: &AioVars, mode: Aggregation) -> Result<Var> {
    let m = tape.value(x).rows();
    if m == 0 {
        return Err(Error::invalid("aggregation over an empty node set"));
    }
    match mode {
        Aggregation::MaxPool => tape.col_max(x),
        Aggregation::Aio => {
            let a = aio.g1.forward(tape, x)?;
            let b = aio.g2.forward(tape, x)?;
            let logits = tape.matmul_nt(a, b)?;
            let w = tape.masked_softmax(logits, None)?;
            let col = tape.col_sum(w);
            let weights = tape.scale(col, 1.0 / m as f64);
            tape.matmul(weights, x)
        }
    }
}

pub fn aio_aggregate(nodes: &Tensor2, aio: &AioParams, mode: Aggregation) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let x = tape.constant(nodes.clone());
    let vars = aio.register(&mut tape);
    let out = aio_var(&mut tape, x, &vars, mode)?;
    Ok(tape.value(out).clone())
}

/// Node handles of one hierarchy on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HierarchyVars {
    pub n_i: Var,
    /// `None` when the partition has no group of two or more.
    pub n_p: Option<Var>,
    pub n_g: Var,
}

/// Group nodes aggregate their members; the global node aggregates the
/// singletons together with every group node.
pub fn build_hierarchy_var(
    tape: &mut Tape,
    n_i: Var,
    partition: &Partition,
    group_aio: &AioVars,
    global_aio: &AioVars,
    mode: Aggregation,
) -> Result<HierarchyVars> {
    let n = tape.value(n_i).rows();
    if partition.num_subjects() != n {
        return Err(Error::invalid(format!(
            "partition covers {} subjects, hierarchy has {n}",
            partition.num_subjects()
        )));
    }
    let mut group_nodes = Vec::with_capacity(partition.groups().len());
    for g in partition.groups() {
        let idx: Vec<usize> = g.iter().copied().collect();
        let members = tape.gather_rows(n_i, &idx)?;
        group_nodes.push(aio_var(tape, members, group_aio, mode)?);
    }
    let n_p = if group_nodes.is_empty() {
        None
    } else {
        Some(tape.stack_rows(&group_nodes)?)
    };
    let mut parts = Vec::with_capacity(2);
    if !partition.singletons().is_empty() {
        let idx: Vec<usize> = partition.singletons().iter().copied().collect();
        parts.push(tape.gather_rows(n_i, &idx)?);
    }
    parts.extend(n_p);
    let top = if parts.len() == 1 {
        parts[0]
    } else {
        tape.stack_rows(&parts)?
    };
    let n_g = aio_var(tape, top, global_aio, mode)?;
    Ok(HierarchyVars { n_i, n_p, n_g })
}

/// Individual, group and global nodes of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeHierarchy {
    pub n_i: Tensor2,
    pub partition: Partition,
    /// K x d, zero rows when there are no groups.
    pub n_p: Tensor2,
    pub n_g: Tensor2,
}

pub fn build_hierarchy(
    n_i: &Tensor2,
    partition: &Partition,
    group_aio: &AioParams,
    global_aio: &AioParams,
    mode: Aggregation,
) -> Result<NodeHierarchy> {
    let mut tape = Tape::new();
    let x = tape.constant(n_i.clone());
    let ga = group_aio.register(&mut tape);
    let gg = global_aio.register(&mut tape);
    let h = build_hierarchy_var(&mut tape, x, partition, &ga, &gg, mode)?;
    Ok(NodeHierarchy {
        n_i: n_i.clone(),
        partition: partition.clone(),
        n_p: h
            .n_p
            .map_or_else(|| Tensor2::zeros(0, n_i.cols()), |v| tape.value(v).clone()),
        n_g: tape.value(h.n_g).clone(),
    })
}

/// Readout heads for the three tiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heads {
    pub fi: MlpParams,
    pub fp: MlpParams,
    pub fg: MlpParams,
}

impl Heads {
    pub fn register(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            fi: self.fi.register(tape),
            fp: self.fp.register(tape),
            fg: self.fg.register(tape),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub fi: MlpVars,
    pub fp: MlpVars,
    pub fg: MlpVars,
}

impl HeadVars {
    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.fi
            .leaves()
            .chain(self.fp.leaves())
            .chain(self.fg.leaves())
    }
}

/// Whether the global node is fed back into the lower readouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackFlags {
    pub global_to_individual: bool,
    pub global_to_group: bool,
}

impl Default for FeedbackFlags {
    fn default() -> Self {
        Self {
            global_to_individual: true,
            global_to_group: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReadoutVars {
    pub a_i: Var,
    pub a_p: Option<Var>,
    pub a_g: Var,
}

fn with_global(tape: &mut Tape, nodes: Var, n_g: Var, feed: bool) -> Result<Var> {
    let rows = tape.value(nodes).rows();
    let g = if feed {
        tape.repeat_rows(n_g, rows)?
    } else {
        let cols = tape.value(n_g).cols();
        tape.constant(Tensor2::zeros(rows, cols))
    };
    tape.concat_cols(nodes, g)
}

pub fn t2d_readout_var(
    tape: &mut Tape,
    h: &HierarchyVars,
    heads: &HeadVars,
    flags: FeedbackFlags,
) -> Result<ReadoutVars> {
    let xi = with_global(tape, h.n_i, h.n_g, flags.global_to_individual)?;
    let a_i = heads.fi.forward(tape, xi)?;
    let a_p = match h.n_p {
        Some(p) => {
            let xp = with_global(tape, p, h.n_g, flags.global_to_group)?;
            Some(heads.fp.forward(tape, xp)?)
        }
        None => None,
    };
    let a_g = heads.fg.forward(tape, h.n_g)?;
    Ok(ReadoutVars { a_i, a_p, a_g })
}

/// Label probabilities for each tier.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub a_i: Tensor2,
    /// K x social labels; zero rows when there are no groups.
    pub a_p: Tensor2,
    pub a_g: Tensor2,
}

pub fn t2d_readout(h: &NodeHierarchy, heads: &Heads, flags: FeedbackFlags) -> Result<Readout> {
    let mut tape = Tape::new();
    let hv = HierarchyVars {
        n_i: tape.constant(h.n_i.clone()),
        n_p: (h.n_p.rows() > 0).then(|| tape.constant(h.n_p.clone())),
        n_g: tape.constant(h.n_g.clone()),
    };
    let vars = heads.register(&mut tape);
    let out = t2d_readout_var(&mut tape, &hv, &vars, flags)?;
    Ok(Readout {
        a_i: tape.value(out.a_i).clone(),
        a_p: out.a_p.map_or_else(
            || Tensor2::zeros(0, heads.fp.output_dim()),
            |v| tape.value(v).clone(),
        ),
        a_g: tape.value(out.a_g).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OutputActivation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn geom(anchors: &[(f64, f64)], areas: &[f64]) -> SceneGeometry {
        SceneGeometry {
            anchors: anchors.to_vec(),
            areas: areas.to_vec(),
            image_width: 100.0,
        }
    }

    fn aio(dim: usize, seed: u64) -> AioParams {
        AioParams::init(dim, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn distance_examples() {
        let d =
            spatial_distance_matrix(&geom(&[(0.0, 0.0), (3.0, 4.0)], &[8.0, 8.0]), false).unwrap();
        assert!((d[(0, 1)] - 1.25).abs() < 1e-15 && d[(1, 0)] == d[(0, 1)] && d[(0, 0)] == 0.0);
        let d = spatial_distance_matrix(&geom(&[(0.0, 0.0), (6.0, 8.0)], &[32.0, 18.0]), false)
            .unwrap();
        assert!((d[(0, 1)] - 10.0 / 50f64.sqrt()).abs() < 1e-15);
        assert!((d[(0, 1)] - std::f64::consts::SQRT_2).abs() < 1e-12);
        let d =
            spatial_distance_matrix(&geom(&[(0.0, 0.0), (6.0, 8.0)], &[32.0, 18.0]), true).unwrap();
        assert_eq!(d[(0, 1)], 10.0);
        let d =
            spatial_distance_matrix(&geom(&[(2.0, 2.0), (2.0, 2.0)], &[1.0, 1.0]), false).unwrap();
        assert_eq!(d[(0, 1)], 0.0);
        assert!(spatial_distance_matrix(&geom(&[(0.0, 0.0)], &[0.0]), false).is_err());
    }

    #[test]
    fn scaling_geometry_with_squared_areas_keeps_distances() {
        let g = geom(&[(1.0, 2.0), (4.0, 6.0), (-3.0, 0.5)], &[2.0, 3.0, 5.0]);
        let k = 3.0;
        let scaled = geom(
            &g.anchors
                .iter()
                .map(|&(x, y)| (k * x, k * y))
                .collect::<Vec<_>>(),
            &g.areas.iter().map(|a| a * k * k).collect::<Vec<_>>(),
        );
        let (a, b) = (
            spatial_distance_matrix(&g, false).unwrap(),
            spatial_distance_matrix(&scaled, false).unwrap(),
        );
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let (ea, eb) = (
            spatial_distance_matrix(&g, true).unwrap(),
            spatial_distance_matrix(&scaled, true).unwrap(),
        );
        assert_eq!(
            distance_mask(&ea, 4.0).unwrap(),
            distance_mask(&eb, 4.0 * k).unwrap()
        );
    }

    #[test]
    fn mask_rules() {
        let d = Tensor2::from_rows(&[[0.0, 1.25, 3.0], [1.25, 0.0, 2.0], [3.0, 2.0, 0.0]]).unwrap();
        let m = distance_mask(&d, 2.0).unwrap();
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(0, 2)], f64::NEG_INFINITY);
        assert_eq!(m[(1, 2)], 0.0);
        let m = distance_mask(&d, f64::INFINITY).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        assert!(distance_mask(&d, 0.0).is_err());
    }

    #[test]
    fn relation_examples() {
        let db = distance_affinity(&Tensor2::full(1, 1, 1.25))[(0, 0)];
        assert!((db - 0.6900).abs() < 5e-5);
        let raw = 0.5 * 0.4 + 0.5 * db;
        assert!((raw - 0.5450).abs() < 5e-5);
        let masked = 0.5 * 0.0 + 0.5 * distance_affinity(&Tensor2::full(1, 1, 10.0))[(0, 0)];
        assert!((masked - 0.26249).abs() < 5e-6);

        // both directions carry the same raw value, so symmetrization keeps it
        let e = Tensor2::from_rows(&[[0.6, 0.4], [0.4, 0.6]]).unwrap();
        let d = Tensor2::from_rows(&[[0.0, 1.25], [1.25, 0.0]]).unwrap();
        let r = relation_matrix(&e, &distance_affinity(&d), 0.5).unwrap();
        assert!((r[(0, 1)] - raw).abs() < 1e-15);
        assert_eq!((r[(0, 0)], r[(1, 1)]), (1.0, 1.0));
    }

    #[test]
    fn relation_with_lambda_one_is_symmetrized_e() {
        let e = Tensor2::from_rows(&[[0.7, 0.2, 0.1], [0.5, 0.5, 0.0], [0.3, 0.3, 0.4]]).unwrap();
        let db = Tensor2::full(3, 3, 0.9);
        let r = relation_matrix(&e, &db, 1.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j {
                    1.0
                } else {
                    (e[(i, j)] + e[(j, i)]) / 2.0
                };
                assert!((r[(i, j)] - want).abs() < 1e-15);
            }
        }
        assert!(relation_matrix(&e, &Tensor2::zeros(2, 2), 0.5).is_err());
    }

    #[test]
    fn aio_cases() {
        let p = aio(2, 1);
        let one = Tensor2::row_vector(&[0.3, -2.0]);
        assert_eq!(aio_aggregate(&one, &p, Aggregation::Aio).unwrap(), one);

        let zero = AioParams {
            g1: MlpParams::zeros(MlpSpec::linear(2, 2)).unwrap(),
            g2: MlpParams::zeros(MlpSpec::linear(2, 2)).unwrap(),
        };
        let x = Tensor2::identity(2);
        let out = aio_aggregate(&x, &zero, Aggregation::Aio).unwrap();
        assert!((out[(0, 0)] - 0.5).abs() < 1e-15 && (out[(0, 1)] - 0.5).abs() < 1e-15);

        let same = Tensor2::from_rows(&[[1.5, -0.5], [1.5, -0.5], [1.5, -0.5]]).unwrap();
        let out = aio_aggregate(&same, &p, Aggregation::Aio).unwrap();
        assert!((out[(0, 0)] - 1.5).abs() < 1e-12 && (out[(0, 1)] + 0.5).abs() < 1e-12);

        let mp = aio_aggregate(
            &Tensor2::from_rows(&[[1.0, 5.0], [3.0, -1.0]]).unwrap(),
            &p,
            Aggregation::MaxPool,
        )
        .unwrap();
        assert_eq!(mp, Tensor2::row_vector(&[3.0, 5.0]));
        assert!(aio_aggregate(&Tensor2::zeros(0, 2), &p, Aggregation::Aio).is_err());
    }

    #[test]
    fn aio_output_is_convex_combination() {
        let p = aio(3, 4);
        let x = Tensor2::from_rows(&[
            [1.0, 0.0, 2.0],
            [-1.0, 3.0, 0.5],
            [0.2, 0.2, -4.0],
            [2.0, 1.0, 1.0],
        ])
        .unwrap();
        let out = aio_aggregate(&x, &p, Aggregation::Aio).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..4).map(|r| x[(r, c)]).collect();
            let (lo, hi) = col
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                    (a.min(v), b.max(v))
                });
            assert!(out[(0, c)] >= lo - 1e-12 && out[(0, c)] <= hi + 1e-12);
        }
    }

    #[test]
    fn hierarchy_degenerate_cases() {
        let p = aio(2, 2);
        let q = aio(2, 3);
        let n_i = Tensor2::from_rows(&[[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]]).unwrap();

        let h = build_hierarchy(
            &n_i,
            &Partition::all_singletons(3),
            &p,
            &q,
            Aggregation::Aio,
        )
        .unwrap();
        assert_eq!(h.n_p.rows(), 0);
        assert_eq!(h.n_g, aio_aggregate(&n_i, &q, Aggregation::Aio).unwrap());

        let all = Partition::from_groups(3, vec![set(&[0, 1, 2])]).unwrap();
        let h = build_hierarchy(&n_i, &all, &p, &q, Aggregation::Aio).unwrap();
        assert_eq!(h.n_p.rows(), 1);
        assert_eq!(h.n_g, h.n_p);

        let v = Tensor2::from_rows(&[[0.5, -1.0], [0.5, -1.0], [0.5, -1.0]]).unwrap();
        let part = Partition::from_groups(3, vec![set(&[0, 1])]).unwrap();
        let h = build_hierarchy(&v, &part, &p, &q, Aggregation::Aio).unwrap();
        for t in [&h.n_p, &h.n_g] {
            assert!((t[(0, 0)] - 0.5).abs() < 1e-12 && (t[(0, 1)] + 1.0).abs() < 1e-12);
        }
        assert!(build_hierarchy(
            &n_i,
            &Partition::all_singletons(2),
            &p,
            &q,
            Aggregation::Aio
        )
        .is_err());
    }

    #[test]
    fn reordering_groups_permutes_group_nodes() {
        let p = aio(2, 6);
        let n_i =
            Tensor2::from_rows(&[[1.0, 0.0], [0.0, 2.0], [3.0, 1.0], [-1.0, 0.5], [0.2, 0.2]])
                .unwrap();
        let a = Partition::from_groups(5, vec![set(&[0, 1]), set(&[2, 3, 4])]).unwrap();
        let b = Partition::from_groups(5, vec![set(&[2, 3, 4]), set(&[0, 1])]).unwrap();
        let ha = build_hierarchy(&n_i, &a, &p, &p, Aggregation::Aio).unwrap();
        let hb = build_hierarchy(&n_i, &b, &p, &p, Aggregation::Aio).unwrap();
        assert_eq!(ha.n_p.row(0), hb.n_p.row(1));
        assert_eq!(ha.n_p.row(1), hb.n_p.row(0));
        for (x, y) in ha.n_g.data().iter().zip(hb.n_g.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn heads(d: usize, zero: bool) -> Heads {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mk = |dims: Vec<usize>, rng: &mut ChaCha8Rng| {
            let spec = MlpSpec::new(dims, OutputActivation::Sigmoid).unwrap();
            let mut m = MlpParams::init(spec, rng).unwrap();
            if zero {
                m.zero_output_layer();
            }
            m
        };
        Heads {
            fi: mk(vec![2 * d, d, d, 4], &mut rng),
            fp: mk(vec![2 * d, d, d, 3], &mut rng),
            fg: mk(vec![d, d, 2], &mut rng),
        }
    }

    #[test]
    fn readout_shapes_and_zero_heads() {
        let p = aio(2, 7);
        let n_i = Tensor2::from_rows(&[[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]]).unwrap();
        let part = Partition::from_groups(3, vec![set(&[0, 2])]).unwrap();
        let h = build_hierarchy(&n_i, &part, &p, &p, Aggregation::Aio).unwrap();
        let out = t2d_readout(&h, &heads(2, true), FeedbackFlags::default()).unwrap();
        assert_eq!(
            (out.a_i.shape(), out.a_p.shape(), out.a_g.shape()),
            ((3, 4), (1, 3), (1, 2))
        );
        for t in [&out.a_i, &out.a_p, &out.a_g] {
            assert!(t.data().iter().all(|&v| v == 0.5));
        }

        let single = Tensor2::row_vector(&[0.4, 0.1]);
        let h = build_hierarchy(
            &single,
            &Partition::all_singletons(1),
            &p,
            &p,
            Aggregation::Aio,
        )
        .unwrap();
        let out = t2d_readout(&h, &heads(2, false), FeedbackFlags::default()).unwrap();
        assert_eq!((out.a_i.rows(), out.a_p.rows(), out.a_g.rows()), (1, 0, 1));
    }

    #[test]
    fn cutting_global_feedback_isolates_individual_readout() {
        let p = aio(2, 8);
        let n_i = Tensor2::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let mut h = build_hierarchy(
            &n_i,
            &Partition::all_singletons(2),
            &p,
            &p,
            Aggregation::Aio,
        )
        .unwrap();
        let hd = heads(2, false);
        let flags = FeedbackFlags {
            global_to_individual: false,
            global_to_group: true,
        };
        let before = t2d_readout(&h, &hd, flags).unwrap();
        h.n_g = Tensor2::row_vector(&[9.0, -9.0]);
        let after = t2d_readout(&h, &hd, flags).unwrap();
        assert_eq!(before.a_i, after.a_i);
        assert_ne!(before.a_g, after.a_g);
        let coupled = t2d_readout(&h, &hd, FeedbackFlags::default()).unwrap();
        assert_ne!(coupled.a_i, after.a_i);
    }
}
