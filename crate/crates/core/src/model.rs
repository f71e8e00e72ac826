//! Model configuration, trainable parameters and the recorded forward pass.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::Partition;
use crate::data::{FrameAnnotation, LabelVocab};
use crate::error::{Error, Result};
use crate::graph::{edge_affinity_var, individual_repr_var, node_update_var, ResidualFlags};
use crate::hierarchy::{
    build_hierarchy_var, distance_affinity, distance_mask, relation_var, spatial_distance_matrix,
    t2d_readout_var, Aggregation, AioParams, AioVars, FeedbackFlags, HeadVars, Heads,
    HierarchyVars, ReadoutVars, RelationBundle, SceneGeometry,
};
use crate::nn::weights::{load_weights, save_weights};
use crate::nn::{MlpParams, MlpSpec, MlpVars, OutputActivation, ParamSet, Tape, Tensor2, Var};

/// Switches that remove or replace one component of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_residual_f: bool,
    pub no_fhat: bool,
    pub euclid_dist: bool,
    pub no_dbreve: bool,
    pub no_e: bool,
    pub maxpool_agg: bool,
    pub no_g2i: bool,
    pub no_g2p: bool,
}

impl Ablations {
    pub fn residual(&self) -> ResidualFlags {
        ResidualFlags {
            use_f: !self.no_residual_f,
            use_fhat: !self.no_fhat,
        }
    }

    pub fn feedback(&self) -> FeedbackFlags {
        FeedbackFlags {
            global_to_individual: !self.no_g2i,
            global_to_group: !self.no_g2p,
        }
    }

    pub fn aggregation(&self) -> Aggregation {
        if self.maxpool_agg {
            Aggregation::MaxPool
        } else {
            Aggregation::Aio
        }
    }

    /// Names of the enabled switches, in declaration order.
    pub fn enabled(&self) -> Vec<&'static str> {
        [
            ("no_residual_f", self.no_residual_f),
            ("no_fhat", self.no_fhat),
            ("euclid_dist", self.euclid_dist),
            ("no_dbreve", self.no_dbreve),
            ("no_e", self.no_e),
            ("maxpool_agg", self.maxpool_agg),
            ("no_g2i", self.no_g2i),
            ("no_g2p", self.no_g2p),
        ]
        .into_iter()
        .filter_map(|(n, on)| on.then_some(n))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Hidden width of the readout heads; defaults to `feature_dim`.
    pub hidden_dim: Option<usize>,
    pub num_actions: usize,
    pub num_social: usize,
    pub num_global: usize,
    /// Weight of `E` against the distance affinity in the relation matrix.
    pub lambda: f64,
    /// Distance threshold as a fraction of the image width.
    pub rho_ratio: f64,
    pub ablations: Ablations,
    /// Use one aggregation parameter set for both hierarchy levels.
    pub shared_aio: bool,
    pub gcn_rounds: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            hidden_dim: None,
            num_actions: 27,
            num_social: 11,
            num_global: 7,
            lambda: 0.5,
            rho_ratio: 0.2,
            ablations: Ablations::default(),
            shared_aio: true,
            gcn_rounds: 1,
        }
    }
}

impl ModelConfig {
    pub fn for_vocab(feature_dim: usize, vocab: &LabelVocab) -> Self {
        Self {
            feature_dim,
            num_actions: vocab.num_actions(),
            num_social: vocab.num_social(),
            num_global: vocab.num_global(),
            ..Default::default()
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_dim.unwrap_or(self.feature_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden() == 0 {
            return Err(Error::config("feature and hidden dims must be positive"));
        }
        if self.num_actions == 0 || self.num_social == 0 || self.num_global == 0 {
            return Err(Error::config("label counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.rho_ratio.is_nan() || self.rho_ratio <= 0.0 {
            return Err(Error::config(format!(
                "rho ratio {} must be positive",
                self.rho_ratio
            )));
        }
        if self.gcn_rounds == 0 {
            return Err(Error::config("gcn_rounds must be at least 1"));
        }
        let a = &self.ablations;
        if a.no_residual_f && a.no_fhat {
            return Err(Error::config(
                "no_residual_f and no_fhat remove both operands",
            ));
        }
        if a.no_dbreve && a.no_e {
            return Err(Error::config(
                "no_dbreve and no_e remove both relation terms",
            ));
        }
        Ok(())
    }

    /// Mixing weight after ablations: 1 without the distance term, 0 without `E`.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablations.no_dbreve {
            1.0
        } else if self.ablations.no_e {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn check_vocab(&self, vocab: &LabelVocab) -> Result<()> {
        let got = (vocab.num_actions(), vocab.num_social(), vocab.num_global());
        let want = (self.num_actions, self.num_social, self.num_global);
        if got != want {
            return Err(Error::config(format!(
                "model label counts {want:?} do not match vocabulary {got:?}"
            )));
        }
        Ok(())
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub f1: MlpParams,
    pub f2: MlpParams,
    pub fn_: MlpParams,
    pub aio: AioParams,
    /// Separate set for the global level when `shared_aio` is off.
    pub aio_global: Option<AioParams>,
    pub heads: Heads,
}

fn head_spec(dims: Vec<usize>) -> Result<MlpSpec> {
    MlpSpec::new(dims, OutputActivation::Sigmoid)
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (config.feature_dim, config.hidden());
        let f1 = MlpParams::init(MlpSpec::linear(d, d), &mut rng)?;
        let f2 = MlpParams::init(MlpSpec::projection(d, d), &mut rng)?;
        let fn_ = MlpParams::init(MlpSpec::linear(d, d), &mut rng)?;
        let aio = AioParams::init(d, &mut rng)?;
        let aio_global = if config.shared_aio {
            None
        } else {
            Some(AioParams::init(d, &mut rng)?)
        };
        let heads = Heads {
            fi: MlpParams::init(head_spec(vec![2 * d, h, h, config.num_actions])?, &mut rng)?,
            fp: MlpParams::init(head_spec(vec![2 * d, h, h, config.num_social])?, &mut rng)?,
            fg: MlpParams::init(head_spec(vec![d, h, config.num_global])?, &mut rng)?,
        };
        Ok(Self {
            config,
            f1,
            f2,
            fn_,
            aio,
            aio_global,
            heads,
        })
    }

    /// Zeroes the output layer of every readout head, so all label
    /// probabilities start at exactly 0.5.
    pub fn zero_heads(&mut self) {
        self.heads.fi.zero_output_layer();
        self.heads.fp.zero_output_layer();
        self.heads.fg.zero_output_layer();
    }

    pub fn global_aio(&self) -> &AioParams {
        self.aio_global.as_ref().unwrap_or(&self.aio)
    }

    fn modules(&self) -> Vec<(&'static str, &MlpParams)> {
        let mut out = vec![
            ("f1", &self.f1),
            ("f2", &self.f2),
            ("fn", &self.fn_),
            ("aio.g1", &self.aio.g1),
            ("aio.g2", &self.aio.g2),
        ];
        if let Some(g) = &self.aio_global {
            out.push(("aio_global.g1", &g.g1));
            out.push(("aio_global.g2", &g.g2));
        }
        out.extend([
            ("fi", &self.heads.fi),
            ("fp", &self.heads.fp),
            ("fg", &self.heads.fg),
        ]);
        out
    }

    fn modules_mut(&mut self) -> Vec<&mut MlpParams> {
        let mut out = vec![
            &mut self.f1,
            &mut self.f2,
            &mut self.fn_,
            &mut self.aio.g1,
            &mut self.aio.g2,
        ];
        if let Some(g) = &mut self.aio_global {
            out.push(&mut g.g1);
            out.push(&mut g.g2);
        }
        out.extend([&mut self.heads.fi, &mut self.heads.fp, &mut self.heads.fg]);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor2)> {
        self.modules()
            .into_iter()
            .flat_map(|(prefix, m)| {
                m.named_tensors()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{n}"), t))
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.data().len())
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor2)> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        save_weights(path, &tensors, serde_json::json!({ "model": self.config }))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = load_weights(path)?;
        let corrupt = |message: String| Error::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        let config: ModelConfig = serde_json::from_value(manifest.meta["model"].clone())
            .map_err(|e| corrupt(format!("model config: {e}")))?;
        let mut params = Self::init(config, 0)?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != tensors.len() {
            return Err(corrupt(format!(
                "expected {} tensors, found {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((want, slot), (name, t)) in names.iter().zip(params.params_mut()).zip(tensors) {
            if *want != name || slot.shape() != t.shape() {
                return Err(corrupt(format!(
                    "tensor {name} {:?} does not match expected {want} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let f1 = self.f1.register(tape);
        let f2 = self.f2.register(tape);
        let fn_ = self.fn_.register(tape);
        let aio = self.aio.register(tape);
        let aio_global = self.aio_global.as_ref().map(|g| g.register(tape));
        let heads = self.heads.register(tape);
        ModelVars {
            f1,
            f2,
            fn_,
            aio,
            aio_global,
            heads,
        }
    }
}

impl ParamSet for ModelParams {
    fn param_names(&self) -> Vec<String> {
        self.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    fn params(&self) -> Vec<&Tensor2> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        self.modules_mut()
            .into_iter()
            .flat_map(|m| m.tensors_mut())
            .collect()
    }
}

/// Tape handles for every parameter, in [`ModelParams::named_tensors`] order
/// via [`ModelVars::leaves`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub f1: MlpVars,
    pub f2: MlpVars,
    pub fn_: MlpVars,
    pub aio: AioVars,
    pub aio_global: Option<AioVars>,
    pub heads: HeadVars,
}

impl ModelVars {
    pub fn leaves(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self
            .f1
            .leaves()
            .chain(self.f2.leaves())
            .chain(self.fn_.leaves())
            .chain(self.aio.leaves())
            .collect();
        if let Some(g) = &self.aio_global {
            out.extend(g.leaves());
        }
        out.extend(self.heads.leaves());
        out
    }

    fn global_aio(&self) -> &AioVars {
        self.aio_global.as_ref().unwrap_or(&self.aio)
    }
}

/// Geometry-derived constants of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInputs {
    pub features: Tensor2,
    pub d: Tensor2,
    pub dbreve: Tensor2,
    pub mask: Tensor2,
    pub rho: f64,
}

impl FrameInputs {
    pub fn new(frame: &FrameAnnotation, config: &ModelConfig) -> Result<Self> {
        let features = frame.features();
        if features.cols() != config.feature_dim {
            return Err(Error::data(
                None,
                format!(
                    "frame {}: feature dim {} but model expects {}",
                    frame.frame_id,
                    features.cols(),
                    config.feature_dim
                ),
            ));
        }
        let geom = SceneGeometry::from_frame(frame);
        let d = spatial_distance_matrix(&geom, config.ablations.euclid_dist)?;
        let rho = config.rho_ratio * geom.image_width;
        Ok(Self {
            features,
            dbreve: distance_affinity(&d),
            mask: distance_mask(&d, rho)?,
            d,
            rho,
        })
    }
}

/// Handles produced by the graph stage.
#[derive(Debug, Clone, Copy)]
pub struct GraphVars {
    pub e: Var,
    pub r: Var,
    pub n_i: Var,
}

/// Edge affinities, node update(s), individual nodes and the relation matrix.
pub fn graph_stage(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    inputs: &FrameInputs,
) -> Result<GraphVars> {
    let f = tape.constant(inputs.features.clone());
    let (_, e) = edge_affinity_var(tape, f, &vars.f1, &vars.f2, Some(&inputs.mask))?;
    let mut fhat = node_update_var(tape, f, e, &vars.fn_)?;
    for _ in 1..cfg.gcn_rounds {
        fhat = node_update_var(tape, fhat, e, &vars.fn_)?;
    }
    let n_i = individual_repr_var(tape, f, fhat, cfg.ablations.residual())?;
    let r = relation_var(tape, e, &inputs.dbreve, cfg.effective_lambda())?;
    Ok(GraphVars { e, r, n_i })
}

/// Aggregation over `partition` followed by the three readouts.
pub fn hierarchy_stage(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    n_i: Var,
    partition: &Partition,
) -> Result<(HierarchyVars, ReadoutVars)> {
    let agg = cfg.ablations.aggregation();
    let h = build_hierarchy_var(tape, n_i, partition, &vars.aio, vars.global_aio(), agg)?;
    let out = t2d_readout_var(tape, &h, &vars.heads, cfg.ablations.feedback())?;
    Ok((h, out))
}

impl ModelParams {
    /// Relation bundle of a frame under the current parameters.
    pub fn relation_bundle(&self, frame: &FrameAnnotation) -> Result<RelationBundle> {
        let inputs = FrameInputs::new(frame, &self.config)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let g = graph_stage(&mut tape, &vars, &self.config, &inputs)?;
        Ok(RelationBundle {
            r: tape.value(g.r).clone(),
            d: inputs.d,
            dbreve: inputs.dbreve,
            mask: inputs.mask,
            lambda: self.config.effective_lambda(),
            rho: inputs.rho,
        })
    }
}
