//! Built-in consistency checks run by `pargraph selftest`.

use std::collections::BTreeSet;
use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::{cluster_groups, ClusterConfig, Partition};
use crate::data::{synth_generate, LabelSet, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::{match_groups, member_iou, multilabel_prf, passes};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::finite_diff_check;
use crate::train::{loss_and_gradients, LossWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{tag} {:<18} {}\n", c.name, c.detail));
        }
        out
    }
}

fn record(name: &'static str, outcome: Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_selftest() -> SelftestReport {
    SelftestReport {
        checks: vec![
            record("gradient", check_gradient()),
            record("group-matching", check_matching()),
            record("label-prf", check_label_prf()),
            record("clustering", check_clustering()),
            record("weights-integrity", check_weights_integrity()),
        ],
    }
}

fn small_model(feature_dim: usize) -> ModelConfig {
    ModelConfig {
        feature_dim,
        hidden_dim: Some(6),
        num_actions: 5,
        num_social: 4,
        num_global: 3,
        ..ModelConfig::default()
    }
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        n_frames: 1,
        n_subjects: 5,
        n_groups: 2,
        feature_dim: 4,
        num_actions: 5,
        num_social: 4,
        num_global: 3,
        ..SynthConfig::default()
    }
}

fn check_gradient() -> Result<(bool, String)> {
    let frame = synth_generate(&small_synth(), 3)?.remove(0);
    let mut params = ModelParams::init(small_model(frame.feature_dim()), 5)?;
    let weights = LossWeights::default();
    let report = finite_diff_check(&mut params, 1e-5, |p| {
        loss_and_gradients(p, &frame, &weights).map(|(l, g)| (l.total, g))
    })?;
    Ok((
        report.max_rel_error < 1e-4,
        format!(
            "max relative error {:.2e} over {} entries",
            report.max_rel_error, report.entries_checked
        ),
    ))
}

fn random_groups(rng: &mut ChaCha8Rng, n: usize) -> Vec<BTreeSet<usize>> {
    let k = rng.random_range(1..=3);
    let mut groups = vec![BTreeSet::new(); k];
    for i in 0..n {
        let slot = rng.random_range(0..=k);
        if slot < k {
            groups[slot].insert(i);
        }
    }
    groups.retain(|g| !g.is_empty());
    groups
}

/// Best total IoU of a one-to-one matching, by exhaustive search.
fn brute_force_matching(
    pred: &[BTreeSet<usize>],
    gt: &[BTreeSet<usize>],
    theta: f64,
    used: &mut Vec<bool>,
    i: usize,
) -> f64 {
    if i == pred.len() {
        return 0.0;
    }
    let mut best = brute_force_matching(pred, gt, theta, used, i + 1);
    for j in 0..gt.len() {
        let iou = member_iou(&pred[i], &gt[j]);
        if !used[j] && pred[i].len() >= 2 && gt[j].len() >= 2 && passes(iou, theta) {
            used[j] = true;
            best = best.max(iou + brute_force_matching(pred, gt, theta, used, i + 1));
            used[j] = false;
        }
    }
    best
}

fn check_matching() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 300;
    let mut mismatches = 0;
    for _ in 0..trials {
        let n = rng.random_range(2..=8);
        let (pred, gt) = (random_groups(&mut rng, n), random_groups(&mut rng, n));
        let theta = [0.0, 0.5, 0.75, 1.0][rng.random_range(0..4)];
        let ours: f64 = match_groups(&pred, &gt, theta).iter().map(|m| m.iou).sum();
        let oracle = brute_force_matching(&pred, &gt, theta, &mut vec![false; gt.len()], 0);
        if (ours - oracle).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    Ok((
        mismatches == 0,
        format!("{mismatches}/{trials} disagreements with exhaustive search"),
    ))
}

fn check_label_prf() -> Result<(bool, String)> {
    let pred: LabelSet = [0, 2, 4].into();
    let gt: LabelSet = [2, 3].into();
    let prf = multilabel_prf(&pred, &gt, 5)?;
    let expected = (1.0 / 3.0, 0.5, 0.4);
    let err = (prf.precision - expected.0)
        .abs()
        .max((prf.recall - expected.1).abs())
        .max((prf.f1 - expected.2).abs());
    Ok((
        err < 1e-12,
        format!("P {:.4} R {:.4} F {:.4}", prf.precision, prf.recall, prf.f1),
    ))
}

fn check_clustering() -> Result<(bool, String)> {
    let truth = Partition::from_groups(9, vec![[0, 3, 5].into(), [1, 2].into(), [4, 6, 8].into()])?
        .canonical();
    let got = cluster_groups(&truth.to_relation(), &ClusterConfig::default())?.canonical();
    Ok((
        got == truth,
        format!("{} groups recovered", got.groups().len()),
    ))
}

fn check_weights_integrity() -> Result<(bool, String)> {
    let dir = std::env::temp_dir().join(format!("pargraph-selftest-{}", std::process::id()));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("model.json");
    let params = ModelParams::init(small_model(4), 1)?;
    params.save(&path)?;
    let intact = ModelParams::load(&path)? == params;
    let blob = path.with_extension("bin");
    let mut bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    let detected = matches!(ModelParams::load(&path), Err(Error::Corrupt { .. }));
    let _ = fs::remove_dir_all(&dir);
    Ok((
        intact && detected,
        format!("round trip {}, flipped bit detected {}", intact, detected),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let report = run_selftest();
        assert!(report.passed(), "{}", report.summary());
        assert_eq!(report.checks.len(), 5);
    }
}
