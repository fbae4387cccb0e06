//! Semi-supervised objective: labeled loss, the agreement gate that turns
//! unlabeled predictions into pseudo-targets, sharpening, the consistency
//! loss on augmented views, and the training loop.

mod trainer;

pub use trainer::{
    evaluate, evaluate_detailed, initialize_csr, predict_texts, CheckRecord, EvalPoint, LogRecord, StepLosses, StepRecord, TrainConfig, TrainData, TrainOutcome,
    Trainer,
};

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, DualHeadOutputs, HeadValues};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Minimum max semantic probability.
    pub confid1: f64,
    /// Minimum max matching probability.
    pub confid2: f64,
    /// Sharpening temperature.
    pub temperature: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            confid1: 0.95,
            confid2: 0.7,
            temperature: 0.5,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("confid1", self.confid1),
            ("confid2", self.confid2),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Which gate conditions are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// Both confidences and argmax agreement.
    #[default]
    Agreement,
    /// Semantic confidence only; the pseudo-label is the semantic argmax.
    SemanticConfidence,
    /// Matching confidence only; the pseudo-label is the matching argmax.
    MatchingConfidence,
}

/// Direction of the consistency KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(target || prediction)`
    #[default]
    TargetToPrediction,
    /// `KL(prediction || target)`
    PredictionToTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTarget {
    /// Semantic confidence, matching confidence, argmax agreement.
    pub conditions: [bool; 3],
    pub passed: bool,
    /// Sharpened semantic distribution, present iff passed with a semantic head.
    pub sharpened: Option<Vec<f64>>,
    pub label: Option<usize>,
}

/// Temperature softmax. `t` must be positive.
pub fn sharpen(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| ((x - max) / t).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

fn max_of(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Applies the gate to outputs computed on the original unlabeled text.
/// Conditions that involve an absent head count as unmet.
pub fn gate(values: &HeadValues, cfg: &GateConfig, mode: GateMode) -> Result<Vec<PseudoTarget>> {
    let rows = values
        .semantic_probs
        .as_ref()
        .or(values.matching_probs.as_ref())
        .map_or(0, Vec::len);
    (0..rows)
        .map(|r| {
            let ps = values.semantic_probs.as_ref().map(|p| &p[r]);
            let pm = values.matching_probs.as_ref().map(|p| &p[r]);
            let c1 = ps.is_some_and(|p| max_of(p) >= cfg.confid1);
            let c2 = pm.is_some_and(|p| max_of(p) >= cfg.confid2);
            let c3 = matches!((ps, pm), (Some(a), Some(b)) if argmax(a) == argmax(b));
            let (passed, label) = match mode {
                GateMode::Agreement => (c1 && c2 && c3, pm.map(|p| argmax(p))),
                GateMode::SemanticConfidence => (c1, ps.map(|p| argmax(p))),
                GateMode::MatchingConfidence => (c2, pm.map(|p| argmax(p))),
            };
            let sharpened = match (&values.semantic_logits, passed) {
                (Some(logits), true) => Some(sharpen(&logits[r], cfg.temperature)?),
                _ => None,
            };
            Ok(PseudoTarget {
                conditions: [c1, c2, c3],
                passed,
                sharpened,
                label: if passed { label } else { None },
            })
        })
        .collect()
}

fn one_hot(labels: &[usize], k: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0f64; labels.len() * k];
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} outside [0, {k})")));
        }
        v[r * k + y] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), k), device)?.to_dtype(dtype)?)
}

fn clamped_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?.log()?)
}

/// Per-row `sum_k -[t log p + (1-t) log(1-p)]`.
fn bce_rows(p: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = targets.mul(&pc.log()?)?;
    let neg = targets.affine(-1.0, 1.0)?.mul(&pc.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.sum(D::Minus1)?.neg()?)
}

/// Mean over the batch of semantic cross-entropy plus matching BCE summed
/// over all classes. Absent heads contribute nothing.
pub fn labeled_loss(out: &DualHeadOutputs, labels: &[usize]) -> Result<Tensor> {
    let any = out
        .semantic_probs
        .as_ref()
        .or(out.matching_probs.as_ref())
        .ok_or_else(|| Error::Config("no head outputs".into()))?;
    let (b, k) = any.dims2()?;
    if labels.len() != b {
        return Err(Error::Data(format!("{} labels for {b} rows", labels.len())));
    }
    let y = one_hot(labels, k, any.dtype(), any.device())?;
    let mut per_row = Tensor::zeros(b, any.dtype(), any.device())?;
    if let Some(ps) = &out.semantic_probs {
        per_row = (per_row - y.mul(&clamped_log(ps)?)?.sum(D::Minus1)?)?;
    }
    if let Some(pm) = &out.matching_probs {
        per_row = (per_row + bce_rows(pm, &y)?)?;
    }
    Ok(per_row.mean(0)?)
}

/// Consistency loss on the augmented view: mean over gated rows of the KL
/// between sharpened target and prediction plus matching BCE against the
/// one-hot pseudo-label. Zero when no row passed.
pub fn unlabeled_loss(out_aug: &DualHeadOutputs, targets: &[PseudoTarget], direction: KlDirection) -> Result<Tensor> {
    let any = out_aug
        .semantic_probs
        .as_ref()
        .or(out_aug.matching_probs.as_ref())
        .ok_or_else(|| Error::Config("no head outputs".into()))?;
    let (b, k) = any.dims2()?;
    let (dtype, dev) = (any.dtype(), any.device());
    if targets.len() != b {
        return Err(Error::Data(format!("{} targets for {b} rows", targets.len())));
    }
    let passed = targets.iter().filter(|t| t.passed).count();
    if passed == 0 {
        return Ok(Tensor::zeros((), dtype, dev)?);
    }
    let mask: Vec<f64> = targets.iter().map(|t| f64::from(u8::from(t.passed))).collect();
    let mask = Tensor::from_vec(mask, b, dev)?.to_dtype(dtype)?;
    let mut per_row = Tensor::zeros(b, dtype, dev)?;
    if let Some(q) = &out_aug.semantic_probs {
        let mut p = Vec::with_capacity(b * k);
        for t in targets {
            match (&t.sharpened, t.passed) {
                (Some(s), true) => p.extend_from_slice(s),
                _ => p.extend(std::iter::repeat(1.0 / k as f64).take(k)),
            }
        }
        let p = Tensor::from_vec(p, (b, k), dev)?.to_dtype(dtype)?;
        let kl = match direction {
            KlDirection::TargetToPrediction => p.mul(&(clamped_log(&p)? - clamped_log(q)?)?)?,
            KlDirection::PredictionToTarget => q.mul(&(clamped_log(q)? - clamped_log(&p)?)?)?,
        };
        per_row = (per_row + kl.sum(D::Minus1)?)?;
    }
    if let Some(pm) = &out_aug.matching_probs {
        let labels: Vec<usize> = targets.iter().map(|t| t.label.unwrap_or(0)).collect();
        let y = one_hot(&labels, k, dtype, dev)?;
        per_row = (per_row + bce_rows(pm, &y)?)?;
    }
    Ok((per_row.mul(&mask)?.sum_all()? / passed as f64)?)
}

/// Scalar value of a 0-d loss tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(ps: Option<Vec<Vec<f64>>>, pm: Option<Vec<Vec<f64>>>) -> DualHeadOutputs {
        let t = |v: Vec<Vec<f64>>| Tensor::new(v, &Device::Cpu).unwrap();
        let rows = ps.as_ref().or(pm.as_ref()).unwrap().len();
        DualHeadOutputs {
            semantic_logits: None,
            semantic_probs: ps.map(t),
            matching_logits: None,
            matching_probs: pm.map(t),
            empty_text: vec![false; rows],
        }
    }

    #[test]
    fn uniform_two_class_loss() {
        let out = probs(Some(vec![vec![0.5, 0.5]]), Some(vec![vec![0.5, 0.5]]));
        let l = scalar(&labeled_loss(&out, &[0]).unwrap()).unwrap();
        assert!((l - 3.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn perfect_prediction_loss_vanishes() {
        let out = probs(Some(vec![vec![1.0, 0.0]]), Some(vec![vec![1.0, 0.0]]));
        assert!(scalar(&labeled_loss(&out, &[0]).unwrap()).unwrap() < 1e-6);
    }

    #[test]
    fn hand_case_three_classes() {
        let out = probs(Some(vec![vec![0.2, 0.7, 0.1]]), Some(vec![vec![0.1, 0.8, 0.2]]));
        let l = scalar(&labeled_loss(&out, &[1]).unwrap()).unwrap();
        let ce = -(0.7f64).ln();
        let bce = -(0.9f64).ln() - (0.8f64).ln() - (0.8f64).ln();
        assert!((ce - 0.3567).abs() < 1e-4 && (bce - 0.5517).abs() < 1e-4);
        assert!((l - (ce + bce)).abs() < 1e-9);
    }

    #[test]
    fn sharpen_cases() {
        let s = sharpen(&[2.0, 1.0, 0.0], 0.5).unwrap();
        let expect = [0.8668, 0.1173, 0.0159];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(sharpen(&[1.0, 0.0], 0.0).is_err());
        assert!(sharpen(&[1.0, 0.5, 0.0], 0.01).unwrap()[0] > 0.99);
    }

    fn values(ps: Vec<f64>, pm: Vec<f64>) -> HeadValues {
        HeadValues {
            semantic_logits: Some(vec![ps.iter().map(|p| p.ln()).collect()]),
            semantic_probs: Some(vec![ps]),
            matching_probs: Some(vec![pm]),
        }
    }

    #[test]
    fn gate_examples() {
        let cfg = GateConfig::default();
        let t = &gate(&values(vec![0.97, 0.02, 0.01], vec![0.8, 0.3, 0.1]), &cfg, GateMode::Agreement).unwrap()[0];
        assert!(t.passed);
        assert_eq!(t.label, Some(0));
        assert!((t.sharpened.as_ref().unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let t = &gate(&values(vec![0.97, 0.02, 0.01], vec![0.3, 0.8, 0.1]), &cfg, GateMode::Agreement).unwrap()[0];
        assert!(!t.passed);
        assert_eq!(t.conditions, [true, true, false]);
        let t = &gate(&values(vec![0.94, 0.05, 0.01], vec![0.99, 0.0, 0.0]), &cfg, GateMode::Agreement).unwrap()[0];
        assert!(!t.passed);
        assert_eq!(t.label, None);
    }

    #[test]
    fn single_condition_modes() {
        let cfg = GateConfig::default();
        let v = values(vec![0.97, 0.02, 0.01], vec![0.3, 0.8, 0.1]);
        let t = &gate(&v, &cfg, GateMode::SemanticConfidence).unwrap()[0];
        assert_eq!((t.passed, t.label), (true, Some(0)));
        let t = &gate(&v, &cfg, GateMode::MatchingConfidence).unwrap()[0];
        assert_eq!((t.passed, t.label), (true, Some(1)));
    }

    #[test]
    fn kl_hand_case_and_zero_cases() {
        let target = PseudoTarget {
            conditions: [true; 3],
            passed: true,
            sharpened: Some(vec![0.9, 0.1]),
            label: Some(0),
        };
        let out = probs(Some(vec![vec![0.6, 0.4]]), None);
        let l = scalar(&unlabeled_loss(&out, &[target.clone()], KlDirection::TargetToPrediction).unwrap()).unwrap();
        assert!((l - 0.2263).abs() < 1e-4);

        let out = probs(Some(vec![vec![0.9, 0.1]]), Some(vec![vec![1.0, 0.0]]));
        let l = scalar(&unlabeled_loss(&out, &[target.clone()], KlDirection::TargetToPrediction).unwrap()).unwrap();
        assert!(l.abs() < 1e-6);

        let failed = PseudoTarget {
            conditions: [false; 3],
            passed: false,
            sharpened: None,
            label: None,
        };
        let l = unlabeled_loss(&out, &[failed], KlDirection::TargetToPrediction).unwrap();
        assert_eq!(scalar(&l).unwrap(), 0.0);
    }

    #[test]
    fn reverse_kl_direction() {
        let target = PseudoTarget {
            conditions: [true; 3],
            passed: true,
            sharpened: Some(vec![0.9, 0.1]),
            label: Some(0),
        };
        let out = probs(Some(vec![vec![0.6, 0.4]]), None);
        let l = scalar(&unlabeled_loss(&out, &[target], KlDirection::PredictionToTarget).unwrap()).unwrap();
        let expect = 0.6 * (0.6f64 / 0.9).ln() + 0.4 * (0.4f64 / 0.1).ln();
        assert!((l - expect).abs() < 1e-9);
    }

    #[test]
    fn gate_config_validation() {
        GateConfig::default().validate().unwrap();
        assert!(GateConfig {
            temperature: 0.0,
            ..GateConfig::default()
        }
        .validate()
        .is_err());
        assert!(GateConfig {
            confid1: 1.2,
            ..GateConfig::default()
        }
        .validate()
        .is_err());
    }
}
