//! Fast-weight update rules as pure state-transition functions.
//!
//! Each rule maps the previous fast weight `W` (shape `d_out × d_key`) and the
//! per-step inputs produced by the slow net to the next fast weight. Inputs
//! arrive already mapped into their bounded ranges; the raw-to-bounded
//! squashing lives in [`crate::layer`].
//!
//! Every rule except Oja's can also be written as `W' = B·W·A + C` with
//! `A`, `B`, `C` independent of `W`; [`canonical_transition`] returns that
//! triple and is cross-checked against [`apply_rule`] in the tests.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{config_err, FwpError, Result};
use crate::tensor::{outer, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    /// `W + v⊗k`
    Additive,
    /// `W + η(v − Wk)⊗k`
    Delta,
    /// `W + η v⊗(k − Wᵀv)`
    Oja,
    /// `λW + v⊗k` with a constant decay. `None` means the layer supplies a
    /// per-head constant through [`StepInputs::lam`].
    RetNet { lambda: Option<f64> },
    /// `λ_t W + v⊗k`
    Mamba2,
    /// `λ_t W + (1 − λ_t) v⊗k`
    GatedRfa,
    /// `λ_t W + η_t v⊗k`
    Mlstm,
    /// `(a⊗1)⊙W + v⊗k`
    Gla,
    /// `λ_t W + η_t(v − Wk)⊗k`
    GatedDelta,
    /// `n_h` delta-rule micro-steps per token.
    DeltaProduct { n_h: usize },
}

impl UpdateRule {
    pub const ALL_NAMES: [&'static str; 10] = [
        "additive",
        "delta",
        "oja",
        "retnet",
        "mamba2",
        "gated_rfa",
        "mlstm",
        "gla",
        "gated_delta",
        "delta_product",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            UpdateRule::Additive => "additive",
            UpdateRule::Delta => "delta",
            UpdateRule::Oja => "oja",
            UpdateRule::RetNet { .. } => "retnet",
            UpdateRule::Mamba2 => "mamba2",
            UpdateRule::GatedRfa => "gated_rfa",
            UpdateRule::Mlstm => "mlstm",
            UpdateRule::Gla => "gla",
            UpdateRule::GatedDelta => "gated_delta",
            UpdateRule::DeltaProduct { .. } => "delta_product",
        }
    }

    /// Checks the variant's parameter ranges.
    pub fn validate(&self) -> Result<()> {
        match *self {
            UpdateRule::RetNet { lambda: Some(l) } if !(l > 0.0 && l <= 1.0) => {
                Err(config_err(format!("retnet lambda must lie in (0, 1], got {l}")))
            }
            UpdateRule::DeltaProduct { n_h: 0 } => {
                Err(config_err("delta_product needs at least one micro-step"))
            }
            _ => Ok(()),
        }
    }

    pub fn needs_eta(&self) -> bool {
        matches!(
            self,
            UpdateRule::Delta
                | UpdateRule::Oja
                | UpdateRule::Mlstm
                | UpdateRule::GatedDelta
                | UpdateRule::DeltaProduct { .. }
        )
    }

    /// Whether the rule consumes a per-step scalar decay from [`StepInputs::lam`].
    pub fn needs_lam(&self) -> bool {
        matches!(
            self,
            UpdateRule::RetNet { lambda: None }
                | UpdateRule::Mamba2
                | UpdateRule::GatedRfa
                | UpdateRule::Mlstm
                | UpdateRule::GatedDelta
        )
    }

    /// Whether the layer produces λ_t from the input (as opposed to a constant).
    pub fn has_dynamic_decay(&self) -> bool {
        matches!(
            self,
            UpdateRule::Mamba2 | UpdateRule::GatedRfa | UpdateRule::Mlstm | UpdateRule::GatedDelta
        )
    }

    pub fn needs_row_decay(&self) -> bool {
        matches!(self, UpdateRule::Gla)
    }

    /// Rules whose transition is a (scalar or row-wise) decay plus an
    /// additive write; these have a chunkwise form.
    pub fn is_decay_family(&self) -> bool {
        matches!(
            self,
            UpdateRule::RetNet { .. }
                | UpdateRule::Mamba2
                | UpdateRule::GatedRfa
                | UpdateRule::Mlstm
                | UpdateRule::Gla
        )
    }

    pub fn micro_steps(&self) -> usize {
        match self {
            UpdateRule::DeltaProduct { n_h } => *n_h,
            _ => 1,
        }
    }
}

impl fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateRule::RetNet { lambda: Some(l) } => write!(f, "retnet:{l}"),
            UpdateRule::DeltaProduct { n_h } => write!(f, "delta_product:{n_h}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for UpdateRule {
    type Err = FwpError;

    /// Parses `name` or `name:param` (`retnet:0.9`, `delta_product:2`).
    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let no_param = |rule: UpdateRule| match param {
            None => Ok(rule),
            Some(_) => Err(config_err(format!("rule `{name}` takes no parameter"))),
        };
        let rule = match name {
            "additive" => no_param(UpdateRule::Additive)?,
            "delta" => no_param(UpdateRule::Delta)?,
            "oja" => no_param(UpdateRule::Oja)?,
            "mamba2" => no_param(UpdateRule::Mamba2)?,
            "gated_rfa" => no_param(UpdateRule::GatedRfa)?,
            "mlstm" => no_param(UpdateRule::Mlstm)?,
            "gla" => no_param(UpdateRule::Gla)?,
            "gated_delta" => no_param(UpdateRule::GatedDelta)?,
            "retnet" => UpdateRule::RetNet {
                lambda: param
                    .map(|p| p.parse::<f64>().map_err(|e| config_err(format!("retnet lambda: {e}"))))
                    .transpose()?,
            },
            "delta_product" => UpdateRule::DeltaProduct {
                n_h: match param {
                    Some(p) => p
                        .parse::<usize>()
                        .map_err(|e| config_err(format!("delta_product n_h: {e}")))?,
                    None => 2,
                },
            },
            other => return Err(config_err(format!("unknown update rule `{other}`"))),
        };
        rule.validate()?;
        Ok(rule)
    }
}

impl Serialize for UpdateRule {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UpdateRule {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Slow-net outputs consumed by one update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    /// φ-mapped key, `d_key`.
    pub k_feat: Vector,
    /// Value, `d_out`.
    pub v: Vector,
    /// Learning rate ψ(β_t).
    pub eta: Option<f64>,
    /// Scalar decay λ_t.
    pub lam: Option<f64>,
    /// Per-row decay for GLA, `d_out`.
    pub a: Option<Vector>,
}

impl StepInputs {
    pub fn new(k_feat: Vector, v: Vector) -> Self {
        Self {
            k_feat,
            v,
            eta: None,
            lam: None,
            a: None,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = Some(eta);
        self
    }

    pub fn with_lam(mut self, lam: f64) -> Self {
        self.lam = Some(lam);
        self
    }

    pub fn with_row_decay(mut self, a: Vector) -> Self {
        self.a = Some(a);
        self
    }

    fn eta_for(&self, rule: &UpdateRule) -> Result<f64> {
        self.eta
            .ok_or_else(|| config_err(format!("rule `{}` needs eta", rule.name())))
    }

    fn lam_for(&self, rule: &UpdateRule) -> Result<f64> {
        match rule {
            UpdateRule::RetNet { lambda: Some(l) } => Ok(*l),
            _ => self
                .lam
                .ok_or_else(|| config_err(format!("rule `{}` needs lam", rule.name()))),
        }
    }

    fn row_decay_for(&self, rule: &UpdateRule) -> Result<&Vector> {
        self.a
            .as_ref()
            .ok_or_else(|| config_err(format!("rule `{}` needs a row decay", rule.name())))
    }

    fn check_dims(&self, d_out: usize, d_key: usize) -> Result<()> {
        if self.k_feat.dim() != d_key || self.v.dim() != d_out {
            return Err(FwpError::Shape(format!(
                "step inputs k:{} v:{} for fast weight {d_out}x{d_key}",
                self.k_feat.dim(),
                self.v.dim()
            )));
        }
        if let Some(a) = &self.a {
            if a.dim() != d_out {
                return Err(FwpError::Shape(format!(
                    "row decay has {} entries for {d_out} rows",
                    a.dim()
                )));
            }
        }
        Ok(())
    }
}

/// `W' = B · W · A + C`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalTransition {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
}

impl CanonicalTransition {
    pub fn apply(&self, w: &Mat) -> Mat {
        self.b.matmul(w).matmul(&self.a).add(&self.c)
    }
}

/// Why a rule has no state-independent transition.
#[derive(Debug, Clone, PartialEq)]
pub enum Canonical {
    Form(CanonicalTransition),
    /// Oja's transition would need `A` to depend on `W`.
    NotCanonical,
}

impl Canonical {
    pub fn form(self) -> Option<CanonicalTransition> {
        match self {
            Canonical::Form(t) => Some(t),
            Canonical::NotCanonical => None,
        }
    }
}

/// One update of the fast weight under `rule`.
pub fn apply_rule(rule: &UpdateRule, w: &Mat, s: &StepInputs) -> Result<Mat> {
    let (d_out, d_key) = w.shape();
    s.check_dims(d_out, d_key)?;
    let k = &s.k_feat;
    let v = &s.v;
    let next = match rule {
        UpdateRule::Additive => {
            let mut out = w.clone();
            out.add_outer(1.0, v, k);
            out
        }
        UpdateRule::Delta | UpdateRule::DeltaProduct { .. } => {
            let eta = s.eta_for(rule)?;
            let residual = v.sub(&w.matvec(k));
            let mut out = w.clone();
            out.add_outer(eta, &residual, k);
            out
        }
        UpdateRule::Oja => {
            let eta = s.eta_for(rule)?;
            let direction = k.sub(&w.tmatvec(v));
            let mut out = w.clone();
            out.add_outer(eta, v, &direction);
            out
        }
        UpdateRule::RetNet { .. } | UpdateRule::Mamba2 => {
            let lam = s.lam_for(rule)?;
            let mut out = w.scale(lam);
            out.add_outer(1.0, v, k);
            out
        }
        UpdateRule::GatedRfa => {
            let lam = s.lam_for(rule)?;
            let mut out = w.scale(lam);
            out.add_outer(1.0 - lam, v, k);
            out
        }
        UpdateRule::Mlstm => {
            let lam = s.lam_for(rule)?;
            let eta = s.eta_for(rule)?;
            let mut out = w.scale(lam);
            out.add_outer(eta, v, k);
            out
        }
        UpdateRule::Gla => {
            let a = s.row_decay_for(rule)?;
            let mut out = w.scale_rows(a);
            out.add_outer(1.0, v, k);
            out
        }
        UpdateRule::GatedDelta => {
            // The correction reads the undecayed W.
            let lam = s.lam_for(rule)?;
            let eta = s.eta_for(rule)?;
            let residual = v.sub(&w.matvec(k));
            let mut out = w.scale(lam);
            out.add_outer(eta, &residual, k);
            out
        }
    };
    Ok(next)
}

/// State-independent `(A, B, C)` reproducing [`apply_rule`].
pub fn canonical_transition(
    rule: &UpdateRule,
    s: &StepInputs,
    d_out: usize,
    d_key: usize,
) -> Result<Canonical> {
    if d_out == 0 || d_key == 0 {
        return Err(config_err("canonical transition needs positive dims"));
    }
    s.check_dims(d_out, d_key)?;
    let k = &s.k_feat;
    let v = &s.v;
    let householder = |eta: f64, diag: f64| {
        let mut a = Mat::identity(d_key).scale(diag);
        a.add_outer(-eta, k, k);
        a
    };
    let form = |a: Mat, b: Mat, c: Mat| Ok(Canonical::Form(CanonicalTransition { a, b, c }));
    match rule {
        UpdateRule::Additive => form(Mat::identity(d_key), Mat::identity(d_out), outer(v, k)),
        UpdateRule::Delta | UpdateRule::DeltaProduct { .. } => {
            let eta = s.eta_for(rule)?;
            form(householder(eta, 1.0), Mat::identity(d_out), outer(v, k).scale(eta))
        }
        UpdateRule::Oja => Ok(Canonical::NotCanonical),
        UpdateRule::RetNet { .. } | UpdateRule::Mamba2 => {
            let lam = s.lam_for(rule)?;
            form(Mat::identity(d_key), Mat::identity(d_out).scale(lam), outer(v, k))
        }
        UpdateRule::GatedRfa => {
            let lam = s.lam_for(rule)?;
            form(
                Mat::identity(d_key),
                Mat::identity(d_out).scale(lam),
                outer(v, k).scale(1.0 - lam),
            )
        }
        UpdateRule::Mlstm => {
            let lam = s.lam_for(rule)?;
            let eta = s.eta_for(rule)?;
            form(
                Mat::identity(d_key),
                Mat::identity(d_out).scale(lam),
                outer(v, k).scale(eta),
            )
        }
        UpdateRule::Gla => {
            let a = s.row_decay_for(rule)?;
            form(Mat::identity(d_key), Mat::diag(a), outer(v, k))
        }
        UpdateRule::GatedDelta => {
            // λW + η(v − Wk)⊗k = W(λI − η k⊗k) + η v⊗k
            let lam = s.lam_for(rule)?;
            let eta = s.eta_for(rule)?;
            form(householder(eta, lam), Mat::identity(d_out), outer(v, k).scale(eta))
        }
    }
}

/// The rule's local objective evaluated at `w_eval`, constant factors
/// omitted. Oja's norm constraint is not enforced.
pub fn local_objective(rule: &UpdateRule, w_eval: &Mat, w_prev: &Mat, s: &StepInputs) -> Result<f64> {
    let (d_out, d_key) = w_eval.shape();
    if w_prev.shape() != w_eval.shape() {
        return Err(FwpError::Shape(format!(
            "objective: W {:?} vs W_prev {:?}",
            w_eval.shape(),
            w_prev.shape()
        )));
    }
    s.check_dims(d_out, d_key)?;
    let k = &s.k_feat;
    let v = &s.v;
    let wk = w_eval.matvec(k);
    let retrieval = v.dot(&wk);
    let squared_error = || {
        let r = v.sub(&wk);
        r.dot(&r)
    };
    let drift = || {
        let d = w_eval.sub(w_prev);
        d.frobenius_dot(&d)
    };
    let value = match rule {
        UpdateRule::Additive | UpdateRule::Oja => -retrieval,
        UpdateRule::Delta | UpdateRule::DeltaProduct { .. } => squared_error(),
        UpdateRule::RetNet { .. } | UpdateRule::Mamba2 => -retrieval + s.lam_for(rule)? * drift(),
        UpdateRule::GatedRfa => {
            let lam = s.lam_for(rule)?;
            -(1.0 - lam) * retrieval + lam * drift()
        }
        UpdateRule::Mlstm => -s.eta_for(rule)? * retrieval + s.lam_for(rule)? * drift(),
        UpdateRule::Gla => {
            let a = s.row_decay_for(rule)?;
            let d = w_eval.sub(w_prev).scale_rows(a);
            -retrieval + d.frobenius_dot(&d)
        }
        UpdateRule::GatedDelta => squared_error() + s.lam_for(rule)? * drift(),
    };
    Ok(value)
}

/// Gradient of `½‖v − W k‖²` with respect to `W`: `−(v − Wk)⊗k`.
pub fn squared_error_gradient(w: &Mat, s: &StepInputs) -> Mat {
    let residual = s.v.sub(&w.matvec(&s.k_feat));
    outer(&residual, &s.k_feat).scale(-1.0)
}

/// Compares [`squared_error_gradient`] with central finite differences of
/// `½‖v − W k‖²` (step `1e-6`) and returns the largest relative error over
/// entries where the gradient is not negligible.
pub fn objective_gradient_check(
    rule: &UpdateRule,
    w: &Mat,
    w_prev: &Mat,
    s: &StepInputs,
) -> Result<f64> {
    if !matches!(rule, UpdateRule::Delta | UpdateRule::GatedDelta) {
        return Err(config_err(format!(
            "gradient check is defined for delta and gated_delta, not `{}`",
            rule.name()
        )));
    }
    if w_prev.shape() != w.shape() {
        return Err(FwpError::Shape("objective gradient check: W_prev shape".into()));
    }
    s.check_dims(w.rows(), w.cols())?;
    let loss = |m: &Mat| {
        let r = s.v.sub(&m.matvec(&s.k_feat));
        0.5 * r.dot(&r)
    };
    let analytic = squared_error_gradient(w, s);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = w.clone();
    for idx in 0..w.as_slice().len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let up = loss(&probe);
        probe.as_mut_slice()[idx] = orig - h;
        let down = loss(&probe);
        probe.as_mut_slice()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let exact = analytic.as_slice()[idx];
        let scale = exact.abs() + numeric.abs();
        if scale > 1e-12 {
            worst = worst.max((exact - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

/// Applies the delta rule once per micro-step, in order.
pub fn delta_product_step(w: &Mat, micro_steps: &[StepInputs]) -> Result<Mat> {
    if micro_steps.is_empty() {
        return Err(config_err("delta product needs at least one micro-step"));
    }
    let mut state = w.clone();
    for s in micro_steps {
        state = apply_rule(&UpdateRule::Delta, &state, s)?;
    }
    Ok(state)
}

/// Composite `(A, B, C)` of several delta micro-steps:
/// `A = A₁A₂…`, `C = (…(C₁A₂ + C₂)A₃ …) + C_n`, `B = I`.
pub fn delta_product_transition(
    micro_steps: &[StepInputs],
    d_out: usize,
    d_key: usize,
) -> Result<CanonicalTransition> {
    if micro_steps.is_empty() {
        return Err(config_err("delta product needs at least one micro-step"));
    }
    let mut a = Mat::identity(d_key);
    let mut c = Mat::zeros(d_out, d_key);
    for s in micro_steps {
        let step = canonical_transition(&UpdateRule::Delta, s, d_out, d_key)?
            .form()
            .expect("delta rule is canonical");
        a = a.matmul(&step.a);
        c = c.matmul(&step.a).add(&step.c);
    }
    Ok(CanonicalTransition {
        a,
        b: Mat::identity(d_out),
        c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rng: &mut ChaCha8Rng, d_out: usize, d_key: usize) -> StepInputs {
        StepInputs::new(Vector::uniform(d_key, 1.0, rng), Vector::uniform(d_out, 1.0, rng))
            .with_eta(rng.gen_range(0.0..2.0))
            .with_lam(rng.gen_range(0.01..0.99))
            .with_row_decay(Vector::from(
                (0..d_out).map(|_| rng.gen_range(0.01..0.99)).collect::<Vec<_>>(),
            ))
    }

    fn all_rules() -> Vec<UpdateRule> {
        vec![
            UpdateRule::Additive,
            UpdateRule::Delta,
            UpdateRule::Oja,
            UpdateRule::RetNet { lambda: Some(0.9) },
            UpdateRule::RetNet { lambda: None },
            UpdateRule::Mamba2,
            UpdateRule::GatedRfa,
            UpdateRule::Mlstm,
            UpdateRule::Gla,
            UpdateRule::GatedDelta,
            UpdateRule::DeltaProduct { n_h: 1 },
        ]
    }

    #[test]
    fn names_round_trip() {
        for rule in all_rules() {
            let parsed: UpdateRule = rule.to_string().parse().unwrap();
            assert_eq!(parsed, rule);
            let json = serde_json::to_string(&rule).unwrap();
            assert_eq!(serde_json::from_str::<UpdateRule>(&json).unwrap(), rule);
        }
        assert_eq!(serde_json::to_string(&UpdateRule::GatedRfa).unwrap(), "\"gated_rfa\"");
        assert!("retnet:1.5".parse::<UpdateRule>().is_err());
        assert!("delta_product:0".parse::<UpdateRule>().is_err());
        assert!("hebb".parse::<UpdateRule>().is_err());
    }

    #[test]
    fn additive_from_zero() {
        let w = Mat::zeros(2, 2);
        let s = StepInputs::new(Vector::from(vec![0.0, 1.0]), Vector::from(vec![1.0, 0.0]));
        let out = apply_rule(&UpdateRule::Additive, &w, &s).unwrap();
        assert_eq!(out, Mat::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]));
    }

    #[test]
    fn additive_double_store_doubles_retrieval() {
        let k = Vector::one_hot(3, 1);
        let v = Vector::from(vec![0.7, -1.3]);
        let s = StepInputs::new(k.clone(), v.clone());
        let w1 = apply_rule(&UpdateRule::Additive, &Mat::zeros(2, 3), &s).unwrap();
        let w2 = apply_rule(&UpdateRule::Additive, &w1, &s).unwrap();
        assert_eq!(w2.matvec(&k), v.scale(2.0));
    }

    #[test]
    fn delta_one_shot_write() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Vector::uniform(4, 1.0, &mut rng).l2_normalize();
        let v = Vector::uniform(3, 1.0, &mut rng);
        let s = StepInputs::new(k.clone(), v.clone()).with_eta(1.0);
        let w = apply_rule(&UpdateRule::Delta, &Mat::zeros(3, 4), &s).unwrap();
        assert!(w.matvec(&k).max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn delta_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Mat::uniform(3, 4, 1.0, &mut rng);
        let k = Vector::uniform(4, 1.0, &mut rng);
        let s = StepInputs::new(k.clone(), w.matvec(&k)).with_eta(0.8);
        assert_eq!(apply_rule(&UpdateRule::Delta, &w, &s).unwrap(), w);
    }

    #[test]
    fn retnet_pure_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Mat::uniform(2, 3, 1.0, &mut rng);
        let rule = UpdateRule::RetNet { lambda: Some(0.9) };
        let zero_v = StepInputs::new(Vector::uniform(3, 1.0, &mut rng), Vector::zeros(2));
        let zero_k = StepInputs::new(Vector::zeros(3), Vector::uniform(2, 1.0, &mut rng));
        assert_eq!(apply_rule(&rule, &w, &zero_v).unwrap(), w.scale(0.9));
        assert_eq!(apply_rule(&rule, &w, &zero_k).unwrap(), w.scale(0.9));
    }

    #[test]
    fn gla_matches_entrywise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (d_out, d_key) = (4, 3);
        let w = Mat::uniform(d_out, d_key, 1.0, &mut rng);
        let k = Vector::uniform(d_key, 1.0, &mut rng);
        let v = Vector::uniform(d_out, 1.0, &mut rng);
        let a = Vector::filled(d_out, 1.0 - 1e-3);
        let s = StepInputs::new(k.clone(), v.clone()).with_row_decay(a.clone());
        let got = apply_rule(&UpdateRule::Gla, &w, &s).unwrap();
        for i in 0..d_out {
            for j in 0..d_key {
                let expected = a[i] * w.get(i, j) + v[i] * k[j];
                assert!((got.get(i, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let w = Mat::zeros(2, 2);
        let s = StepInputs::new(Vector::zeros(2), Vector::zeros(2));
        for rule in [UpdateRule::Delta, UpdateRule::Mamba2, UpdateRule::Gla, UpdateRule::RetNet { lambda: None }] {
            assert!(matches!(apply_rule(&rule, &w, &s), Err(FwpError::Config(_))));
        }
        let bad = StepInputs::new(Vector::zeros(3), Vector::zeros(2));
        assert!(matches!(apply_rule(&UpdateRule::Additive, &w, &bad), Err(FwpError::Shape(_))));
    }

    #[test]
    fn canonical_examples() {
        let k = Vector::from(vec![0.6, 0.8, 0.0]);
        let v = Vector::from(vec![1.0, 2.0]);
        let s = StepInputs::new(k.clone(), v.clone()).with_eta(2.0);
        let t = canonical_transition(&UpdateRule::Delta, &s, 2, 3).unwrap().form().unwrap();
        assert!(t.a.matvec(&k).max_abs_diff(&k.scale(-1.0)) < 1e-12);

        let add = canonical_transition(&UpdateRule::Additive, &s, 2, 3).unwrap().form().unwrap();
        assert_eq!(add.a, Mat::identity(3));
        assert_eq!(add.b, Mat::identity(2));
        assert_eq!(add.c, outer(&v, &k));

        let ret = canonical_transition(&UpdateRule::RetNet { lambda: Some(0.9) }, &s, 2, 3)
            .unwrap()
            .form()
            .unwrap();
        assert_eq!(ret.b, Mat::identity(2).scale(0.9));

        assert_eq!(
            canonical_transition(&UpdateRule::Oja, &s, 2, 3).unwrap(),
            Canonical::NotCanonical
        );
    }

    #[test]
    fn canonical_consistency_all_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for rule in all_rules() {
            if rule == UpdateRule::Oja {
                continue;
            }
            for _ in 0..50 {
                let (d_out, d_key) = (rng.gen_range(1..6), rng.gen_range(1..6));
                let w = Mat::uniform(d_out, d_key, 1.0, &mut rng);
                let s = random_inputs(&mut rng, d_out, d_key);
                let direct = apply_rule(&rule, &w, &s).unwrap();
                let t = canonical_transition(&rule, &s, d_out, d_key).unwrap().form().unwrap();
                assert!(direct.max_abs_diff(&t.apply(&w)) < 1e-12, "{rule}");
            }
        }
    }

    #[test]
    fn delta_residual_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for eta in [0.0, 0.5, 1.0, 2.0] {
            for _ in 0..50 {
                let w = Mat::uniform(3, 5, 1.0, &mut rng);
                let k = Vector::uniform(5, 1.0, &mut rng).l2_normalize();
                let v = Vector::uniform(3, 1.0, &mut rng);
                let s = StepInputs::new(k.clone(), v.clone()).with_eta(eta);
                let before = v.sub(&w.matvec(&k));
                let after_w = apply_rule(&UpdateRule::Delta, &w, &s).unwrap();
                let after = v.sub(&after_w.matvec(&k));
                assert!(after.max_abs_diff(&before.scale(1.0 - eta)) < 1e-12);
            }
        }
    }

    #[test]
    fn pure_decay_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Mat::uniform(3, 2, 1.0, &mut rng);
        let mut s = random_inputs(&mut rng, 3, 2);
        s.v = Vector::zeros(3);
        let lam = s.lam.unwrap();
        let eta = s.eta.unwrap();
        assert_eq!(apply_rule(&UpdateRule::RetNet { lambda: None }, &w, &s).unwrap(), w.scale(lam));
        assert_eq!(apply_rule(&UpdateRule::Mamba2, &w, &s).unwrap(), w.scale(lam));
        assert_eq!(apply_rule(&UpdateRule::Mlstm, &w, &s).unwrap(), w.scale(lam));
        let a = s.a.clone().unwrap();
        assert_eq!(apply_rule(&UpdateRule::Gla, &w, &s).unwrap(), w.scale_rows(&a));
        assert!(eta >= 0.0);
    }

    #[test]
    fn gated_rfa_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let k = Vector::uniform(3, 1.0, &mut rng);
        let v = Vector::uniform(2, 1.0, &mut rng);
        let w = outer(&v, &k);
        let s = StepInputs::new(k, v).with_lam(0.37);
        let out = apply_rule(&UpdateRule::GatedRfa, &w, &s).unwrap();
        assert!(out.max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn objectives() {
        let k = Vector::from(vec![0.6, 0.8]);
        let v = Vector::from(vec![0.0, 1.0, 0.0]);
        let w = outer(&v, &k);
        let s = StepInputs::new(k.clone(), v.clone()).with_lam(0.5);
        let zero = Mat::zeros(3, 2);
        let vanilla = local_objective(&UpdateRule::Additive, &w, &zero, &s).unwrap();
        assert!((vanilla + 1.0).abs() < 1e-15);
        // W k = v (unit key) so the squared error vanishes.
        assert!(local_objective(&UpdateRule::Delta, &w, &zero, &s).unwrap().abs() < 1e-15);
        let ret = local_objective(&UpdateRule::RetNet { lambda: Some(0.9) }, &w, &w, &s).unwrap();
        assert_eq!(ret, -v.dot(&w.matvec(&k)));
    }

    #[test]
    fn squared_error_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = Mat::uniform(3, 4, 1.0, &mut rng);
        let s = StepInputs::new(Vector::uniform(4, 1.0, &mut rng), Vector::uniform(3, 1.0, &mut rng))
            .with_eta(1.0)
            .with_lam(0.5);
        for rule in [UpdateRule::Delta, UpdateRule::GatedDelta] {
            assert!(objective_gradient_check(&rule, &w, &w, &s).unwrap() < 1e-6);
        }
        let zero_k = StepInputs::new(Vector::zeros(4), s.v.clone());
        assert_eq!(squared_error_gradient(&w, &zero_k), Mat::zeros(3, 4));
        assert_eq!(objective_gradient_check(&UpdateRule::Delta, &w, &w, &zero_k).unwrap(), 0.0);
        let w0 = Mat::zeros(3, 4);
        assert_eq!(squared_error_gradient(&w0, &s), outer(&s.v, &s.k_feat).scale(-1.0));
        assert!(objective_gradient_check(&UpdateRule::Delta, &w0, &w0, &s).unwrap() < 1e-6);
        assert!(objective_gradient_check(&UpdateRule::Additive, &w, &w, &s).is_err());
    }

    #[test]
    fn delta_product_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = Mat::uniform(2, 3, 1.0, &mut rng);
        let s1 = random_inputs(&mut rng, 2, 3);
        let single = delta_product_step(&w, std::slice::from_ref(&s1)).unwrap();
        assert_eq!(single, apply_rule(&UpdateRule::Delta, &w, &s1).unwrap());

        let mut s2 = random_inputs(&mut rng, 2, 3);
        s2.eta = Some(0.0);
        assert_eq!(delta_product_step(&w, &[s1.clone(), s2]).unwrap(), single);

        // Two reflections through orthonormal keys compose to a rotation.
        let k1 = Vector::from(vec![1.0, 0.0, 0.0]);
        let k2 = Vector::from(vec![0.0, 0.6, 0.8]);
        let steps = [
            StepInputs::new(k1, Vector::zeros(2)).with_eta(2.0),
            StepInputs::new(k2, Vector::zeros(2)).with_eta(2.0),
        ];
        let got = delta_product_step(&w, &steps).unwrap();
        let t = delta_product_transition(&steps, 2, 3).unwrap();
        let a1 = canonical_transition(&UpdateRule::Delta, &steps[0], 2, 3).unwrap().form().unwrap().a;
        let a2 = canonical_transition(&UpdateRule::Delta, &steps[1], 2, 3).unwrap().form().unwrap().a;
        assert!(got.max_abs_diff(&w.matmul(&a1).matmul(&a2)) < 1e-12);
        assert!(got.max_abs_diff(&t.apply(&w)) < 1e-12);
        // det(A₁A₂) = +1 for a rotation: check orthogonality instead.
        let rot = t.a;
        assert!(rot.matmul(&rot.transpose()).max_abs_diff(&Mat::identity(3)) < 1e-12);

        assert!(delta_product_step(&w, &[]).is_err());
    }
}
