//! One fast weight programmer layer in recurrent form.
//!
//! The slow net projects each input into per-head queries, keys, values and
//! raw gate scalars; the fast net is the per-head matrix `W_t`, updated by an
//! [`UpdateRule`] and read out with `y = W_t φ(q)`. Heads are independent
//! blocks: queries, keys and values are split into `H` contiguous slices and
//! the head outputs are concatenated.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, FwpError, Result};
use crate::rules::{apply_rule, delta_product_step, StepInputs, UpdateRule};
use crate::tensor::{sigmoid, Mat, Vector};

/// Feature map applied to keys and queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiMap {
    Identity,
    EluPlusOne,
    SiluL2norm,
}

impl PhiMap {
    pub fn name(&self) -> &'static str {
        match self {
            PhiMap::Identity => "identity",
            PhiMap::EluPlusOne => "elu_plus_one",
            PhiMap::SiluL2norm => "silu_l2norm",
        }
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        match self {
            PhiMap::Identity => x.clone(),
            PhiMap::EluPlusOne => x.map(elu_plus_one),
            PhiMap::SiluL2norm => x.map(|a| a * sigmoid(a)).l2_normalize(),
        }
    }
}

impl fmt::Display for PhiMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhiMap {
    type Err = FwpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(PhiMap::Identity),
            "elu_plus_one" => Ok(PhiMap::EluPlusOne),
            "silu_l2norm" => Ok(PhiMap::SiluL2norm),
            other => Err(config_err(format!("unknown feature map `{other}`"))),
        }
    }
}

pub(crate) fn elu_plus_one(a: f64) -> f64 {
    if a > 0.0 {
        a + 1.0
    } else {
        a.exp()
    }
}

/// Applies the named feature map.
pub fn phi_map(name: &str, x: &Vector) -> Result<Vector> {
    Ok(name.parse::<PhiMap>()?.apply(x))
}

fn default_psi_scale() -> f64 {
    2.0
}

fn default_norm_eps() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub d_in: usize,
    pub d_key: usize,
    pub d_out: usize,
    pub heads: usize,
    pub rule: UpdateRule,
    pub phi: PhiMap,
    #[serde(default)]
    pub value_activation: bool,
    #[serde(default)]
    pub normalized: bool,
    #[serde(default = "default_psi_scale")]
    pub psi_scale: f64,
    /// Guard added to the normalizer `zᵀφ(q)`.
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub output_projection: bool,
}

impl LayerConfig {
    pub fn new(d_in: usize, d_key: usize, d_out: usize, heads: usize, rule: UpdateRule, phi: PhiMap) -> Self {
        Self {
            d_in,
            d_key,
            d_out,
            heads,
            rule,
            phi,
            value_activation: false,
            normalized: false,
            psi_scale: default_psi_scale(),
            norm_eps: default_norm_eps(),
            output_projection: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        if self.d_in == 0 || self.d_key == 0 || self.d_out == 0 || self.heads == 0 {
            return Err(config_err("layer dims and heads must be positive"));
        }
        if !self.d_key.is_multiple_of(self.heads) || !self.d_out.is_multiple_of(self.heads) {
            return Err(config_err(format!(
                "d_key={} and d_out={} must be divisible by heads={}",
                self.d_key, self.d_out, self.heads
            )));
        }
        if self.normalized && self.rule != UpdateRule::Additive {
            return Err(config_err("the normalized form is only defined for the additive rule"));
        }
        if !(self.psi_scale > 0.0) || !(self.norm_eps >= 0.0) {
            return Err(config_err("psi_scale must be positive and norm_eps non-negative"));
        }
        Ok(())
    }

    pub fn head_key(&self) -> usize {
        self.d_key / self.heads
    }

    pub fn head_out(&self) -> usize {
        self.d_out / self.heads
    }

    /// Constant RetNet decay for head `h`: the configured λ, or `1 − 2^(−5−h)`.
    pub fn retnet_lambda(&self, head: usize) -> Option<f64> {
        match self.rule {
            UpdateRule::RetNet { lambda: Some(l) } => Some(l),
            UpdateRule::RetNet { lambda: None } => Some(1.0 - 2f64.powi(-5 - head as i32)),
            _ => None,
        }
    }
}

/// Trained projections of one layer. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowWeights {
    /// `d_key × d_in`
    pub wq: Mat,
    /// `n_h·d_key × d_in` (one key block per delta micro-step)
    pub wk: Mat,
    /// `n_h·d_out × d_in`
    pub wv: Mat,
    /// `n_h·H × d_in`, learning-rate logits (rules with η)
    pub w_b: Option<Mat>,
    /// `H × d_in`, decay logits (rules with a dynamic λ_t)
    pub w_lam: Option<Mat>,
    /// `d_out × d_in`, GLA row-decay logits
    pub wa: Option<Mat>,
    /// `d_out × d_out` projection after the head concat; identity when absent
    pub wo: Option<Mat>,
}

impl SlowWeights {
    /// Uniform(−1/√d_in, 1/√d_in) initialization.
    pub fn init<R: Rng + ?Sized>(cfg: &LayerConfig, rng: &mut R) -> Self {
        let bound = 1.0 / (cfg.d_in as f64).sqrt();
        let n_h = cfg.rule.micro_steps();
        let mut uniform = |rows: usize, cols: usize| Mat::uniform(rows, cols, bound, rng);
        let wq = uniform(cfg.d_key, cfg.d_in);
        let wk = uniform(n_h * cfg.d_key, cfg.d_in);
        let wv = uniform(n_h * cfg.d_out, cfg.d_in);
        let w_b = cfg.rule.needs_eta().then(|| uniform(n_h * cfg.heads, cfg.d_in));
        let w_lam = cfg.rule.has_dynamic_decay().then(|| uniform(cfg.heads, cfg.d_in));
        let wa = cfg.rule.needs_row_decay().then(|| uniform(cfg.d_out, cfg.d_in));
        let wo = cfg.output_projection.then(|| uniform(cfg.d_out, cfg.d_out));
        Self {
            wq,
            wk,
            wv,
            w_b,
            w_lam,
            wa,
            wo,
        }
    }

    pub fn validate(&self, cfg: &LayerConfig) -> Result<()> {
        let n_h = cfg.rule.micro_steps();
        let check = |name: &str, m: &Mat, rows: usize, cols: usize| {
            if m.shape() != (rows, cols) {
                Err(FwpError::Shape(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )))
            } else if !m.is_finite() {
                Err(FwpError::Numeric {
                    step: 0,
                    what: format!("{name} has non-finite entries"),
                })
            } else {
                Ok(())
            }
        };
        let need = |name: &str, m: &Option<Mat>, wanted: bool, rows: usize, cols: usize| match (m, wanted) {
            (Some(m), true) => check(name, m, rows, cols),
            (None, false) => Ok(()),
            (None, true) => Err(config_err(format!("rule `{}` needs {name}", cfg.rule.name()))),
            (Some(_), false) => Err(config_err(format!("{name} is not used by `{}`", cfg.rule.name()))),
        };
        check("wq", &self.wq, cfg.d_key, cfg.d_in)?;
        check("wk", &self.wk, n_h * cfg.d_key, cfg.d_in)?;
        check("wv", &self.wv, n_h * cfg.d_out, cfg.d_in)?;
        need("w_b", &self.w_b, cfg.rule.needs_eta(), n_h * cfg.heads, cfg.d_in)?;
        need("w_lam", &self.w_lam, cfg.rule.has_dynamic_decay(), cfg.heads, cfg.d_in)?;
        need("wa", &self.wa, cfg.rule.needs_row_decay(), cfg.d_out, cfg.d_in)?;
        need("wo", &self.wo, cfg.output_projection, cfg.d_out, cfg.d_out)?;
        Ok(())
    }

    /// Named matrices in a fixed order, as stored in checkpoints.
    pub fn named(&self) -> Vec<(&'static str, &Mat)> {
        let mut out = vec![("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)];
        for (name, m) in [("w_b", &self.w_b), ("w_lam", &self.w_lam), ("wa", &self.wa), ("wo", &self.wo)] {
            if let Some(m) = m {
                out.push((name, m));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        let mut out = vec![("wq", &mut self.wq), ("wk", &mut self.wk), ("wv", &mut self.wv)];
        for (name, m) in [
            ("w_b", &mut self.w_b),
            ("w_lam", &mut self.w_lam),
            ("wa", &mut self.wa),
            ("wo", &mut self.wo),
        ] {
            if let Some(m) = m.as_mut() {
                out.push((name, m));
            }
        }
        out
    }

    /// Rebuilds from named matrices; unknown names are rejected.
    pub fn from_named(mut named: std::collections::BTreeMap<String, Mat>) -> Result<Self> {
        let mut take = |name: &str| named.remove(name);
        let required = |m: Option<Mat>, name: &str| m.ok_or_else(|| config_err(format!("missing weight `{name}`")));
        let wq = required(take("wq"), "wq")?;
        let wk = required(take("wk"), "wk")?;
        let wv = required(take("wv"), "wv")?;
        let out = Self {
            wq,
            wk,
            wv,
            w_b: take("w_b"),
            w_lam: take("w_lam"),
            wa: take("wa"),
            wo: take("wo"),
        };
        if let Some(extra) = named.keys().next() {
            return Err(config_err(format!("unknown weight `{extra}`")));
        }
        Ok(out)
    }
}

/// Slow-net outputs for one head at one step, before any squashing.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection {
    pub q: Vector,
    /// One key per delta micro-step (a single key for every other rule).
    pub k: Vec<Vector>,
    pub v: Vec<Vector>,
    pub beta_raw: Vec<f64>,
    pub lam_raw: Option<f64>,
    pub a_raw: Option<Vector>,
}

/// Projects `x` and splits the results into per-head slices.
pub fn project(slow: &SlowWeights, cfg: &LayerConfig, x: &Vector) -> Result<Vec<HeadProjection>> {
    if x.dim() != cfg.d_in {
        return Err(FwpError::Shape(format!("input has {} entries, expected {}", x.dim(), cfg.d_in)));
    }
    let (hk, ho, heads) = (cfg.head_key(), cfg.head_out(), cfg.heads);
    let n_h = cfg.rule.micro_steps();
    let q = slow.wq.matvec(x);
    let k = slow.wk.matvec(x);
    let v = slow.wv.matvec(x);
    let beta = slow.w_b.as_ref().map(|m| m.matvec(x));
    let lam = slow.w_lam.as_ref().map(|m| m.matvec(x));
    let a = slow.wa.as_ref().map(|m| m.matvec(x));
    Ok((0..heads)
        .map(|h| HeadProjection {
            q: q.slice(h * hk, hk),
            k: (0..n_h).map(|j| k.slice(j * cfg.d_key + h * hk, hk)).collect(),
            v: (0..n_h).map(|j| v.slice(j * cfg.d_out + h * ho, ho)).collect(),
            beta_raw: beta
                .as_ref()
                .map(|b| (0..n_h).map(|j| b[j * heads + h]).collect())
                .unwrap_or_default(),
            lam_raw: lam.as_ref().map(|l| l[h]),
            a_raw: a.as_ref().map(|a| a.slice(h * ho, ho)),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    /// `(d_out/H) × (d_key/H)`
    pub w: Mat,
    /// Normalizer, present iff the layer is normalized.
    pub z: Option<Vector>,
}

/// Per-head fast weights; the model's short-term memory.
#[derive(Debug, Clone, PartialEq)]
pub struct FastState {
    pub heads: Vec<HeadState>,
    /// Number of steps consumed so far.
    pub steps: usize,
}

impl FastState {
    pub fn zeros(cfg: &LayerConfig) -> Self {
        let heads = (0..cfg.heads)
            .map(|_| HeadState {
                w: Mat::zeros(cfg.head_out(), cfg.head_key()),
                z: cfg.normalized.then(|| Vector::zeros(cfg.head_key())),
            })
            .collect();
        Self { heads, steps: 0 }
    }

    fn check(&self, cfg: &LayerConfig) -> Result<()> {
        let ok = self.heads.len() == cfg.heads
            && self.heads.iter().all(|h| {
                h.w.shape() == (cfg.head_out(), cfg.head_key())
                    && h.z.as_ref().map(Vector::dim) == cfg.normalized.then(|| cfg.head_key())
            });
        if ok {
            Ok(())
        } else {
            Err(FwpError::Shape("fast state does not match layer config".into()))
        }
    }
}

/// Squashed per-head step inputs: the update-rule view of one step.
pub fn head_step_inputs(cfg: &LayerConfig, head: usize, p: &HeadProjection) -> Vec<StepInputs> {
    head_step_inputs_with(cfg, head, p, None)
}

fn head_step_inputs_with(
    cfg: &LayerConfig,
    head: usize,
    p: &HeadProjection,
    eta_override: Option<&[f64]>,
) -> Vec<StepInputs> {
    let rule = cfg.rule;
    let lam = if let Some(raw) = p.lam_raw {
        Some(sigmoid(raw))
    } else {
        cfg.retnet_lambda(head)
    };
    (0..rule.micro_steps())
        .map(|j| {
            let k_feat = cfg.phi.apply(&p.k[j]);
            let v = if cfg.value_activation { cfg.phi.apply(&p.v[j]) } else { p.v[j].clone() };
            let mut s = StepInputs::new(k_feat, v);
            if rule.needs_eta() {
                s.eta = Some(match eta_override {
                    Some(etas) => etas[j],
                    None => cfg.psi_scale * sigmoid(p.beta_raw[j]),
                });
            }
            s.lam = lam;
            s.a = p.a_raw.as_ref().map(|a| a.map(sigmoid));
            s
        })
        .collect()
}

/// One recurrent step. Returns the new state and the layer output.
pub fn step(cfg: &LayerConfig, slow: &SlowWeights, state: &FastState, x: &Vector) -> Result<(FastState, Vector)> {
    step_impl(cfg, slow, state, x, None)
}

/// Like [`step`] but with the learning rates injected directly instead of
/// coming from `ψ(β)`: `eta[h][j]` for head `h`, micro-step `j`. Used by
/// hand-built constructions that need η exactly 0 or 2.
pub fn step_with_eta(
    cfg: &LayerConfig,
    slow: &SlowWeights,
    state: &FastState,
    x: &Vector,
    eta: &[Vec<f64>],
) -> Result<(FastState, Vector)> {
    if eta.len() != cfg.heads || eta.iter().any(|e| e.len() != cfg.rule.micro_steps()) {
        return Err(config_err("eta override needs one entry per head and micro-step"));
    }
    step_impl(cfg, slow, state, x, Some(eta))
}

fn step_impl(
    cfg: &LayerConfig,
    slow: &SlowWeights,
    state: &FastState,
    x: &Vector,
    eta_override: Option<&[Vec<f64>]>,
) -> Result<(FastState, Vector)> {
    state.check(cfg)?;
    let t = state.steps + 1;
    let projections = project(slow, cfg, x)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut outputs = Vec::with_capacity(cfg.heads);
    for (h, (p, prev)) in projections.iter().zip(&state.heads).enumerate() {
        let inputs = head_step_inputs_with(cfg, h, p, eta_override.map(|e| e[h].as_slice()));
        let w = match cfg.rule {
            UpdateRule::DeltaProduct { .. } => delta_product_step(&prev.w, &inputs)?,
            rule => apply_rule(&rule, &prev.w, &inputs[0])?,
        };
        let q_feat = cfg.phi.apply(&p.q);
        let mut y = w.matvec(&q_feat);
        let z = match &prev.z {
            Some(z) => {
                let z = z.add(&inputs[0].k_feat);
                let denom = z.dot(&q_feat) + cfg.norm_eps;
                y = y.scale(1.0 / denom);
                Some(z)
            }
            None => None,
        };
        if !w.is_finite() || !y.is_finite() {
            return Err(FwpError::Numeric {
                step: t,
                what: format!("head {h} produced non-finite fast weights or output"),
            });
        }
        outputs.push(y);
        heads.push(HeadState { w, z });
    }
    let mut y = Vector::concat(&outputs);
    if let Some(wo) = &slow.wo {
        y = wo.matvec(&y);
    }
    Ok((FastState { heads, steps: t }, y))
}

/// Folds [`step`] over `xs` from the zero state.
pub fn forward_seq(cfg: &LayerConfig, slow: &SlowWeights, xs: &[Vector]) -> Result<(Vec<Vector>, FastState)> {
    cfg.validate()?;
    slow.validate(cfg)?;
    let mut state = FastState::zeros(cfg);
    let mut ys = Vec::with_capacity(xs.len());
    for x in xs {
        let (next, y) = step(cfg, slow, &state, x)?;
        state = next;
        ys.push(y);
    }
    Ok((ys, state))
}
