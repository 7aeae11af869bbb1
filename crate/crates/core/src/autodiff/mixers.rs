//! Differentiable sequence mixers: every fast weight rule, softmax attention,
//! the tanh RNN and the element-wise gated SSM cell.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamSet;
use crate::error::{config_err, FwpError, Result};
use crate::layer::{LayerConfig, PhiMap, SlowWeights};
use crate::rules::UpdateRule;
use crate::tensor::{Mat, Vector};

fn default_psi_scale() -> f64 {
    2.0
}

/// Fast weight mixer inside a block; keys, values and outputs all have the
/// model width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FwpMixer {
    pub rule: UpdateRule,
    pub heads: usize,
    pub phi: PhiMap,
    #[serde(default)]
    pub value_activation: bool,
    #[serde(default)]
    pub normalized: bool,
    #[serde(default = "default_psi_scale")]
    pub psi_scale: f64,
    #[serde(default)]
    pub output_projection: bool,
}

impl FwpMixer {
    pub fn layer_config(&self, width: usize) -> LayerConfig {
        let mut cfg = LayerConfig::new(width, width, width, self.heads, self.rule, self.phi);
        cfg.value_activation = self.value_activation;
        cfg.normalized = self.normalized;
        cfg.psi_scale = self.psi_scale;
        cfg.output_projection = self.output_projection;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixerSpec {
    Fwp(FwpMixer),
    SoftmaxAttention { heads: usize },
    Rnn,
    Ssm,
}

impl MixerSpec {
    pub fn fwp(rule: UpdateRule, heads: usize, phi: PhiMap) -> Self {
        MixerSpec::Fwp(FwpMixer {
            rule,
            heads,
            phi,
            value_activation: false,
            normalized: false,
            psi_scale: 2.0,
            output_projection: false,
        })
    }

    pub fn label(&self) -> String {
        match self {
            MixerSpec::Fwp(f) => format!("fwp:{}", f.rule),
            MixerSpec::SoftmaxAttention { .. } => "softmax_attention".into(),
            MixerSpec::Rnn => "rnn".into(),
            MixerSpec::Ssm => "ssm".into(),
        }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        match self {
            MixerSpec::Fwp(f) => f.layer_config(width).validate(),
            MixerSpec::SoftmaxAttention { heads } => {
                if *heads == 0 || !width.is_multiple_of(*heads) {
                    Err(config_err(format!("width {width} is not divisible by {heads} heads")))
                } else {
                    Ok(())
                }
            }
            MixerSpec::Rnn | MixerSpec::Ssm => Ok(()),
        }
    }

    /// Uniform(−1/√width, 1/√width) parameters named under `prefix`.
    pub fn init<R: Rng + ?Sized>(&self, width: usize, prefix: &str, rng: &mut R, out: &mut ParamSet) {
        let bound = 1.0 / (width as f64).sqrt();
        match self {
            MixerSpec::Fwp(f) => {
                let slow = SlowWeights::init(&f.layer_config(width), rng);
                for (name, m) in slow.named() {
                    out.insert(join(prefix, name), m.clone());
                }
            }
            MixerSpec::SoftmaxAttention { .. } => {
                for name in ["wq", "wk", "wv"] {
                    out.insert(join(prefix, name), Mat::uniform(width, width, bound, rng));
                }
            }
            MixerSpec::Rnn | MixerSpec::Ssm => {
                for name in ["wr", "wi"] {
                    out.insert(join(prefix, name), Mat::uniform(width, width, bound, rng));
                }
            }
        }
    }

    /// Records the mixer over `xs` (width-sized columns) and returns the outputs.
    pub fn forward(&self, g: &mut Graph, vars: &BoundParams, prefix: &str, xs: &[Var]) -> Result<Vec<Var>> {
        match self {
            MixerSpec::Fwp(f) => {
                let width = xs.first().map_or(0, |&x| g.value(x).rows());
                let cfg = f.layer_config(width);
                fwp_forward(g, &cfg, &FwpVars::bind(vars, prefix, &cfg)?, xs)
            }
            MixerSpec::SoftmaxAttention { heads } => softmax_attention_forward(
                g,
                *heads,
                vars.get(&join(prefix, "wq"))?,
                vars.get(&join(prefix, "wk"))?,
                vars.get(&join(prefix, "wv"))?,
                xs,
            ),
            MixerSpec::Rnn => rnn_forward(g, vars.get(&join(prefix, "wr"))?, vars.get(&join(prefix, "wi"))?, xs),
            MixerSpec::Ssm => ssm_forward(g, vars.get(&join(prefix, "wr"))?, vars.get(&join(prefix, "wi"))?, xs),
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameters placed on a graph as leaves, by name.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &ParamSet) -> Self {
        Self {
            vars: params.iter().map(|(k, m)| (k.clone(), g.leaf(m.clone()))).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| config_err(format!("missing parameter `{name}`")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients of every bound parameter; zeros where none flowed.
    pub fn gradients(&self, g: &Graph, grads: &super::graph::Gradients) -> ParamSet {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, g.value(v).shape())))
            .collect()
    }
}

struct FwpVars {
    wq: Var,
    wk: Var,
    wv: Var,
    w_b: Option<Var>,
    w_lam: Option<Var>,
    wa: Option<Var>,
    wo: Option<Var>,
}

impl FwpVars {
    fn bind(vars: &BoundParams, prefix: &str, cfg: &LayerConfig) -> Result<Self> {
        let opt = |name: &str, wanted: bool| -> Result<Option<Var>> {
            match (vars.try_get(&join(prefix, name)), wanted) {
                (Some(v), true) => Ok(Some(v)),
                (None, false) => Ok(None),
                (None, true) => Err(config_err(format!("rule `{}` needs {name}", cfg.rule.name()))),
                (Some(_), false) => Err(config_err(format!("{name} is not used by `{}`", cfg.rule.name()))),
            }
        };
        Ok(Self {
            wq: vars.get(&join(prefix, "wq"))?,
            wk: vars.get(&join(prefix, "wk"))?,
            wv: vars.get(&join(prefix, "wv"))?,
            w_b: opt("w_b", cfg.rule.needs_eta())?,
            w_lam: opt("w_lam", cfg.rule.has_dynamic_decay())?,
            wa: opt("wa", cfg.rule.needs_row_decay())?,
            wo: opt("wo", cfg.output_projection)?,
        })
    }
}

fn phi(g: &mut Graph, map: PhiMap, x: Var) -> Var {
    match map {
        PhiMap::Identity => x,
        PhiMap::EluPlusOne => g.elu_plus_one(x),
        PhiMap::SiluL2norm => {
            let s = g.silu(x);
            g.l2_normalize(s)
        }
    }
}

fn check_finite(g: &Graph, v: Var, step: usize, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(FwpError::Numeric {
            step,
            what: what.to_string(),
        })
    }
}

/// Recurrent FWP layer on the tape; mirrors [`crate::layer::step`].
fn fwp_forward(g: &mut Graph, cfg: &LayerConfig, w: &FwpVars, xs: &[Var]) -> Result<Vec<Var>> {
    cfg.validate()?;
    let (hk, ho, heads) = (cfg.head_key(), cfg.head_out(), cfg.heads);
    let n_h = cfg.rule.micro_steps();
    let mut fast: Vec<Var> = (0..heads).map(|_| g.leaf(Mat::zeros(ho, hk))).collect();
    let mut norm: Vec<Option<Var>> = (0..heads)
        .map(|_| cfg.normalized.then(|| g.leaf(Mat::zeros(hk, 1))))
        .collect();
    let constant_lam: Vec<Option<Var>> = (0..heads)
        .map(|h| match (cfg.rule, cfg.retnet_lambda(h)) {
            (UpdateRule::RetNet { .. }, Some(l)) => Some(g.constant_scalar(l)),
            _ => None,
        })
        .collect();
    let mut ys = Vec::with_capacity(xs.len());
    for (t, &x) in xs.iter().enumerate() {
        let step = t + 1;
        let q = g.matmul(w.wq, x);
        let k = g.matmul(w.wk, x);
        let v = g.matmul(w.wv, x);
        let beta = w.w_b.map(|m| g.matmul(m, x));
        let lam_raw = w.w_lam.map(|m| g.matmul(m, x));
        let a_raw = w.wa.map(|m| g.matmul(m, x));
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q_raw = g.slice_rows(q, h * hk, hk);
            let q_feat = phi(g, cfg.phi, q_raw);
            let lam = match lam_raw {
                Some(l) => {
                    let raw = g.slice_rows(l, h, 1);
                    Some(g.sigmoid(raw))
                }
                None => constant_lam[h],
            };
            let a = a_raw.map(|a| {
                let raw = g.slice_rows(a, h * ho, ho);
                g.sigmoid(raw)
            });
            let mut w_h = fast[h];
            let mut first_key = None;
            for j in 0..n_h {
                let k_raw = g.slice_rows(k, j * cfg.d_key + h * hk, hk);
                let k_feat = phi(g, cfg.phi, k_raw);
                first_key.get_or_insert(k_feat);
                let v_raw = g.slice_rows(v, j * cfg.d_out + h * ho, ho);
                let v_j = if cfg.value_activation { phi(g, cfg.phi, v_raw) } else { v_raw };
                let eta = beta.map(|b| {
                    let raw = g.slice_rows(b, j * heads + h, 1);
                    let s = g.sigmoid(raw);
                    g.scale(s, cfg.psi_scale)
                });
                w_h = rule_update(g, &cfg.rule, w_h, k_feat, v_j, eta, lam, a)?;
            }
            fast[h] = w_h;
            let mut y = g.matmul(w_h, q_feat);
            if let Some(z) = norm[h] {
                let z_next = g.add(z, first_key.expect("at least one micro-step"));
                let d = g.dot(z_next, q_feat);
                let d = g.add_const(d, cfg.norm_eps);
                let inv = g.recip(d);
                y = g.scalar_mul(inv, y);
                norm[h] = Some(z_next);
            }
            check_finite(g, w_h, step, &format!("head {h} fast weights"))?;
            check_finite(g, y, step, &format!("head {h} output"))?;
            outs.push(y);
        }
        let mut y = if heads == 1 { outs[0] } else { g.concat_rows(&outs) };
        if let Some(wo) = w.wo {
            y = g.matmul(wo, y);
        }
        ys.push(y);
    }
    Ok(ys)
}

#[allow(clippy::too_many_arguments)]
fn rule_update(
    g: &mut Graph,
    rule: &UpdateRule,
    w: Var,
    k: Var,
    v: Var,
    eta: Option<Var>,
    lam: Option<Var>,
    a: Option<Var>,
) -> Result<Var> {
    let need = |x: Option<Var>, what: &str| x.ok_or_else(|| config_err(format!("rule `{}` needs {what}", rule.name())));
    let delta_write = |g: &mut Graph, w: Var, eta: Var| {
        let wk = g.matmul(w, k);
        let r = g.sub(v, wk);
        let o = g.outer(r, k);
        g.scalar_mul(eta, o)
    };
    Ok(match rule {
        UpdateRule::Additive => {
            let o = g.outer(v, k);
            g.add(w, o)
        }
        UpdateRule::Delta | UpdateRule::DeltaProduct { .. } => {
            let upd = delta_write(g, w, need(eta, "eta")?);
            g.add(w, upd)
        }
        UpdateRule::Oja => {
            let wt = g.transpose(w);
            let wtv = g.matmul(wt, v);
            let dir = g.sub(k, wtv);
            let o = g.outer(v, dir);
            let upd = g.scalar_mul(need(eta, "eta")?, o);
            g.add(w, upd)
        }
        UpdateRule::RetNet { .. } | UpdateRule::Mamba2 => {
            let decayed = g.scalar_mul(need(lam, "lam")?, w);
            let o = g.outer(v, k);
            g.add(decayed, o)
        }
        UpdateRule::GatedRfa => {
            let lam = need(lam, "lam")?;
            let decayed = g.scalar_mul(lam, w);
            let keep = g.one_minus(lam);
            let o = g.outer(v, k);
            let write = g.scalar_mul(keep, o);
            g.add(decayed, write)
        }
        UpdateRule::Mlstm => {
            let decayed = g.scalar_mul(need(lam, "lam")?, w);
            let o = g.outer(v, k);
            let write = g.scalar_mul(need(eta, "eta")?, o);
            g.add(decayed, write)
        }
        UpdateRule::Gla => {
            let decayed = g.row_scale(need(a, "a row decay")?, w);
            let o = g.outer(v, k);
            g.add(decayed, o)
        }
        UpdateRule::GatedDelta => {
            let write = delta_write(g, w, need(eta, "eta")?);
            let decayed = g.scalar_mul(need(lam, "lam")?, w);
            g.add(decayed, write)
        }
    })
}

fn softmax_attention_forward(g: &mut Graph, heads: usize, wq: Var, wk: Var, wv: Var, xs: &[Var]) -> Result<Vec<Var>> {
    let width = g.value(wq).rows();
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(config_err(format!("width {width} is not divisible by {heads} heads")));
    }
    let hd = width / heads;
    let mut keys: Vec<Vec<Var>> = vec![Vec::new(); heads];
    let mut values: Vec<Vec<Var>> = vec![Vec::new(); heads];
    let mut ys = Vec::with_capacity(xs.len());
    for &x in xs {
        let q = g.matmul(wq, x);
        let k = g.matmul(wk, x);
        let v = g.matmul(wv, x);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_rows(q, h * hd, hd);
            keys[h].push(g.slice_rows(k, h * hd, hd));
            values[h].push(g.slice_rows(v, h * hd, hd));
            let scores: Vec<Var> = keys[h].iter().map(|&kt| g.dot(kt, qh)).collect();
            let scores = g.concat_rows(&scores);
            let weights = g.softmax(scores);
            let vs = g.concat_cols(&values[h]);
            outs.push(g.matmul(vs, weights));
        }
        ys.push(if heads == 1 { outs[0] } else { g.concat_rows(&outs) });
    }
    Ok(ys)
}

/// `s' = tanh(W_r s + W_i x)` from `s = 0`.
fn rnn_forward(g: &mut Graph, wr: Var, wi: Var, xs: &[Var]) -> Result<Vec<Var>> {
    let width = g.value(wr).rows();
    let mut s = g.leaf(Mat::zeros(width, 1));
    let mut ys = Vec::with_capacity(xs.len());
    for &x in xs {
        let rec = g.matmul(wr, s);
        let inp = g.matmul(wi, x);
        let pre = g.add(rec, inp);
        s = g.tanh(pre);
        ys.push(s);
    }
    Ok(ys)
}

/// `s' = σ(W_r x) ⊙ s + σ(W_i x) ⊙ x` from `s = 0`.
fn ssm_forward(g: &mut Graph, wr: Var, wi: Var, xs: &[Var]) -> Result<Vec<Var>> {
    let width = g.value(wr).rows();
    let mut s = g.leaf(Mat::zeros(width, 1));
    let mut ys = Vec::with_capacity(xs.len());
    for &x in xs {
        let r_raw = g.matmul(wr, x);
        let r = g.sigmoid(r_raw);
        let i_raw = g.matmul(wi, x);
        let i = g.sigmoid(i_raw);
        let keep = g.mul(r, s);
        let write = g.mul(i, x);
        s = g.add(keep, write);
        ys.push(s);
    }
    Ok(ys)
}

/// Outputs of one mixer over `xs` with parameters `params` (unprefixed names).
pub fn mixer_outputs(spec: &MixerSpec, params: &ParamSet, xs: &[Vector]) -> Result<Vec<Vector>> {
    let mut g = Graph::new();
    let vars = BoundParams::bind(&mut g, params);
    let inputs: Vec<Var> = xs.iter().map(|x| g.leaf(Mat::column(x))).collect();
    let ys = spec.forward(&mut g, &vars, "", &inputs)?;
    Ok(ys.iter().map(|&y| g.value(y).col_vector(0)).collect())
}

/// Gradients of `Σ_t upstream_t · y_t` with respect to every mixer parameter.
pub fn backward_seq(spec: &MixerSpec, params: &ParamSet, xs: &[Vector], upstream: &[Vector]) -> Result<ParamSet> {
    if xs.len() != upstream.len() {
        return Err(FwpError::Shape(format!(
            "{} inputs but {} upstream gradients",
            xs.len(),
            upstream.len()
        )));
    }
    let mut g = Graph::new();
    let vars = BoundParams::bind(&mut g, params);
    let inputs: Vec<Var> = xs.iter().map(|x| g.leaf(Mat::column(x))).collect();
    let ys = spec.forward(&mut g, &vars, "", &inputs)?;
    let mut terms = Vec::with_capacity(ys.len());
    for (&y, dy) in ys.iter().zip(upstream) {
        if g.value(y).rows() != dy.dim() {
            return Err(FwpError::Shape(format!(
                "upstream gradient has {} entries for an output of {}",
                dy.dim(),
                g.value(y).rows()
            )));
        }
        let d = g.leaf(Mat::column(dy));
        terms.push(g.dot(y, d));
    }
    let Some(total) = g.add_all(&terms) else {
        return Ok(params.zeros_like());
    };
    let grads = g.backward(total);
    Ok(vars.gradients(&g, &grads))
}

/// Unprefixed parameter set of one FWP layer.
pub fn fwp_params(slow: &SlowWeights) -> ParamSet {
    slow.named()
        .into_iter()
        .map(|(k, m)| (k.to_string(), m.clone()))
        .collect()
}

/// A standalone FWP layer with arbitrary `d_in`, `d_key`, `d_out` on the tape.
pub fn fwp_layer_outputs(cfg: &LayerConfig, slow: &SlowWeights, xs: &[Vector]) -> Result<Vec<Vector>> {
    slow.validate(cfg)?;
    let params = fwp_params(slow);
    let mut g = Graph::new();
    let vars = BoundParams::bind(&mut g, &params);
    let inputs: Vec<Var> = xs.iter().map(|x| g.leaf(Mat::column(x))).collect();
    let ys = fwp_forward(&mut g, cfg, &FwpVars::bind(&vars, "", cfg)?, &inputs)?;
    Ok(ys.iter().map(|&y| g.value(y).col_vector(0)).collect())
}

/// [`backward_seq`] for a standalone FWP layer.
pub fn fwp_layer_backward(cfg: &LayerConfig, slow: &SlowWeights, xs: &[Vector], upstream: &[Vector]) -> Result<ParamSet> {
    slow.validate(cfg)?;
    let params = fwp_params(slow);
    let mut g = Graph::new();
    let vars = BoundParams::bind(&mut g, &params);
    let inputs: Vec<Var> = xs.iter().map(|x| g.leaf(Mat::column(x))).collect();
    let ys = fwp_forward(&mut g, cfg, &FwpVars::bind(&vars, "", cfg)?, &inputs)?;
    let mut terms = Vec::with_capacity(ys.len());
    for (&y, dy) in ys.iter().zip(upstream) {
        let d = g.leaf(Mat::column(dy));
        terms.push(g.dot(y, d));
    }
    let Some(total) = g.add_all(&terms) else {
        return Ok(params.zeros_like());
    };
    let grads = g.backward(total);
    Ok(vars.gradients(&g, &grads))
}
