//! Residual block stack: embedding, `n` blocks of
//! `x + mix(LN(x))` then `x + FFN(LN(x))`, final norm and a linear readout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::mixers::{join, BoundParams, MixerSpec};
use super::params::ParamSet;
use crate::error::{config_err, FwpError, Result};
use crate::tensor::{Mat, Vector};

/// Hidden width of the feedforward sub-layer relative to the model width.
pub const FFN_MULTIPLIER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of each input vector (vocabulary size for one-hot tokens).
    pub d_input: usize,
    pub d_model: usize,
    pub blocks: usize,
    /// Width of the readout (classes, or target dimension for regression).
    pub d_output: usize,
    pub mixer: MixerSpec,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_input == 0 || self.d_model == 0 || self.d_output == 0 {
            return Err(config_err("model widths must be positive"));
        }
        self.mixer.validate(self.d_model)
    }

    /// Seeded initialization: uniform fan-in scaling, unit norm gains.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        self.validate()?;
        let d = self.d_model;
        let hidden = FFN_MULTIPLIER * d;
        let mut p = ParamSet::new();
        p.insert("embed", Mat::uniform(d, self.d_input, 1.0, rng));
        for b in 0..self.blocks {
            let prefix = format!("block{b}");
            p.insert(join(&prefix, "ln1"), Mat::from_fn(d, 1, |_, _| 1.0));
            self.mixer.init(d, &join(&prefix, "mixer"), rng, &mut p);
            p.insert(join(&prefix, "ln2"), Mat::from_fn(d, 1, |_, _| 1.0));
            p.insert(join(&prefix, "ffn_in"), Mat::uniform(hidden, d, 1.0 / (d as f64).sqrt(), rng));
            p.insert(join(&prefix, "ffn_out"), Mat::uniform(d, hidden, 1.0 / (hidden as f64).sqrt(), rng));
        }
        p.insert("ln_final", Mat::from_fn(d, 1, |_, _| 1.0));
        p.insert("readout", Mat::uniform(self.d_output, d, 1.0 / (d as f64).sqrt(), rng));
        Ok(p)
    }

    /// Records the model over `xs` and returns the per-position readouts.
    pub fn forward(&self, g: &mut Graph, vars: &BoundParams, xs: &[Var]) -> Result<Vec<Var>> {
        let embed = vars.get("embed")?;
        let mut h: Vec<Var> = xs.iter().map(|&x| g.matmul(embed, x)).collect();
        for b in 0..self.blocks {
            let prefix = format!("block{b}");
            let ln1 = vars.get(&join(&prefix, "ln1"))?;
            let normed: Vec<Var> = h.iter().map(|&x| g.layer_norm(x, ln1)).collect();
            let mixed = self.mixer.forward(g, vars, &join(&prefix, "mixer"), &normed)?;
            h = h.iter().zip(&mixed).map(|(&x, &m)| g.add(x, m)).collect();
            let ln2 = vars.get(&join(&prefix, "ln2"))?;
            let w_in = vars.get(&join(&prefix, "ffn_in"))?;
            let w_out = vars.get(&join(&prefix, "ffn_out"))?;
            h = h
                .iter()
                .map(|&x| {
                    let n = g.layer_norm(x, ln2);
                    let pre = g.matmul(w_in, n);
                    let act = g.gelu(pre);
                    let f = g.matmul(w_out, act);
                    g.add(x, f)
                })
                .collect();
        }
        let ln_final = vars.get("ln_final")?;
        let readout = vars.get("readout")?;
        let outs: Vec<Var> = h
            .iter()
            .map(|&x| {
                let n = g.layer_norm(x, ln_final);
                g.matmul(readout, n)
            })
            .collect();
        for (t, &o) in outs.iter().enumerate() {
            if !g.value(o).is_finite() {
                return Err(FwpError::Numeric {
                    step: t + 1,
                    what: "model output".into(),
                });
            }
        }
        Ok(outs)
    }

    /// Readouts at every position, without recording gradients for later use.
    pub fn outputs(&self, params: &ParamSet, xs: &[Vector]) -> Result<Vec<Vector>> {
        self.check_inputs(xs)?;
        let mut g = Graph::new();
        let vars = BoundParams::bind(&mut g, params);
        let inputs: Vec<Var> = xs.iter().map(|x| g.leaf(Mat::column(x))).collect();
        let outs = self.forward(&mut g, &vars, &inputs)?;
        Ok(outs.iter().map(|&o| g.value(o).col_vector(0)).collect())
    }

    pub fn check_inputs(&self, xs: &[Vector]) -> Result<()> {
        if let Some(x) = xs.iter().find(|x| x.dim() != self.d_input) {
            return Err(FwpError::Shape(format!(
                "model input has {} entries, expected {}",
                x.dim(),
                self.d_input
            )));
        }
        Ok(())
    }
}

/// What the loss looks at.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Cross-entropy on the last position.
    FinalClass(usize),
    /// Mean cross-entropy over positions with a label.
    PerStepClass(Vec<Option<usize>>),
    /// Mean squared error on the last position.
    FinalRegression(Vector),
}

/// Loss value and parameter gradients for one sequence.
pub fn loss_and_grad(cfg: &ModelConfig, params: &ParamSet, xs: &[Vector], target: &Target) -> Result<(f64, ParamSet)> {
    let (loss, grads, _) = loss_grad_output(cfg, params, xs, target)?;
    Ok((loss, grads))
}

/// Like [`loss_and_grad`], also returning the readout at the last position.
pub fn loss_grad_output(
    cfg: &ModelConfig,
    params: &ParamSet,
    xs: &[Vector],
    target: &Target,
) -> Result<(f64, ParamSet, Vector)> {
    cfg.check_inputs(xs)?;
    if xs.is_empty() {
        return Err(FwpError::Input("empty sequence".into()));
    }
    let mut g = Graph::new();
    let vars = BoundParams::bind(&mut g, params);
    let inputs: Vec<Var> = xs.iter().map(|x| g.leaf(Mat::column(x))).collect();
    let outs = cfg.forward(&mut g, &vars, &inputs)?;
    let loss = loss_var(&mut g, &outs, target)?;
    let value = g.scalar_value(loss);
    let last = g.value(outs[outs.len() - 1]).col_vector(0);
    let grads = g.backward(loss);
    Ok((value, vars.gradients(&g, &grads), last))
}

/// Loss value only.
pub fn loss_value(cfg: &ModelConfig, params: &ParamSet, xs: &[Vector], target: &Target) -> Result<f64> {
    Ok(loss_and_output(cfg, params, xs, target)?.0)
}

/// Loss value and the readout at the last position, without a backward pass.
pub fn loss_and_output(cfg: &ModelConfig, params: &ParamSet, xs: &[Vector], target: &Target) -> Result<(f64, Vector)> {
    cfg.check_inputs(xs)?;
    let mut g = Graph::new();
    let vars = BoundParams::bind(&mut g, params);
    let inputs: Vec<Var> = xs.iter().map(|x| g.leaf(Mat::column(x))).collect();
    let outs = cfg.forward(&mut g, &vars, &inputs)?;
    let loss = loss_var(&mut g, &outs, target)?;
    Ok((g.scalar_value(loss), g.value(outs[outs.len() - 1]).col_vector(0)))
}

fn loss_var(g: &mut Graph, outs: &[Var], target: &Target) -> Result<Var> {
    let last = *outs.last().ok_or_else(|| FwpError::Input("empty sequence".into()))?;
    match target {
        Target::FinalClass(c) => Ok(g.cross_entropy(last, *c)),
        Target::PerStepClass(labels) => {
            if labels.len() != outs.len() {
                return Err(FwpError::Shape(format!("{} labels for {} positions", labels.len(), outs.len())));
            }
            let terms: Vec<Var> = outs
                .iter()
                .zip(labels)
                .filter_map(|(&o, l)| l.map(|c| g.cross_entropy(o, c)))
                .collect();
            let n = terms.len();
            let total = g.add_all(&terms).ok_or_else(|| FwpError::Input("no labelled positions".into()))?;
            Ok(g.scale(total, 1.0 / n as f64))
        }
        Target::FinalRegression(y) => Ok(g.mse(last, &Mat::column(y))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::PhiMap;
    use crate::rules::UpdateRule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(mixer: MixerSpec) -> ModelConfig {
        ModelConfig {
            d_input: 3,
            d_model: 4,
            blocks: 2,
            d_output: 2,
            mixer,
        }
    }

    #[test]
    fn init_layout() {
        let cfg = small(MixerSpec::fwp(UpdateRule::Delta, 2, PhiMap::SiluL2norm));
        let p = cfg.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(p.get("block1.mixer.w_b").is_some());
        assert_eq!(p.get("block0.ffn_in").unwrap().shape(), (16, 4));
        assert_eq!(p.get("readout").unwrap().shape(), (2, 4));
    }

    #[test]
    fn causal_outputs() {
        let cfg = small(MixerSpec::SoftmaxAttention { heads: 2 });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = cfg.init(&mut rng).unwrap();
        let xs: Vec<Vector> = (0..5).map(|_| Vector::uniform(3, 1.0, &mut rng)).collect();
        let full = cfg.outputs(&p, &xs).unwrap();
        let prefix = cfg.outputs(&p, &xs[..3]).unwrap();
        for t in 0..3 {
            assert_eq!(full[t], prefix[t]);
        }
    }

    #[test]
    fn bad_heads_rejected() {
        let cfg = small(MixerSpec::SoftmaxAttention { heads: 3 });
        assert!(cfg.validate().is_err());
    }
}
