//! Central-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};
use super::mixers::{backward_seq, BoundParams, FwpMixer, MixerSpec};
use super::model::{loss_and_grad, loss_value, ModelConfig, Target};
use super::params::ParamSet;
use crate::error::{config_err, Result};
use crate::layer::PhiMap;
use crate::rules::UpdateRule;
use crate::tensor::{Mat, Vector};

/// Entries whose `|analytic| + |numeric|` falls below this are skipped.
pub const NEGLIGIBLE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Compares `analytic` against central differences of `loss` with step `eps`.
///
/// The relative error of an entry is `|a − n| / (|a| + |n|)`.
pub fn finite_diff_check<F>(params: &ParamSet, analytic: &ParamSet, eps: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(config_err("finite-difference step must be positive"));
    }
    if !params.same_layout(analytic) {
        return Err(config_err("gradient layout does not match parameters"));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        entries_checked: 0,
        worst: None,
    };
    let mut probe = params.clone();
    for (name, grad) in analytic.iter() {
        for idx in 0..grad.as_slice().len() {
            let original = params.get(name).expect("same layout").as_slice()[idx];
            probe.get_mut(name).expect("same layout").as_mut_slice()[idx] = original + eps;
            let plus = loss(&probe)?;
            probe.get_mut(name).expect("same layout").as_mut_slice()[idx] = original - eps;
            let minus = loss(&probe)?;
            probe.get_mut(name).expect("same layout").as_mut_slice()[idx] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.as_slice()[idx];
            let denom = a.abs() + numeric.abs();
            if denom <= NEGLIGIBLE {
                continue;
            }
            report.entries_checked += 1;
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.clone(), idx));
                }
            }
        }
    }
    Ok(report)
}

fn random_inputs(rng: &mut ChaCha8Rng, len: usize, width: usize) -> Vec<Vector> {
    (0..len).map(|_| Vector::uniform(width, 1.0, rng)).collect()
}

/// Checks one mixer of the given width on a random sequence with a random
/// upstream gradient.
pub fn check_mixer(spec: &MixerSpec, width: usize, seq_len: usize, seed: u64, eps: f64) -> Result<GradCheckReport> {
    spec.validate(width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    spec.init(width, "", &mut rng, &mut params);
    let xs = random_inputs(&mut rng, seq_len, width);
    let upstream = random_inputs(&mut rng, seq_len, width);
    let analytic = backward_seq(spec, &params, &xs, &upstream)?;
    finite_diff_check(&params, &analytic, eps, |p| {
        let ys = super::mixers::mixer_outputs(spec, p, &xs)?;
        Ok(ys.iter().zip(&upstream).map(|(y, u)| y.dot(u)).sum())
    })
}

/// Checks the full block stack with a final-position cross-entropy loss.
pub fn check_model(cfg: &ModelConfig, seq_len: usize, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = cfg.init(&mut rng)?;
    let xs = random_inputs(&mut rng, seq_len, cfg.d_input);
    let target = Target::FinalClass(seed as usize % cfg.d_output);
    let (_, analytic) = loss_and_grad(cfg, &params, &xs, &target)?;
    finite_diff_check(&params, &analytic, eps, |p| loss_value(cfg, p, &xs, &target))
}

/// Checks the block stack under `Σ_t u_t·y_t` for random upstream vectors
/// `u_t`, the same loss the mixer checks use.
pub fn check_model_projection(cfg: &ModelConfig, seq_len: usize, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = cfg.init(&mut rng)?;
    let xs = random_inputs(&mut rng, seq_len, cfg.d_input);
    let upstream = random_inputs(&mut rng, seq_len, cfg.d_output);
    let mut g = Graph::new();
    let vars = BoundParams::bind(&mut g, &params);
    let inputs: Vec<Var> = xs.iter().map(|x| g.leaf(Mat::column(x))).collect();
    let outs = cfg.forward(&mut g, &vars, &inputs)?;
    let terms: Vec<Var> = outs
        .iter()
        .zip(&upstream)
        .map(|(&y, u)| {
            let u = g.leaf(Mat::column(u));
            g.dot(y, u)
        })
        .collect();
    let loss = g.add_all(&terms).ok_or_else(|| config_err("empty sequence"))?;
    let grads = g.backward(loss);
    let analytic = vars.gradients(&g, &grads);
    finite_diff_check(&params, &analytic, eps, |p| {
        let ys = cfg.outputs(p, &xs)?;
        Ok(ys.iter().zip(&upstream).map(|(y, u)| y.dot(u)).sum())
    })
}

/// Every sequence-mixer variant, with `heads` heads where that applies.
pub fn all_mixers(heads: usize) -> Vec<MixerSpec> {
    let mut out: Vec<MixerSpec> = [
        UpdateRule::Additive,
        UpdateRule::Delta,
        UpdateRule::Oja,
        UpdateRule::RetNet { lambda: None },
        UpdateRule::Mamba2,
        UpdateRule::GatedRfa,
        UpdateRule::Mlstm,
        UpdateRule::Gla,
        UpdateRule::GatedDelta,
        UpdateRule::DeltaProduct { n_h: 2 },
    ]
    .into_iter()
    .map(|rule| MixerSpec::fwp(rule, heads, PhiMap::SiluL2norm))
    .collect();
    if let Some(MixerSpec::Fwp(f)) = out.first().cloned() {
        out.push(MixerSpec::Fwp(FwpMixer {
            phi: PhiMap::EluPlusOne,
            normalized: true,
            ..f
        }));
    }
    out.extend([MixerSpec::SoftmaxAttention { heads }, MixerSpec::Rnn, MixerSpec::Ssm]);
    out
}

/// One gradient check in a suite run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub subject: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

/// Checks every mixer of [`all_mixers`] and a two-block stack over `seeds`.
pub fn gradcheck_suite(width: usize, heads: usize, seq_len: usize, seeds: &[u64], eps: f64) -> Result<Vec<SuiteResult>> {
    let stack = ModelConfig {
        d_input: width,
        d_model: width,
        blocks: 2,
        d_output: 3,
        mixer: MixerSpec::fwp(UpdateRule::Delta, heads, PhiMap::SiluL2norm),
    };
    let mut out = Vec::new();
    for &seed in seeds {
        for spec in all_mixers(heads) {
            let r = check_mixer(&spec, width, seq_len, seed, eps)?;
            let mut subject = spec.label();
            if matches!(&spec, MixerSpec::Fwp(f) if f.normalized) {
                subject.push_str(":normalized");
            }
            out.push(SuiteResult {
                subject,
                seed,
                max_rel_error: r.max_rel_error,
                entries_checked: r.entries_checked,
            });
        }
        let r = check_model_projection(&stack, seq_len, seed, eps)?;
        out.push(SuiteResult {
            subject: "block_stack".into(),
            seed,
            max_rel_error: r.max_rel_error,
            entries_checked: r.entries_checked,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;

    #[test]
    fn quadratic_toy_is_exact() {
        let mut params = ParamSet::new();
        params.insert("w", Mat::from_vec(1, 3, vec![0.5, -1.0, 2.0]));
        let loss = |p: &ParamSet| {
            let w = p.get("w").unwrap().as_slice();
            Ok(w.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x).sum::<f64>())
        };
        let mut analytic = ParamSet::new();
        analytic.insert("w", Mat::from_vec(1, 3, vec![1.0, -4.0, 12.0]));
        let report = finite_diff_check(&params, &analytic, 1e-6, loss).unwrap();
        assert_eq!(report.entries_checked, 3);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut params = ParamSet::new();
        params.insert("w", Mat::from_vec(1, 1, vec![1.0]));
        let mut analytic = ParamSet::new();
        analytic.insert("w", Mat::from_vec(1, 1, vec![3.0]));
        let report = finite_diff_check(&params, &analytic, 1e-6, |p| Ok(p.get("w").unwrap().as_slice()[0].powi(2))).unwrap();
        assert!(report.max_rel_error > 0.1);
        assert_eq!(report.worst, Some(("w".into(), 0)));
    }

    #[test]
    fn rejects_bad_step() {
        let p = ParamSet::new();
        assert!(finite_diff_check(&p, &p, 0.0, |_| Ok(0.0)).is_err());
    }
}
