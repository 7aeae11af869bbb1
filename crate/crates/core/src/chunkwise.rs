//! Chunk-wise parallel execution of the additive and decay-family rules.
//!
//! A sequence is cut into chunks of `S` steps. Inside a chunk the outputs are
//! computed in attention form with a causal mask; across chunks the fast
//! weight is carried in recurrent form:
//!
//! ```text
//! Y_n     = W_n Q_n + V_n (K_nᵀ Q_n ⊙ M)
//! W_{n+1} = W_n + V_n K_nᵀ
//! ```
//!
//! For decay rules `W_t = Diag(γ_t) W_{t-1} + c_t v_t⊗k_t`, unrolling inside a
//! chunk gives
//!
//! ```text
//! y_j     = b_j ⊙ (W_n q_j) + Σ_{τ≤j} Γ(τ, j) ⊙ c_τ v_τ (k_τᵀ q_j)
//! W_{n+1} = Diag(b_s) W_n + Σ_τ Diag(Γ(τ, s)) c_τ v_τ⊗k_τ
//! ```
//!
//! with `b_j = γ_1 ⋯ γ_j` and `Γ(τ, j) = γ_{τ+1} ⋯ γ_j`. The partial products
//! are accumulated directly, never as ratios `b_j / b_τ`. When some decay in
//! the chunk is tiny they are accumulated as sums of logarithms instead.

use crate::error::{config_err, FwpError, Result};
use crate::layer::{head_step_inputs, project, LayerConfig, SlowWeights};
use crate::rules::{apply_rule, StepInputs, UpdateRule};
use crate::tensor::{Mat, Vector};

/// Partition of `len` steps into chunks of `chunk` (last one may be shorter).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunk: usize,
    pub len: usize,
}

impl ChunkPlan {
    pub fn new(chunk: usize, len: usize) -> Result<Self> {
        if chunk == 0 {
            return Err(config_err("chunk size must be at least 1"));
        }
        Ok(Self { chunk, len })
    }

    pub fn num_chunks(&self) -> usize {
        self.len.div_ceil(self.chunk)
    }

    /// `(start, size)` of every chunk in order.
    pub fn ranges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_chunks()).map(move |n| {
            let start = n * self.chunk;
            (start, self.chunk.min(self.len - start))
        })
    }
}

/// Multiplicative causal mask of the chunked form: 1 where key index ≤
/// query index, 0 elsewhere. Distinct from the softmax sentinel mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalZeroMask {
    len: usize,
}

impl CausalZeroMask {
    pub fn new(len: usize) -> Self {
        Self { len }
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_fn(self.len, self.len, |i, j| if i <= j { 1.0 } else { 0.0 })
    }

    pub fn apply(&self, m: &Mat) -> Mat {
        assert_eq!(m.shape(), (self.len, self.len), "mask size mismatch");
        m.hadamard(&self.to_mat())
    }
}

fn check_chunk(q: &Mat, k: &Mat, v: &Mat, w_in: &Mat) -> Result<()> {
    if q.shape() != k.shape() || v.cols() != k.cols() || w_in.shape() != (v.rows(), k.rows()) {
        return Err(FwpError::Shape(format!(
            "chunk Q {:?}, K {:?}, V {:?}, W {:?}",
            q.shape(),
            k.shape(),
            v.shape(),
            w_in.shape()
        )));
    }
    Ok(())
}

/// One chunk of the additive rule. Returns the chunk outputs and the carried state.
pub fn chunk_forward_additive(q: &Mat, k: &Mat, v: &Mat, w_in: &Mat) -> Result<(Mat, Mat)> {
    check_chunk(q, k, v, w_in)?;
    let s = q.cols();
    let intra = v.matmul(&CausalZeroMask::new(s).apply(&k.transpose().matmul(q)));
    let y = w_in.matmul(q).add(&intra);
    let w_out = w_in.add(&v.matmul(&k.transpose()));
    Ok((y, w_out))
}

/// Decay of one step: a scalar for every row, or one factor per row.
#[derive(Debug, Clone, PartialEq)]
pub enum StepDecay {
    Scalar(f64),
    Rows(Vector),
}

/// `(γ_t, c_t)` of a decay-family rule at one step.
pub fn decay_and_write_scale(rule: &UpdateRule, s: &StepInputs) -> Result<(StepDecay, f64)> {
    let lam = || match rule {
        UpdateRule::RetNet { lambda: Some(l) } => Ok(*l),
        _ => s.lam.ok_or_else(|| config_err(format!("rule `{}` needs lam", rule.name()))),
    };
    let eta = || s.eta.ok_or_else(|| config_err(format!("rule `{}` needs eta", rule.name())));
    match rule {
        UpdateRule::Additive => Ok((StepDecay::Scalar(1.0), 1.0)),
        UpdateRule::RetNet { .. } | UpdateRule::Mamba2 => Ok((StepDecay::Scalar(lam()?), 1.0)),
        UpdateRule::GatedRfa => {
            let l = lam()?;
            Ok((StepDecay::Scalar(l), 1.0 - l))
        }
        UpdateRule::Mlstm => Ok((StepDecay::Scalar(lam()?), eta()?)),
        UpdateRule::Gla => {
            let a = s
                .a
                .clone()
                .ok_or_else(|| config_err("rule `gla` needs a row decay"))?;
            Ok((StepDecay::Rows(a), 1.0))
        }
        other => Err(FwpError::UnsupportedRule(other.name().to_string())),
    }
}

/// Below this decay the products are accumulated as sums of logarithms.
const LOG_SPACE_BELOW: f64 = 1e-6;

fn use_log_space(decays: &[f64]) -> bool {
    decays.iter().any(|&g| g < LOG_SPACE_BELOW)
}

/// Running product of `decays[from..=to]` style accumulator.
struct Accum {
    log_space: bool,
    value: f64,
}

impl Accum {
    fn new(log_space: bool) -> Self {
        Self { log_space, value: if log_space { 0.0 } else { 1.0 } }
    }

    fn push(&mut self, g: f64) {
        if self.log_space {
            self.value += g.ln();
        } else {
            self.value *= g;
        }
    }

    fn get(&self) -> f64 {
        if self.log_space {
            self.value.exp()
        } else {
            self.value
        }
    }
}

/// `Γ(τ, j)` for one row of decays; zero where τ > j.
fn partial_products(decays: &[f64]) -> Mat {
    let s = decays.len();
    let log_space = use_log_space(decays);
    let mut gamma = Mat::zeros(s, s);
    for tau in 0..s {
        let mut acc = Accum::new(log_space);
        gamma.set(tau, tau, 1.0);
        for j in tau + 1..s {
            acc.push(decays[j]);
            gamma.set(tau, j, acc.get());
        }
    }
    gamma
}

fn prefix_products(decays: &[f64]) -> Vec<f64> {
    let mut acc = Accum::new(use_log_space(decays));
    decays
        .iter()
        .map(|&g| {
            acc.push(g);
            acc.get()
        })
        .collect()
}

/// One chunk of a decay-family rule. `q` is `d_key × s`; `steps` holds the
/// φ-mapped keys, values and bounded gates of the same `s` steps.
pub fn chunk_forward_decay(rule: &UpdateRule, q: &Mat, steps: &[StepInputs], w_in: &Mat) -> Result<(Mat, Mat)> {
    if !(rule.is_decay_family() || *rule == UpdateRule::Additive) {
        return Err(FwpError::UnsupportedRule(rule.name().to_string()));
    }
    if steps.len() != q.cols() {
        return Err(FwpError::Shape(format!("{} queries for {} steps", q.cols(), steps.len())));
    }
    let s = steps.len();
    let (d_out, d_key) = w_in.shape();
    if s == 0 {
        return Ok((Mat::zeros(d_out, 0), w_in.clone()));
    }
    let k = Mat::from_columns(&steps.iter().map(|st| st.k_feat.clone()).collect::<Vec<_>>());
    let mut decays = Vec::with_capacity(s);
    let mut scaled_values = Vec::with_capacity(s);
    for st in steps {
        let (decay, scale) = decay_and_write_scale(rule, st)?;
        if let StepDecay::Rows(a) = &decay {
            if a.dim() != d_out {
                return Err(FwpError::Shape(format!("row decay {} for {d_out} rows", a.dim())));
            }
        }
        decays.push(decay);
        scaled_values.push(st.v.scale(scale));
    }
    let v = Mat::from_columns(&scaled_values);
    check_chunk(q, &k, &v, w_in)?;
    let scores = k.transpose().matmul(q);
    let inter = w_in.matmul(q);

    if let StepDecay::Rows(_) = decays[0] {
        let rows: Vec<&Vector> = decays
            .iter()
            .map(|d| match d {
                StepDecay::Rows(a) => Ok(a),
                StepDecay::Scalar(_) => Err(config_err("mixed scalar and row decays")),
            })
            .collect::<Result<_>>()?;
        let mut y = Mat::zeros(d_out, s);
        let mut w_out = Mat::zeros(d_out, d_key);
        for r in 0..d_out {
            let gammas: Vec<f64> = rows.iter().map(|a| a[r]).collect();
            let b = prefix_products(&gammas);
            let g = partial_products(&gammas);
            for j in 0..s {
                let mut acc = b[j] * inter.get(r, j);
                for tau in 0..=j {
                    acc += g.get(tau, j) * v.get(r, tau) * scores.get(tau, j);
                }
                y.set(r, j, acc);
            }
            for c in 0..d_key {
                let mut acc = b[s - 1] * w_in.get(r, c);
                for tau in 0..s {
                    acc += g.get(tau, s - 1) * v.get(r, tau) * k.get(c, tau);
                }
                w_out.set(r, c, acc);
            }
        }
        return Ok((y, w_out));
    }

    let gammas: Vec<f64> = decays
        .iter()
        .map(|d| match d {
            StepDecay::Scalar(g) => Ok(*g),
            StepDecay::Rows(_) => Err(config_err("mixed scalar and row decays")),
        })
        .collect::<Result<_>>()?;
    let b = prefix_products(&gammas);
    let g = partial_products(&gammas);
    let decayed_inter = Mat::from_fn(d_out, s, |r, j| b[j] * inter.get(r, j));
    let y = decayed_inter.add(&v.matmul(&scores.hadamard(&g)));
    let tail = Vector::from((0..s).map(|tau| g.get(tau, s - 1)).collect::<Vec<_>>());
    let weighted_v = Mat::from_fn(d_out, s, |r, tau| v.get(r, tau) * tail[tau]);
    let w_out = w_in.scale(b[s - 1]).add(&weighted_v.matmul(&k.transpose()));
    Ok((y, w_out))
}

/// Runs a whole sequence chunk by chunk from `w0`.
pub fn chunked_forward(
    rule: &UpdateRule,
    q: &Mat,
    steps: &[StepInputs],
    w0: &Mat,
    chunk: usize,
) -> Result<(Mat, Mat)> {
    let plan = ChunkPlan::new(chunk, steps.len())?;
    if q.cols() != steps.len() {
        return Err(FwpError::Shape(format!("{} queries for {} steps", q.cols(), steps.len())));
    }
    let mut w = w0.clone();
    let mut ys = Mat::zeros(w0.rows(), steps.len());
    for (start, len) in plan.ranges() {
        let qc = q.col_block(start, len);
        let chunk_steps = &steps[start..start + len];
        let (yc, w_next) = if *rule == UpdateRule::Additive {
            let kc = Mat::from_columns(&chunk_steps.iter().map(|s| s.k_feat.clone()).collect::<Vec<_>>());
            let vc = Mat::from_columns(&chunk_steps.iter().map(|s| s.v.clone()).collect::<Vec<_>>());
            chunk_forward_additive(&qc, &kc, &vc, &w)?
        } else {
            chunk_forward_decay(rule, &qc, chunk_steps, &w)?
        };
        for j in 0..len {
            for r in 0..ys.rows() {
                ys.set(r, start + j, yc.get(r, j));
            }
        }
        w = w_next;
    }
    Ok((ys, w))
}

/// Recurrent reference: folds [`apply_rule`] and reads out `y_t = W_t q_t`.
pub fn recurrent_forward(rule: &UpdateRule, q: &Mat, steps: &[StepInputs], w0: &Mat) -> Result<(Mat, Mat)> {
    if q.cols() != steps.len() {
        return Err(FwpError::Shape(format!("{} queries for {} steps", q.cols(), steps.len())));
    }
    let mut w = w0.clone();
    let mut ys = Vec::with_capacity(steps.len());
    for (t, s) in steps.iter().enumerate() {
        w = apply_rule(rule, &w, s)?;
        ys.push(w.matvec(&q.col_vector(t)));
    }
    let out = if ys.is_empty() { Mat::zeros(w0.rows(), 0) } else { Mat::from_columns(&ys) };
    Ok((out, w))
}

/// Per-head φ-mapped queries and squashed step inputs of a layer over `xs`.
pub struct HeadSequence {
    pub q_feat: Mat,
    pub steps: Vec<StepInputs>,
}

/// Runs the slow net over `xs` and collects per-head inputs for the fast weights.
pub fn layer_head_sequences(cfg: &LayerConfig, slow: &SlowWeights, xs: &[Vector]) -> Result<Vec<HeadSequence>> {
    cfg.validate()?;
    slow.validate(cfg)?;
    let mut q_cols: Vec<Vec<Vector>> = vec![Vec::with_capacity(xs.len()); cfg.heads];
    let mut steps: Vec<Vec<StepInputs>> = vec![Vec::with_capacity(xs.len()); cfg.heads];
    for x in xs {
        for (h, p) in project(slow, cfg, x)?.iter().enumerate() {
            q_cols[h].push(cfg.phi.apply(&p.q));
            steps[h].push(head_step_inputs(cfg, h, p).swap_remove(0));
        }
    }
    Ok(q_cols
        .into_iter()
        .zip(steps)
        .map(|(q, steps)| HeadSequence {
            q_feat: if q.is_empty() { Mat::zeros(cfg.head_key(), 0) } else { Mat::from_columns(&q) },
            steps,
        })
        .collect())
}

/// Chunk-wise counterpart of [`crate::layer::forward_seq`] for the additive
/// and decay-family rules (unnormalized).
pub fn forward_seq_chunked(cfg: &LayerConfig, slow: &SlowWeights, xs: &[Vector], chunk: usize) -> Result<Vec<Vector>> {
    if !(cfg.rule.is_decay_family() || cfg.rule == UpdateRule::Additive) {
        return Err(FwpError::UnsupportedRule(cfg.rule.name().to_string()));
    }
    if cfg.normalized {
        return Err(config_err("chunkwise form covers unnormalized layers only"));
    }
    let heads = layer_head_sequences(cfg, slow, xs)?;
    let mut per_head = Vec::with_capacity(cfg.heads);
    for hs in &heads {
        let w0 = Mat::zeros(cfg.head_out(), cfg.head_key());
        per_head.push(chunked_forward(&cfg.rule, &hs.q_feat, &hs.steps, &w0, chunk)?.0);
    }
    Ok((0..xs.len())
        .map(|t| {
            let y = Vector::concat(&per_head.iter().map(|m| m.col_vector(t)).collect::<Vec<_>>());
            match &slow.wo {
                Some(wo) => wo.matvec(&y),
                None => y,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{forward_seq, PhiMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_steps(rng: &mut ChaCha8Rng, t: usize, d_out: usize, d_key: usize) -> (Mat, Vec<StepInputs>) {
        let q = Mat::uniform(d_key, t, 1.0, rng);
        let steps = (0..t)
            .map(|_| {
                StepInputs::new(Vector::uniform(d_key, 1.0, rng), Vector::uniform(d_out, 1.0, rng))
                    .with_eta(rng.gen_range(0.0..2.0))
                    .with_lam(rng.gen_range(0.5..1.0))
                    .with_row_decay(Vector::from((0..d_out).map(|_| rng.gen_range(0.5..1.0)).collect::<Vec<_>>()))
            })
            .collect();
        (q, steps)
    }

    #[test]
    fn plan_counts_partial_chunks() {
        let plan = ChunkPlan::new(4, 10).unwrap();
        assert_eq!(plan.num_chunks(), 3);
        assert_eq!(plan.ranges().collect::<Vec<_>>(), vec![(0, 4), (4, 4), (8, 2)]);
        assert!(ChunkPlan::new(0, 3).is_err());
    }

    #[test]
    fn single_step_chunk_is_one_recurrent_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Mat::uniform(3, 4, 1.0, &mut rng);
        let (q, k, v) = (Vector::uniform(4, 1.0, &mut rng), Vector::uniform(4, 1.0, &mut rng), Vector::uniform(3, 1.0, &mut rng));
        let (y, w_out) = chunk_forward_additive(&Mat::column(&q), &Mat::column(&k), &Mat::column(&v), &w).unwrap();
        let mut expected_w = w.clone();
        expected_w.add_outer(1.0, &v, &k);
        assert!(w_out.max_abs_diff(&expected_w) < 1e-15);
        assert!(y.col_vector(0).max_abs_diff(&expected_w.matvec(&q)) < 1e-14);
    }

    #[test]
    fn additive_chunks_match_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (t, s) in [(16, 4), (10, 4)] {
            let (q, steps) = random_steps(&mut rng, t, 3, 5);
            let w0 = Mat::zeros(3, 5);
            let (y_ref, w_ref) = recurrent_forward(&UpdateRule::Additive, &q, &steps, &w0).unwrap();
            let (y, w) = chunked_forward(&UpdateRule::Additive, &q, &steps, &w0, s).unwrap();
            assert!(y.max_abs_diff(&y_ref) < 1e-10);
            assert!(w.max_abs_diff(&w_ref) < 1e-10);
        }
    }

    #[test]
    fn unit_decay_matches_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, mut steps) = random_steps(&mut rng, 8, 2, 3);
        for s in &mut steps {
            s.lam = Some(1.0);
            s.eta = Some(1.0);
        }
        let w0 = Mat::uniform(2, 3, 1.0, &mut rng);
        let qc = q.col_block(0, 8);
        let kc = Mat::from_columns(&steps.iter().map(|s| s.k_feat.clone()).collect::<Vec<_>>());
        let vc = Mat::from_columns(&steps.iter().map(|s| s.v.clone()).collect::<Vec<_>>());
        let (ya, wa) = chunk_forward_additive(&qc, &kc, &vc, &w0).unwrap();
        let (yd, wd) = chunk_forward_decay(&UpdateRule::Mlstm, &qc, &steps, &w0).unwrap();
        assert!(ya.max_abs_diff(&yd) < 1e-14);
        assert!(wa.max_abs_diff(&wd) < 1e-14);
    }

    #[test]
    fn decay_rules_match_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rules = [
            UpdateRule::RetNet { lambda: Some(0.9) },
            UpdateRule::Mamba2,
            UpdateRule::GatedRfa,
            UpdateRule::Mlstm,
            UpdateRule::Gla,
        ];
        for rule in rules {
            for (t, s) in [(12, 4), (8, 4), (9, 2), (5, 5)] {
                let (q, steps) = random_steps(&mut rng, t, 3, 4);
                let w0 = Mat::uniform(3, 4, 1.0, &mut rng);
                let (y_ref, w_ref) = recurrent_forward(&rule, &q, &steps, &w0).unwrap();
                let (y, w) = chunked_forward(&rule, &q, &steps, &w0, s).unwrap();
                assert!(y.max_abs_diff(&y_ref) < 1e-9, "{rule} T={t} S={s}");
                assert!(w.max_abs_diff(&w_ref) < 1e-9, "{rule} T={t} S={s}");
            }
        }
    }

    #[test]
    fn tiny_decays_do_not_produce_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, mut steps) = random_steps(&mut rng, 40, 2, 2);
        for (i, s) in steps.iter_mut().enumerate() {
            s.lam = Some([0.0, 1e-12, 0.9, 0.99][i % 4]);
        }
        let w0 = Mat::zeros(2, 2);
        let (y_ref, _) = recurrent_forward(&UpdateRule::Mamba2, &q, &steps, &w0).unwrap();
        for s in [3, 8, 40] {
            let (y, _) = chunked_forward(&UpdateRule::Mamba2, &q, &steps, &w0, s).unwrap();
            assert!(y.is_finite());
            assert!(y.max_abs_diff(&y_ref) < 1e-9);
        }
    }

    #[test]
    fn state_splice() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, steps) = random_steps(&mut rng, 12, 3, 3);
        let rule = UpdateRule::Gla;
        let w0 = Mat::zeros(3, 3);
        let (y_full, w_full) = chunked_forward(&rule, &q, &steps, &w0, 4).unwrap();
        let (y_a, w_a) = chunked_forward(&rule, &q.col_block(0, 8), &steps[..8], &w0, 4).unwrap();
        let (y_b, w_b) = chunked_forward(&rule, &q.col_block(8, 4), &steps[8..], &w_a, 4).unwrap();
        assert_eq!(y_full.col_block(0, 8), y_a);
        assert_eq!(y_full.col_block(8, 4), y_b);
        assert_eq!(w_full, w_b);
    }

    #[test]
    fn delta_is_unsupported() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, steps) = random_steps(&mut rng, 4, 2, 2);
        for rule in [UpdateRule::Delta, UpdateRule::Oja, UpdateRule::GatedDelta] {
            let err = chunk_forward_decay(&rule, &q, &steps, &Mat::zeros(2, 2)).unwrap_err();
            assert!(matches!(err, FwpError::UnsupportedRule(_)));
        }
    }

    #[test]
    fn layer_chunked_matches_recurrent_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for rule in [UpdateRule::Additive, UpdateRule::RetNet { lambda: None }, UpdateRule::Gla, UpdateRule::Mlstm] {
            let mut cfg = LayerConfig::new(5, 6, 4, 2, rule, PhiMap::SiluL2norm);
            cfg.output_projection = true;
            let slow = SlowWeights::init(&cfg, &mut rng);
            let xs: Vec<Vector> = (0..11).map(|_| Vector::uniform(5, 1.0, &mut rng)).collect();
            let (ys, _) = forward_seq(&cfg, &slow, &xs).unwrap();
            for s in [1, 3, 11] {
                let yc = forward_seq_chunked(&cfg, &slow, &xs, s).unwrap();
                for (a, b) in ys.iter().zip(&yc) {
                    assert!(a.max_abs_diff(b) < 1e-10);
                }
            }
        }
    }
}
