//! Registry of paired computations that must agree, run over seeded inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    concat_heads, linearized_attention, nosoftmax_attention, softmax_attention_parallel, softmax_attention_sequential,
    split_heads,
};
use crate::chunkwise::forward_seq_chunked;
use crate::error::{config_err, Result};
use crate::layer::{forward_seq, LayerConfig, PhiMap, SlowWeights};
use crate::rng::item_seed;
use crate::rules::{apply_rule, canonical_transition, StepInputs, UpdateRule};
use crate::tensor::{Mat, Vector};

/// Size of the injected perturbation.
pub const FAULT_SIZE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pair {
    NosoftmaxVsFwp,
    LinearizedVsNormalizedFwp,
    SoftmaxParallelVsSequential,
    ChunkVsRecurrentAdditive,
    ChunkVsRecurrentDecay,
    CanonicalVsApplyRule,
}

impl Pair {
    pub const ALL: [Pair; 6] = [
        Pair::NosoftmaxVsFwp,
        Pair::LinearizedVsNormalizedFwp,
        Pair::SoftmaxParallelVsSequential,
        Pair::ChunkVsRecurrentAdditive,
        Pair::ChunkVsRecurrentDecay,
        Pair::CanonicalVsApplyRule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pair::NosoftmaxVsFwp => "nosoftmax_vs_fwp",
            Pair::LinearizedVsNormalizedFwp => "linearized_vs_normalized_fwp",
            Pair::SoftmaxParallelVsSequential => "softmax_parallel_vs_sequential",
            Pair::ChunkVsRecurrentAdditive => "chunk_vs_recurrent_additive",
            Pair::ChunkVsRecurrentDecay => "chunk_vs_recurrent_decay",
            Pair::CanonicalVsApplyRule => "canonical_vs_apply_rule",
        }
    }

    pub fn from_name(name: &str) -> Option<Pair> {
        Pair::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn threshold(self) -> f64 {
        match self {
            Pair::NosoftmaxVsFwp | Pair::LinearizedVsNormalizedFwp => 1e-10,
            Pair::SoftmaxParallelVsSequential | Pair::CanonicalVsApplyRule => 1e-12,
            Pair::ChunkVsRecurrentAdditive | Pair::ChunkVsRecurrentDecay => 1e-9,
        }
    }

    /// Max-abs disagreement for one seed. With `fault`, one side gets a
    /// weight perturbed by [`FAULT_SIZE`].
    pub fn max_diff(self, seed: u64, fault: bool) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Pair::NosoftmaxVsFwp => duality(&mut rng, false, fault),
            Pair::LinearizedVsNormalizedFwp => duality(&mut rng, true, fault),
            Pair::SoftmaxParallelVsSequential => softmax_forms(&mut rng, fault),
            Pair::ChunkVsRecurrentAdditive => chunk_vs_recurrent(&mut rng, &[UpdateRule::Additive], fault),
            Pair::ChunkVsRecurrentDecay => chunk_vs_recurrent(&mut rng, &DECAY_RULES, fault),
            Pair::CanonicalVsApplyRule => canonical(&mut rng, fault),
        }
    }
}

pub const DECAY_RULES: [UpdateRule; 5] = [
    UpdateRule::RetNet { lambda: None },
    UpdateRule::Mamba2,
    UpdateRule::GatedRfa,
    UpdateRule::Mlstm,
    UpdateRule::Gla,
];

/// Sequence lengths and chunk sizes swept by the chunkwise pairs; `0` stands
/// for a single chunk spanning the sequence.
pub const CHUNK_LENGTHS: [usize; 3] = [10, 16, 37];
pub const CHUNK_SIZES: [usize; 6] = [1, 2, 3, 5, 8, 0];

fn inputs(rng: &mut ChaCha8Rng, d: usize, t: usize) -> Vec<Vector> {
    (0..t).map(|_| Vector::uniform(d, 1.0, rng)).collect()
}

fn max_diff_seq(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

fn duality(rng: &mut ChaCha8Rng, normalized: bool, fault: bool) -> Result<f64> {
    const T: usize = 64;
    const D: usize = 16;
    let heads = if rng.gen_bool(0.5) { 1 } else { 2 };
    let phi = if normalized { PhiMap::EluPlusOne } else { PhiMap::Identity };
    let mut cfg = LayerConfig::new(D, D, D, heads, UpdateRule::Additive, phi);
    if normalized {
        cfg.normalized = true;
        // the attention form has no stabilizer
        cfg.norm_eps = 0.0;
    }
    let slow = SlowWeights::init(&cfg, rng);
    let xs = inputs(rng, D, T);
    let (ys, _) = forward_seq(&cfg, &slow, &xs)?;
    let mut wq = slow.wq.clone();
    if fault {
        wq.set(0, 0, wq.get(0, 0) + FAULT_SIZE);
    }
    let x = Mat::from_columns(&xs);
    let q = split_heads(&wq.matmul(&x), heads);
    let k = split_heads(&slow.wk.matmul(&x), heads);
    let v = split_heads(&slow.wv.matmul(&x), heads);
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        parts.push(if normalized {
            linearized_attention(&q[h], &k[h], &v[h], phi)?
        } else {
            nosoftmax_attention(&q[h], &k[h], &v[h])?
        });
    }
    let att = concat_heads(&parts);
    let att_cols: Vec<Vector> = (0..T).map(|t| att.col_vector(t)).collect();
    Ok(max_diff_seq(&ys, &att_cols))
}

fn softmax_forms(rng: &mut ChaCha8Rng, fault: bool) -> Result<f64> {
    let t = rng.gen_range(1..=64);
    let d = 8;
    let q = Mat::uniform(d, t, 1.0, rng);
    let k = Mat::uniform(d, t, 1.0, rng);
    let v = Mat::uniform(d, t, 1.0, rng);
    let par = softmax_attention_parallel(&q, &k, &v)?;
    let mut v_seq = v.clone();
    if fault {
        v_seq.set(0, 0, v_seq.get(0, 0) + FAULT_SIZE);
    }
    let (seq, weights) = softmax_attention_sequential(&q, &k, &v_seq)?;
    let simplex_err = weights.iter().map(|w| (w.sum() - 1.0).abs()).fold(0.0, f64::max);
    Ok(par.max_abs_diff(&seq).max(simplex_err))
}

fn chunk_vs_recurrent(rng: &mut ChaCha8Rng, rules: &[UpdateRule], fault: bool) -> Result<f64> {
    let d = 8;
    let mut worst = 0.0f64;
    for rule in rules {
        let cfg = LayerConfig::new(d, d, d, 2, *rule, PhiMap::SiluL2norm);
        let slow = SlowWeights::init(&cfg, rng);
        let mut faulty = slow.clone();
        if fault {
            faulty.wk.set(0, 0, faulty.wk.get(0, 0) + FAULT_SIZE);
        }
        for &t in &CHUNK_LENGTHS {
            let xs = inputs(rng, d, t);
            let (ys, _) = forward_seq(&cfg, &slow, &xs)?;
            for &s in &CHUNK_SIZES {
                let chunk = if s == 0 { t } else { s };
                let chunked = forward_seq_chunked(&cfg, &faulty, &xs, chunk)?;
                worst = worst.max(max_diff_seq(&ys, &chunked));
            }
        }
    }
    Ok(worst)
}

/// Random inputs accepted by every rule.
pub fn random_step_inputs(rng: &mut ChaCha8Rng, d_out: usize, d_key: usize) -> StepInputs {
    StepInputs::new(Vector::uniform(d_key, 1.0, rng), Vector::uniform(d_out, 1.0, rng))
        .with_eta(rng.gen_range(0.0..2.0))
        .with_lam(rng.gen_range(0.0..1.0))
        .with_row_decay(Vector::from((0..d_out).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>()))
}

/// Rules with a state-independent transition. DeltaProduct is checked per
/// micro-step.
pub const CANONICAL_RULES: [UpdateRule; 9] = [
    UpdateRule::Additive,
    UpdateRule::Delta,
    UpdateRule::RetNet { lambda: Some(0.9) },
    UpdateRule::Mamba2,
    UpdateRule::GatedRfa,
    UpdateRule::Mlstm,
    UpdateRule::Gla,
    UpdateRule::GatedDelta,
    UpdateRule::DeltaProduct { n_h: 2 },
];

fn canonical(rng: &mut ChaCha8Rng, fault: bool) -> Result<f64> {
    let (d_out, d_key) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let mut worst = 0.0f64;
    for rule in &CANONICAL_RULES {
        let w = Mat::uniform(d_out, d_key, 1.0, rng);
        let s = random_step_inputs(rng, d_out, d_key);
        let direct = apply_rule(rule, &w, &s)?;
        let form = canonical_transition(rule, &s, d_out, d_key)?
            .form()
            .ok_or_else(|| config_err(format!("rule `{}` has no canonical form", rule.name())))?;
        let mut w_in = w.clone();
        if fault {
            w_in.set(0, 0, w_in.get(0, 0) + FAULT_SIZE);
        }
        worst = worst.max(direct.max_abs_diff(&form.apply(&w_in)));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub pair: String,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub max_diff: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivReport {
    pub pairs: Vec<PairReport>,
    pub passed: bool,
}

impl EquivReport {
    pub fn failures(&self) -> impl Iterator<Item = &PairReport> {
        self.pairs.iter().filter(|p| !p.passed)
    }
}

/// Runs `pairs` over `seeds` per pair drawn from `base_seed`. `fault` names a
/// pair whose second form is perturbed.
pub fn run_equiv(pairs: &[Pair], base_seed: u64, seeds: usize, fault: Option<Pair>) -> Result<EquivReport> {
    let mut reports = Vec::with_capacity(pairs.len());
    for &pair in pairs {
        let seed_list: Vec<u64> = (0..seeds as u64).map(|i| item_seed(base_seed, i)).collect();
        let mut max_diff = 0.0f64;
        let mut worst_seed = seed_list.first().copied().unwrap_or(base_seed);
        for &s in &seed_list {
            let d = pair.max_diff(s, fault == Some(pair))?;
            if d > max_diff || d.is_nan() {
                max_diff = d;
                worst_seed = s;
            }
        }
        reports.push(PairReport {
            pair: pair.name().to_string(),
            threshold: pair.threshold(),
            seeds: seed_list,
            max_diff,
            worst_seed,
            passed: max_diff < pair.threshold(),
        });
    }
    let passed = reports.iter().all(|r| r.passed);
    Ok(EquivReport { pairs: reports, passed })
}
