use fwplab::attention::{softmax_attention_parallel, softmax_attention_sequential};
use fwplab::chunkwise::forward_seq_chunked;
use fwplab::equiv::random_step_inputs;
use fwplab::layer::{forward_seq, LayerConfig, PhiMap, SlowWeights};
use fwplab::rng::{item_seed, split_seed};
use fwplab::rules::{apply_rule, canonical_transition, delta_product_step, StepInputs, UpdateRule};
use fwplab::tasks::{generate_samples, TaskKind, TaskSpec};
use fwplab::{Mat, Vector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn inputs(rng: &mut ChaCha8Rng, d: usize, t: usize) -> Vec<Vector> {
    (0..t).map(|_| Vector::uniform(d, 1.0, rng)).collect()
}

const CHUNKABLE: [UpdateRule; 6] = [
    UpdateRule::Additive,
    UpdateRule::RetNet { lambda: None },
    UpdateRule::Mamba2,
    UpdateRule::GatedRfa,
    UpdateRule::Mlstm,
    UpdateRule::Gla,
];

const CANONICAL: [UpdateRule; 8] = [
    UpdateRule::Additive,
    UpdateRule::Delta,
    UpdateRule::RetNet { lambda: Some(0.7) },
    UpdateRule::Mamba2,
    UpdateRule::GatedRfa,
    UpdateRule::Mlstm,
    UpdateRule::Gla,
    UpdateRule::GatedDelta,
];

/// y_t = Σ_{s ≤ t} v_s (k_s · q_t), written as plain loops.
fn unnormalized_attention_oracle(slow: &SlowWeights, xs: &[Vector]) -> Vec<Vector> {
    let q: Vec<Vector> = xs.iter().map(|x| slow.wq.matvec(x)).collect();
    let k: Vec<Vector> = xs.iter().map(|x| slow.wk.matvec(x)).collect();
    let v: Vec<Vector> = xs.iter().map(|x| slow.wv.matvec(x)).collect();
    (0..xs.len())
        .map(|t| {
            let mut y = vec![0.0; v[0].dim()];
            for s in 0..=t {
                let score: f64 = (0..q[t].dim()).map(|i| k[s][i] * q[t][i]).sum();
                for (r, out) in y.iter_mut().enumerate() {
                    *out += v[s][r] * score;
                }
            }
            Vector::from(y)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vanilla_fwp_matches_attention_oracle(seed in any::<u64>(), t in 1usize..24, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LayerConfig::new(d, d, d, 1, UpdateRule::Additive, PhiMap::Identity);
        let slow = SlowWeights::init(&cfg, &mut rng);
        let xs = inputs(&mut rng, d, t);
        let (ys, _) = forward_seq(&cfg, &slow, &xs).unwrap();
        for (y, o) in ys.iter().zip(unnormalized_attention_oracle(&slow, &xs)) {
            prop_assert!(y.max_abs_diff(&o) < 1e-10);
        }
    }

    #[test]
    fn chunked_matches_recurrent(
        seed in any::<u64>(),
        rule in prop::sample::select(CHUNKABLE.to_vec()),
        t in 1usize..40,
        chunk_frac in 0.0f64..1.0,
        heads in 1usize..=2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4 * heads;
        let cfg = LayerConfig::new(d, d, d, heads, rule, PhiMap::SiluL2norm);
        let slow = SlowWeights::init(&cfg, &mut rng);
        let xs = inputs(&mut rng, d, t);
        let chunk = 1 + (chunk_frac * t as f64) as usize;
        let (ys, _) = forward_seq(&cfg, &slow, &xs).unwrap();
        let chunked = forward_seq_chunked(&cfg, &slow, &xs, chunk.min(t)).unwrap();
        prop_assert_eq!(ys.len(), chunked.len());
        for (a, b) in ys.iter().zip(&chunked) {
            prop_assert!(a.max_abs_diff(b) < 1e-9, "rule {} T={} S={}", rule, t, chunk);
        }
    }

    #[test]
    fn canonical_form_reproduces_the_update(
        seed in any::<u64>(),
        rule in prop::sample::select(CANONICAL.to_vec()),
        d_out in 1usize..6,
        d_key in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Mat::uniform(d_out, d_key, 1.0, &mut rng);
        let s = random_step_inputs(&mut rng, d_out, d_key);
        let direct = apply_rule(&rule, &w, &s).unwrap();
        let form = canonical_transition(&rule, &s, d_out, d_key).unwrap().form().unwrap();
        prop_assert!(direct.max_abs_diff(&form.apply(&w)) < 1e-12);
    }

    #[test]
    fn delta_scales_the_residual(seed in any::<u64>(), eta in 0.0f64..=2.0, d_out in 1usize..6, d_key in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Mat::uniform(d_out, d_key, 1.0, &mut rng);
        let k = Vector::uniform(d_key, 1.0, &mut rng).l2_normalize();
        prop_assume!(k.norm() > 0.5);
        let v = Vector::uniform(d_out, 1.0, &mut rng);
        let next = apply_rule(&UpdateRule::Delta, &w, &StepInputs::new(k.clone(), v.clone()).with_eta(eta)).unwrap();
        let before = v.sub(&w.matvec(&k));
        let after = v.sub(&next.matvec(&k));
        prop_assert!(after.max_abs_diff(&before.scale(1.0 - eta)) < 1e-12);
    }

    #[test]
    fn delta_product_of_one_is_delta(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Mat::uniform(d, d, 1.0, &mut rng);
        let s = random_step_inputs(&mut rng, d, d);
        let one = delta_product_step(&w, std::slice::from_ref(&s)).unwrap();
        prop_assert_eq!(one, apply_rule(&UpdateRule::Delta, &w, &s).unwrap());
    }

    #[test]
    fn softmax_forms_agree(seed in any::<u64>(), t in 1usize..=64, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Mat::uniform(d, t, 2.0, &mut rng);
        let k = Mat::uniform(d, t, 2.0, &mut rng);
        let v = Mat::uniform(d, t, 1.0, &mut rng);
        let par = softmax_attention_parallel(&q, &k, &v).unwrap();
        let (seq, weights) = softmax_attention_sequential(&q, &k, &v).unwrap();
        prop_assert!(par.max_abs_diff(&seq) < 1e-12);
        for (i, w) in weights.iter().enumerate() {
            prop_assert_eq!(w.dim(), i + 1);
            prop_assert!((w.sum() - 1.0).abs() < 1e-12);
            prop_assert!(w.as_slice().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn generated_labels_match_brute_force(seed in any::<u64>(), which in 0usize..4, lo in 1usize..8, span in 0usize..10) {
        let kind = [TaskKind::Parity, TaskKind::Modadd { m: 5 }, TaskKind::Anbn, TaskKind::Anbncn][which].clone();
        let spec = TaskSpec::new(kind, lo, lo + span);
        // block languages need a member length in range
        prop_assume!(spec.validate().is_ok());
        let samples = generate_samples(&spec, seed, 20).unwrap();
        prop_assert_eq!(&samples, &generate_samples(&spec, seed, 20).unwrap());
        for s in &samples {
            prop_assert!((lo..=lo + span).contains(&s.len()));
            prop_assert_eq!(s.label, spec.label(&s.tokens).unwrap());
        }
    }

    #[test]
    fn seed_streams_are_deterministic(global in any::<u64>(), i in any::<u64>()) {
        prop_assert_eq!(split_seed(global, "train"), split_seed(global, "train"));
        prop_assert_ne!(split_seed(global, "train"), split_seed(global, "eval"));
        prop_assert_eq!(item_seed(global, i), item_seed(global, i));
        prop_assert_ne!(item_seed(global, i), item_seed(global, i.wrapping_add(1)));
    }
}

fn all_strings(alphabet: &[char], len: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    for _ in 0..len {
        out = out
            .iter()
            .flat_map(|s| alphabet.iter().map(move |&c| format!("{s}{c}")))
            .collect();
    }
    out
}

/// a^n b^n (c^n) for n ≥ 1, checked by run-length counting.
fn block_oracle(s: &str, alphabet: &[char]) -> bool {
    let mut runs: Vec<(char, usize)> = Vec::new();
    for c in s.chars() {
        match runs.last_mut() {
            Some((last, n)) if *last == c => *n += 1,
            _ => runs.push((c, 1)),
        }
    }
    runs.len() == alphabet.len()
        && runs.iter().zip(alphabet).all(|((c, _), a)| c == a)
        && runs.iter().all(|&(_, n)| n == runs[0].1)
}

#[test]
fn labels_are_exhaustively_correct_for_short_strings() {
    let parity = TaskSpec::new(TaskKind::Parity, 1, 12);
    let anbn = TaskSpec::new(TaskKind::Anbn, 1, 12);
    let anbncn = TaskSpec::new(TaskKind::Anbncn, 1, 12);
    let modadd = TaskSpec::new(TaskKind::Modadd { m: 3 }, 1, 12);
    let mut checked = 0;
    for len in 1..=12 {
        for s in all_strings(&['0', '1'], len) {
            let odd = s.chars().fold(0, |acc, c| acc ^ usize::from(c == '1'));
            assert_eq!(parity.label(&s).unwrap(), odd, "{s}");
            checked += 1;
        }
        for s in all_strings(&['a', 'b'], len) {
            assert_eq!(anbn.label(&s).unwrap(), usize::from(block_oracle(&s, &['a', 'b'])), "{s}");
        }
    }
    assert_eq!(checked, 8190);
    for len in 1..=9 {
        for s in all_strings(&['a', 'b', 'c'], len) {
            assert_eq!(anbncn.label(&s).unwrap(), usize::from(block_oracle(&s, &['a', 'b', 'c'])), "{s}");
        }
    }
    for len in 1..=7 {
        for s in all_strings(&['0', '1', '2'], len) {
            let sum: u32 = s.chars().map(|c| c.to_digit(10).unwrap()).sum();
            assert_eq!(modadd.label(&s).unwrap(), (sum % 3) as usize, "{s}");
        }
    }
}

#[test]
fn foreign_tokens_are_rejected() {
    assert!(TaskSpec::new(TaskKind::Parity, 1, 4).label("012").is_err());
    assert!(TaskSpec::new(TaskKind::Anbn, 1, 4).label("abc").is_err());
}
