//! Formal-language and in-context regression data, token encoding, the
//! baseline recurrent cells, and bucketed evaluation.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{config_err, FwpError, Result};
use crate::rng::item_seed;
use crate::tensor::{sigmoid, Mat, Vector};

const DIGITS: &str = "0123456789abcdefghijklmnopqrstuvwxyz";

/// How targets reach an in-context learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    /// Input at step t carries the target of step t − 1.
    Delayed,
    /// Input carries its own target; the query has a zero target slot and a
    /// raised query flag.
    Synchronous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    Parity,
    /// Sum of base-36 digits modulo `m` (2 ≤ m ≤ 36).
    Modadd { m: usize },
    Anbn,
    Anbncn,
    IclRegression {
        d_x: usize,
        d_y: usize,
        #[serde(default)]
        noise_sd: f64,
        feedback: Feedback,
    },
}

/// A task and its length range (string length, or number of demonstrations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(rename = "task")]
    pub kind: TaskKind,
    pub min_len: usize,
    pub max_len: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, min_len: usize, max_len: usize) -> Self {
        Self { kind, min_len, max_len }
    }

    pub fn with_lengths(&self, min_len: usize, max_len: usize) -> Self {
        Self {
            kind: self.kind.clone(),
            min_len,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(config_err(format!(
                "length range [{}, {}] must satisfy 1 <= min <= max",
                self.min_len, self.max_len
            )));
        }
        match &self.kind {
            TaskKind::Modadd { m } if !(2..=36).contains(m) => {
                Err(config_err(format!("modulus {m} outside 2..=36")))
            }
            TaskKind::Anbn | TaskKind::Anbncn => {
                let block = if self.kind == TaskKind::Anbn { 2 } else { 3 };
                if member_lengths(block, self.min_len, self.max_len).is_empty() {
                    Err(config_err(format!(
                        "no member string has a length in [{}, {}]",
                        self.min_len, self.max_len
                    )))
                } else {
                    Ok(())
                }
            }
            TaskKind::IclRegression { d_x, d_y, noise_sd, .. } => {
                if *d_x == 0 || *d_y == 0 || !(*noise_sd >= 0.0) {
                    Err(config_err("regression needs d_x, d_y >= 1 and noise_sd >= 0"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self.kind, TaskKind::IclRegression { .. })
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            TaskKind::Parity | TaskKind::Anbn | TaskKind::Anbncn => 2,
            TaskKind::Modadd { m } => m,
            TaskKind::IclRegression { .. } => 0,
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let symbols: Vec<char> = match self.kind {
            TaskKind::Parity => vec!['0', '1'],
            TaskKind::Modadd { m } => DIGITS.chars().take(m).collect(),
            TaskKind::Anbn => vec!['a', 'b'],
            TaskKind::Anbncn => vec!['a', 'b', 'c'],
            TaskKind::IclRegression { .. } => return Err(config_err("regression episodes have no vocabulary")),
        };
        Ok(Vocab { symbols })
    }

    /// Width of one encoded step.
    pub fn input_width(&self) -> Result<usize> {
        match &self.kind {
            TaskKind::IclRegression { d_x, d_y, feedback, .. } => Ok(match feedback {
                Feedback::Delayed => d_x + d_y,
                Feedback::Synchronous => d_x + d_y + 1,
            }),
            _ => Ok(self.vocab()?.size()),
        }
    }

    /// Brute-force label of a token string.
    pub fn label(&self, tokens: &str) -> Result<usize> {
        let vocab = self.vocab()?;
        if let Some(c) = tokens.chars().find(|c| vocab.index(*c).is_none()) {
            return Err(FwpError::Input(format!("token `{c}` is not in the vocabulary")));
        }
        Ok(match self.kind {
            TaskKind::Parity => tokens.chars().filter(|&c| c == '1').count() % 2,
            TaskKind::Modadd { m } => tokens.chars().map(|c| vocab.index(c).expect("checked")).sum::<usize>() % m,
            TaskKind::Anbn => usize::from(is_block_member(tokens, &['a', 'b'])),
            TaskKind::Anbncn => usize::from(is_block_member(tokens, &['a', 'b', 'c'])),
            TaskKind::IclRegression { .. } => unreachable!("vocab() rejects regression"),
        })
    }

    /// Label of every prefix, aligned with [`Vocab::encode`] (the BOS position
    /// carries the label of the empty string).
    pub fn prefix_labels(&self, tokens: &str) -> Result<Vec<usize>> {
        let chars: Vec<char> = tokens.chars().collect();
        (0..=chars.len())
            .map(|i| self.label(&chars[..i].iter().collect::<String>()))
            .collect()
    }

    pub fn label_name(&self, label: usize) -> String {
        match self.kind {
            TaskKind::Parity => if label == 1 { "odd" } else { "even" }.into(),
            TaskKind::Anbn | TaskKind::Anbncn => if label == 1 { "member" } else { "non-member" }.into(),
            _ => label.to_string(),
        }
    }
}

/// `a^n b^n` (or `a^n b^n c^n`) with n ≥ 1.
fn is_block_member(tokens: &str, symbols: &[char]) -> bool {
    let chars: Vec<char> = tokens.chars().collect();
    let k = symbols.len();
    if chars.is_empty() || !chars.len().is_multiple_of(k) {
        return false;
    }
    let n = chars.len() / k;
    chars.iter().enumerate().all(|(i, &c)| c == symbols[i / n])
}

fn member_lengths(block: usize, min_len: usize, max_len: usize) -> Vec<usize> {
    (min_len..=max_len).filter(|l| l % block == 0).collect()
}

/// A labelled token string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: String,
    pub label: usize,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.tokens.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Demonstrations of one hidden linear map plus a query.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub demos: Vec<(Vector, Vector)>,
    pub query: Vector,
    pub query_target: Vector,
    pub feedback: Feedback,
}

impl Episode {
    /// One input per demonstration plus the query step.
    pub fn encode(&self) -> Vec<Vector> {
        let d_y = self.query_target.dim();
        let mut steps = Vec::with_capacity(self.demos.len() + 1);
        match self.feedback {
            Feedback::Synchronous => {
                for (z, y) in &self.demos {
                    steps.push(Vector::concat(&[z.clone(), y.clone(), Vector::zeros(1)]));
                }
                steps.push(Vector::concat(&[self.query.clone(), Vector::zeros(d_y), Vector::filled(1, 1.0)]));
            }
            Feedback::Delayed => {
                let mut prev = Vector::zeros(d_y);
                for (z, y) in &self.demos {
                    steps.push(Vector::concat(&[z.clone(), prev]));
                    prev = y.clone();
                }
                steps.push(Vector::concat(&[self.query.clone(), prev]));
            }
        }
        steps
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "demos": self.demos.iter().map(|(z, y)| vec![z.as_slice().to_vec(), y.as_slice().to_vec()]).collect::<Vec<_>>(),
            "query": self.query.as_slice(),
            "target": self.query_target.as_slice(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Samples(Vec<Sample>),
    Episodes(Vec<Episode>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Samples(s) => s.len(),
            Dataset::Episodes(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self, spec: &TaskSpec) -> String {
        let mut out = String::new();
        match self {
            Dataset::Samples(samples) => {
                for s in samples {
                    let line = json!({ "tokens": s.tokens, "label": spec.label_name(s.label) });
                    out.push_str(&line.to_string());
                    out.push('\n');
                }
            }
            Dataset::Episodes(eps) => {
                for e in eps {
                    out.push_str(&e.to_json().to_string());
                    out.push('\n');
                }
            }
        }
        out
    }
}

/// Token alphabet plus a beginning-of-sequence symbol at the last index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
}

impl Vocab {
    pub fn new(symbols: Vec<char>) -> Self {
        Self { symbols }
    }

    /// Number of one-hot dimensions (symbols plus BOS).
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn bos(&self) -> usize {
        self.symbols.len()
    }

    pub fn index(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    /// BOS followed by one one-hot column per token.
    pub fn encode(&self, tokens: &str) -> Result<Vec<Vector>> {
        let mut out = vec![Vector::one_hot(self.size(), self.bos())];
        for c in tokens.chars() {
            let i = self
                .index(c)
                .ok_or_else(|| FwpError::Input(format!("token `{c}` is not in the vocabulary")))?;
            out.push(Vector::one_hot(self.size(), i));
        }
        Ok(out)
    }

    pub fn decode(&self, encoded: &[Vector]) -> Result<String> {
        let mut out = String::new();
        for (pos, v) in encoded.iter().enumerate() {
            let hot: Vec<usize> = (0..v.dim()).filter(|&i| v[i] != 0.0).collect();
            if v.dim() != self.size() || hot.len() != 1 || v[hot[0]] != 1.0 {
                return Err(FwpError::Input(format!("position {pos} is not a one-hot vector")));
            }
            let i = hot[0];
            if i == self.bos() {
                if pos != 0 {
                    return Err(FwpError::Input(format!("BOS at position {pos}")));
                }
            } else {
                out.push(self.symbols[i]);
            }
        }
        Ok(out)
    }
}

fn random_string(rng: &mut ChaCha8Rng, symbols: &[char], len: usize) -> Vec<char> {
    (0..len).map(|_| symbols[rng.gen_range(0..symbols.len())]).collect()
}

fn counted(symbols: &[char], counts: &[usize]) -> String {
    symbols
        .iter()
        .zip(counts)
        .flat_map(|(&c, &n)| std::iter::repeat_n(c, n))
        .collect()
}

fn block_negative(rng: &mut ChaCha8Rng, symbols: &[char], spec: &TaskSpec, near_miss: bool) -> String {
    let k = symbols.len();
    let positives = member_lengths(k, spec.min_len, spec.max_len);
    if near_miss {
        // one count off by one, total length still in range
        let mut options = Vec::new();
        for n in 1..=spec.max_len / k + 1 {
            for which in 0..k {
                for delta in [-1i64, 1] {
                    let len = (k * n) as i64 + delta;
                    if len >= spec.min_len as i64 && len <= spec.max_len as i64 && (n as i64 + delta) >= 0 {
                        options.push((n, which, delta));
                    }
                }
            }
        }
        if let Some(&(n, which, delta)) = options.choose(rng) {
            let mut counts = vec![n; k];
            counts[which] = (n as i64 + delta) as usize;
            return counted(symbols, &counts);
        }
    }
    let len = *positives.choose(rng).expect("validated: a member length exists");
    let mut chars: Vec<char> = counted(symbols, &vec![len / k; k]).chars().collect();
    loop {
        chars.shuffle(rng);
        let s: String = chars.iter().collect();
        if !is_block_member(&s, symbols) {
            return s;
        }
    }
}

fn generate_sample(spec: &TaskSpec, rng: &mut ChaCha8Rng, want: usize, variant: usize) -> Result<Sample> {
    let vocab = spec.vocab()?;
    let tokens: String = match spec.kind {
        TaskKind::Parity | TaskKind::Modadd { .. } => {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let mut chars = random_string(rng, &vocab.symbols, len);
            if spec.kind == TaskKind::Parity {
                // keep the string random: flip one random position when needed
                let ones = chars.iter().filter(|&&c| c == '1').count();
                if ones % 2 != want {
                    let pos = rng.gen_range(0..len);
                    chars[pos] = if chars[pos] == '1' { '0' } else { '1' };
                }
            } else {
                let m = spec.num_classes();
                let rest: usize = chars[..len - 1].iter().map(|&c| vocab.index(c).expect("own symbol")).sum();
                chars[len - 1] = vocab.symbols[(want + m - rest % m) % m];
            }
            chars.into_iter().collect()
        }
        TaskKind::Anbn | TaskKind::Anbncn => {
            let symbols = vocab.symbols.clone();
            let k = symbols.len();
            if want == 1 {
                let lens = member_lengths(k, spec.min_len, spec.max_len);
                let len = *lens.choose(rng).expect("validated");
                counted(&symbols, &vec![len / k; k])
            } else {
                block_negative(rng, &symbols, spec, variant.is_multiple_of(2))
            }
        }
        TaskKind::IclRegression { .. } => return Err(config_err("use generate_episodes for regression")),
    };
    let label = spec.label(&tokens)?;
    debug_assert_eq!(label, want);
    Ok(Sample { tokens, label })
}

/// `n` labelled strings; sample `i` depends only on `(spec, seed, i)`.
/// Target labels cycle through the classes so the set is balanced.
pub fn generate_samples(spec: &TaskSpec, seed: u64, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if !spec.is_classification() {
        return Err(config_err("use generate_episodes for regression"));
    }
    let classes = spec.num_classes();
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, i as u64));
            generate_sample(spec, &mut rng, i % classes, i / classes)
        })
        .collect()
}

/// `n` regression episodes, each with its own hidden map.
pub fn generate_episodes(spec: &TaskSpec, seed: u64, n: usize) -> Result<Vec<Episode>> {
    spec.validate()?;
    let TaskKind::IclRegression { d_x, d_y, noise_sd, feedback } = spec.kind else {
        return Err(config_err("episodes exist only for icl_regression"));
    };
    let noise = Normal::new(0.0, noise_sd).map_err(|e| config_err(e.to_string()))?;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, i as u64));
            let map = Mat::uniform(d_y, d_x, 1.0, &mut rng);
            let count = rng.gen_range(spec.min_len..=spec.max_len);
            let draw = |rng: &mut ChaCha8Rng| {
                let z = Vector::uniform(d_x, 1.0, rng);
                let y = map.matvec(&z);
                let y = Vector::from(y.as_slice().iter().map(|a| a + noise.sample(rng)).collect::<Vec<_>>());
                (z, y)
            };
            let demos: Vec<(Vector, Vector)> = (0..count).map(|_| draw(&mut rng)).collect();
            let (query, query_target) = draw(&mut rng);
            Ok(Episode {
                demos,
                query,
                query_target,
                feedback,
            })
        })
        .collect()
}

pub fn generate(spec: &TaskSpec, seed: u64, n: usize) -> Result<Dataset> {
    if spec.is_classification() {
        Ok(Dataset::Samples(generate_samples(spec, seed, n)?))
    } else {
        Ok(Dataset::Episodes(generate_episodes(spec, seed, n)?))
    }
}

/// Vanilla RNN step `tanh(W_r s + W_i x)`.
pub fn rnn_step(wr: &Mat, wi: &Mat, s: &Vector, x: &Vector) -> Vector {
    wr.matvec(s).add(&wi.matvec(x)).map(f64::tanh)
}

/// Element-wise gated recurrence `r ⊙ s + i ⊙ x`.
#[track_caller]
pub fn ssm_cell_step(r: &Vector, i: &Vector, s: &Vector, x: &Vector) -> Vector {
    assert!(
        r.dim() == s.dim() && i.dim() == s.dim() && x.dim() == s.dim(),
        "shape error in ssm_cell_step"
    );
    r.hadamard(s).add(&i.hadamard(x))
}

/// Gates of the SSM cell as functions of the input only.
pub fn ssm_gates(wr: &Mat, wi: &Mat, x: &Vector) -> (Vector, Vector) {
    (wr.matvec(x).map(sigmoid), wi.matvec(x).map(sigmoid))
}

/// Anything that maps a token string to a class.
pub trait Classifier {
    fn classify(&self, tokens: &str) -> Result<usize>;
}

/// Anything that predicts the query target of an episode.
pub trait EpisodePredictor {
    fn predict(&self, episode: &Episode) -> Result<Vector>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketAccuracy {
    /// Samples with length ≤ `upper` (and above the previous bucket).
    pub upper: usize,
    pub correct: usize,
    pub total: usize,
}

impl BucketAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

impl fmt::Display for BucketAccuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "len<={}: {}/{} ({:.3})", self.upper, self.correct, self.total, self.accuracy())
    }
}

/// Accuracy per length bucket; `buckets` are ascending upper bounds and
/// longer samples are ignored.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, samples: &[Sample], buckets: &[usize]) -> Result<Vec<BucketAccuracy>> {
    if buckets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_err("buckets must be strictly ascending"));
    }
    let mut out: Vec<BucketAccuracy> = buckets
        .iter()
        .map(|&upper| BucketAccuracy { upper, correct: 0, total: 0 })
        .collect();
    for s in samples {
        let Some(b) = out.iter_mut().find(|b| s.len() <= b.upper) else { continue };
        b.total += 1;
        if model.classify(&s.tokens)? == s.label {
            b.correct += 1;
        }
    }
    Ok(out)
}

/// Mean squared error of query predictions against `reference` targets
/// (the episode targets when `None`).
pub fn evaluate_episodes<P: EpisodePredictor + ?Sized>(
    model: &P,
    episodes: &[Episode],
    reference: Option<&[Vector]>,
) -> Result<f64> {
    if let Some(r) = reference {
        if r.len() != episodes.len() {
            return Err(FwpError::Shape(format!("{} references for {} episodes", r.len(), episodes.len())));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, e) in episodes.iter().enumerate() {
        let pred = model.predict(e)?;
        let want = reference.map_or(&e.query_target, |r| &r[i]);
        let d = pred.sub(want);
        total += d.dot(&d);
        count += d.dim();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind, lo: usize, hi: usize) -> TaskSpec {
        TaskSpec::new(kind, lo, hi)
    }

    #[test]
    fn labels_from_definitions() {
        let parity = spec(TaskKind::Parity, 1, 8);
        assert_eq!(parity.label("1101").unwrap(), 1);
        assert_eq!(parity.label_name(1), "odd");
        let anbn = spec(TaskKind::Anbn, 1, 8);
        assert_eq!(anbn.label("aabb").unwrap(), 1);
        assert_eq!(anbn.label("aab").unwrap(), 0);
        assert_eq!(anbn.label("abab").unwrap(), 0);
        assert_eq!(anbn.label("").unwrap(), 0);
        let abc = spec(TaskKind::Anbncn, 3, 9);
        assert_eq!(abc.label("aabbcc").unwrap(), 1);
        assert_eq!(abc.label("aabbc").unwrap(), 0);
        assert_eq!(spec(TaskKind::Modadd { m: 5 }, 1, 4).label("342").unwrap(), 4);
        assert!(parity.label("12").is_err());
    }

    #[test]
    fn generated_labels_balanced_and_correct() {
        for kind in [TaskKind::Parity, TaskKind::Modadd { m: 3 }, TaskKind::Anbn, TaskKind::Anbncn] {
            let s = spec(kind.clone(), 2, 13);
            let samples = generate_samples(&s, 9, 600).unwrap();
            let classes = s.num_classes();
            for c in 0..classes {
                let count = samples.iter().filter(|x| x.label == c).count() as f64;
                let share = count / samples.len() as f64;
                assert!((share - 1.0 / classes as f64).abs() <= 0.05, "{kind:?} class {c}");
            }
            for x in &samples {
                assert!((2..=13).contains(&x.len()));
                assert_eq!(s.label(&x.tokens).unwrap(), x.label);
            }
        }
    }

    #[test]
    fn anbn_negatives_mix_near_misses_and_shuffles() {
        let s = spec(TaskKind::Anbn, 2, 20);
        let negatives: Vec<Sample> = generate_samples(&s, 3, 200).unwrap().into_iter().filter(|x| x.label == 0).collect();
        let sorted = |t: &str| t.chars().collect::<Vec<_>>().windows(2).all(|w| w[0] <= w[1]);
        let near = negatives.iter().filter(|x| sorted(&x.tokens)).count();
        assert!(near > 20 && near < 80, "{near}");
    }

    #[test]
    fn infeasible_ranges_are_config_errors() {
        assert!(generate_samples(&spec(TaskKind::Anbn, 3, 3), 0, 4).is_err());
        assert!(generate_samples(&spec(TaskKind::Parity, 0, 3), 0, 4).is_err());
        assert!(generate_samples(&spec(TaskKind::Parity, 5, 3), 0, 4).is_err());
        assert!(generate_samples(&spec(TaskKind::Modadd { m: 1 }, 1, 3), 0, 4).is_err());
        assert!(generate_samples(&spec(TaskKind::Anbncn, 4, 5), 0, 4).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_index_local() {
        let s = spec(TaskKind::Parity, 1, 30);
        let a = generate_samples(&s, 5, 50).unwrap();
        assert_eq!(a, generate_samples(&s, 5, 50).unwrap());
        assert_eq!(a[..20], generate_samples(&s, 5, 20).unwrap()[..]);
        assert_ne!(a, generate_samples(&s, 6, 50).unwrap());
    }

    #[test]
    fn encode_round_trip() {
        let vocab = spec(TaskKind::Parity, 1, 2).vocab().unwrap();
        let enc = vocab.encode("10").unwrap();
        assert_eq!(enc.len(), 3);
        assert!(enc.iter().all(|v| v.dim() == 3));
        assert_eq!(enc[0], Vector::one_hot(3, 2));
        assert_eq!(enc[1], Vector::one_hot(3, 1));
        assert_eq!(vocab.decode(&enc).unwrap(), "10");
        assert!(vocab.encode("12").is_err());
    }

    #[test]
    fn prefix_labels_line_up_with_encoding() {
        let s = spec(TaskKind::Parity, 1, 4);
        assert_eq!(s.prefix_labels("1101").unwrap(), vec![0, 1, 0, 0, 1]);
    }

    #[test]
    fn baseline_cells() {
        let wr = Mat::from_rows(&[&[0.5, -1.0], &[2.0, 0.1]]);
        let wi = Mat::from_rows(&[&[1.0, 0.0], &[-0.3, 0.7]]);
        assert_eq!(rnn_step(&wr, &wi, &Vector::zeros(2), &Vector::zeros(2)), Vector::zeros(2));
        let s = Vector::from(vec![3.0, -3.0]);
        let x = Vector::from(vec![5.0, 5.0]);
        let out = rnn_step(&wr, &wi, &s, &x);
        assert!(out.as_slice().iter().all(|a| a.abs() < 1.0));
        assert_eq!(out[0], (0.5 * 3.0 + 3.0 + 5.0f64).tanh());
        let ones = Vector::filled(2, 1.0);
        assert_eq!(ssm_cell_step(&ones, &Vector::zeros(2), &s, &x), s);
        assert_eq!(ssm_cell_step(&Vector::zeros(2), &ones, &s, &x), x);
    }

    #[test]
    fn episode_encodings() {
        let kind = |feedback| TaskKind::IclRegression { d_x: 2, d_y: 1, noise_sd: 0.0, feedback };
        let eps = generate_episodes(&spec(kind(Feedback::Synchronous), 3, 3), 1, 1).unwrap();
        let steps = eps[0].encode();
        assert_eq!(steps.len(), 4);
        assert_eq!(steps[3].as_slice()[2..], [0.0, 1.0]);
        assert_eq!(steps[0].as_slice()[3], 0.0);
        let delayed = Episode { feedback: Feedback::Delayed, ..eps[0].clone() };
        let steps = delayed.encode();
        assert_eq!(steps[0].as_slice()[2], 0.0);
        assert_eq!(steps[1].as_slice()[2], eps[0].demos[0].1[0]);
        assert_eq!(steps[3].as_slice()[2], eps[0].demos[2].1[0]);
    }

    #[test]
    fn jsonl_lines_parse() {
        let s = spec(TaskKind::Parity, 1, 5);
        let data = generate(&s, 1, 4).unwrap();
        for line in data.to_jsonl(&s).lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["tokens"].is_string() && v["label"].is_string());
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let s = spec(TaskKind::Modadd { m: 7 }, 2, 9);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<TaskSpec>(&text).unwrap(), s);
        assert!(serde_json::from_str::<TaskSpec>(r#"{"task":{"kind":"parity"},"min_len":1,"max_len":2,"extra":1}"#).is_err());
    }
}
