//! Hand-set weights whose behaviour is known in closed form.

use crate::error::{FwpError, Result};
use crate::layer::{step, step_with_eta, FastState, LayerConfig, PhiMap, SlowWeights};
use crate::rules::{apply_rule, StepInputs, UpdateRule};
use crate::tasks::{Classifier, Episode, EpisodePredictor};
use crate::tensor::{Mat, Vector};

/// A single-head additive FWP whose query readout equals one gradient-descent
/// step (learning rate 1) on the squared error of the demonstrations, taken
/// from the linear model `W0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GdConstruction {
    pub d_x: usize,
    pub d_y: usize,
    pub w0: Mat,
    pub cfg: LayerConfig,
    pub slow: SlowWeights,
    /// `d_y × (d_x + d_y)`: `[0 | −I]`
    pub readout: Mat,
}

/// Wq = Wk = [[I, 0], [0, 0]], Wv = [[0, 0], [W0, −I]].
pub fn build_gd_fwp(d_x: usize, d_y: usize, w0: &Mat) -> Result<GdConstruction> {
    if d_x == 0 || d_y == 0 || w0.shape() != (d_y, d_x) {
        return Err(FwpError::Shape(format!(
            "W0 is {:?}, expected {d_y}x{d_x} with both dims positive",
            w0.shape()
        )));
    }
    if !w0.is_finite() {
        return Err(FwpError::Input("W0 has non-finite entries".into()));
    }
    let d = d_x + d_y;
    let cfg = LayerConfig::new(d, d, d, 1, UpdateRule::Additive, PhiMap::Identity);
    let select = Mat::from_fn(d, d, |r, c| if r == c && r < d_x { 1.0 } else { 0.0 });
    let wv = Mat::from_fn(d, d, |r, c| {
        if r < d_x {
            0.0
        } else if c < d_x {
            w0.get(r - d_x, c)
        } else if r == c {
            -1.0
        } else {
            0.0
        }
    });
    let slow = SlowWeights {
        wq: select.clone(),
        wk: select,
        wv,
        w_b: None,
        w_lam: None,
        wa: None,
        wo: None,
    };
    let readout = Mat::from_fn(d_y, d, |r, c| if c == d_x + r { -1.0 } else { 0.0 });
    Ok(GdConstruction {
        d_x,
        d_y,
        w0: w0.clone(),
        cfg,
        slow,
        readout,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdRun {
    /// `readout · y*`
    pub prediction: Vector,
    /// Lower-left `d_y × d_x` block of the fast weight after each demonstration.
    pub trace: Vec<Mat>,
    /// Max-abs gap between the exact prediction and the one obtained when the
    /// query's target slot is left at zero instead of `W0 z*`.
    pub approx_gap: f64,
}

impl GdConstruction {
    fn check(&self, z: &Vector, y: Option<&Vector>) -> Result<()> {
        if z.dim() != self.d_x || y.is_some_and(|y| y.dim() != self.d_y) {
            return Err(FwpError::Shape(format!(
                "demo or query dims do not match d_x={} d_y={}",
                self.d_x, self.d_y
            )));
        }
        Ok(())
    }

    fn lower_left(&self, state: &FastState) -> Mat {
        let w = &state.heads[0].w;
        Mat::from_fn(self.d_y, self.d_x, |r, c| w.get(self.d_x + r, c))
    }
}

/// Feeds `[z; f(z)]` for every demonstration, then `[z*; W0 z*]`.
pub fn run_gd_fwp(c: &GdConstruction, demos: &[(Vector, Vector)], query: &Vector) -> Result<GdRun> {
    c.check(query, None)?;
    let mut state = FastState::zeros(&c.cfg);
    let mut trace = Vec::with_capacity(demos.len());
    for (z, fz) in demos {
        c.check(z, Some(fz))?;
        let x = Vector::concat(&[z.clone(), fz.clone()]);
        state = step(&c.cfg, &c.slow, &state, &x)?.0;
        trace.push(c.lower_left(&state));
    }
    let exact_x = Vector::concat(&[query.clone(), c.w0.matvec(query)]);
    let (_, y) = step(&c.cfg, &c.slow, &state, &exact_x)?;
    let prediction = c.readout.matvec(&y);
    let plain_x = Vector::concat(&[query.clone(), Vector::zeros(c.d_y)]);
    let (_, y_plain) = step(&c.cfg, &c.slow, &state, &plain_x)?;
    let approx_gap = c.readout.matvec(&y_plain).max_abs_diff(&prediction);
    Ok(GdRun {
        prediction,
        trace,
        approx_gap,
    })
}

/// `ΔW = lr · Σ_t (f(z_t) − W0 z_t) ⊗ z_t`, evaluated entry by entry.
pub fn gd_oracle(demos: &[(Vector, Vector)], w0: &Mat, lr: f64) -> Mat {
    let (d_y, d_x) = w0.shape();
    let mut delta = Mat::zeros(d_y, d_x);
    for (z, fz) in demos {
        for r in 0..d_y {
            let mut pred = 0.0;
            for c in 0..d_x {
                pred += w0.get(r, c) * z[c];
            }
            let err = fz[r] - pred;
            for c in 0..d_x {
                delta.set(r, c, delta.get(r, c) + lr * err * z[c]);
            }
        }
    }
    delta
}

impl EpisodePredictor for GdConstruction {
    fn predict(&self, episode: &Episode) -> Result<Vector> {
        Ok(run_gd_fwp(self, &episode.demos, &episode.query)?.prediction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParityClass {
    Even,
    Odd,
}

/// Scalar DeltaNet with `k = q = v = 1`. A '1' sets `η = 2`, flipping the
/// state `W ← −W + 2`; a '0' sets `η = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParityMachine {
    pub cfg: LayerConfig,
    pub slow: SlowWeights,
}

/// States above this read out as odd.
pub const PARITY_THRESHOLD: f64 = 1.0;

pub fn build_parity_machine() -> ParityMachine {
    let one = Mat::from_vec(1, 1, vec![1.0]);
    ParityMachine {
        cfg: LayerConfig::new(1, 1, 1, 1, UpdateRule::Delta, PhiMap::Identity),
        slow: SlowWeights {
            wq: one.clone(),
            wk: one.clone(),
            wv: one,
            // unused: learning rates are injected per token
            w_b: Some(Mat::zeros(1, 1)),
            w_lam: None,
            wa: None,
            wo: None,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParityRun {
    pub class: ParityClass,
    /// Fast weight after each token.
    pub states: Vec<f64>,
}

impl ParityMachine {
    pub fn run(&self, bits: &str) -> Result<ParityRun> {
        let x = Vector::filled(1, 1.0);
        let mut state = FastState::zeros(&self.cfg);
        let mut readout = 0.0;
        let mut states = Vec::with_capacity(bits.len());
        for (i, b) in bits.chars().enumerate() {
            let eta = match b {
                '1' => 2.0,
                '0' => 0.0,
                other => return Err(FwpError::Input(format!("non-binary token `{other}` at position {i}"))),
            };
            let (next, y) = step_with_eta(&self.cfg, &self.slow, &state, &x, &[vec![eta]])?;
            state = next;
            readout = y[0];
            states.push(state.heads[0].w.get(0, 0));
        }
        let class = if readout > PARITY_THRESHOLD { ParityClass::Odd } else { ParityClass::Even };
        Ok(ParityRun { class, states })
    }

    pub fn classify(&self, bits: &str) -> Result<ParityClass> {
        Ok(self.run(bits)?.class)
    }
}

impl Classifier for ParityMachine {
    fn classify(&self, tokens: &str) -> Result<usize> {
        Ok(match ParityMachine::classify(self, tokens)? {
            ParityClass::Even => 0,
            ParityClass::Odd => 1,
        })
    }
}

/// Writes every `(key, value)` pair `repeats` times in order, then reads each
/// key back. `eta` is used by rules that take a learning rate.
pub fn memory_write_read_demo(
    keys: &[Vector],
    values: &[Vector],
    rule: &UpdateRule,
    eta: f64,
    repeats: usize,
) -> Result<Vec<Vector>> {
    if keys.len() != values.len() || keys.is_empty() {
        return Err(FwpError::Shape(format!("{} keys for {} values", keys.len(), values.len())));
    }
    let mut w = Mat::zeros(values[0].dim(), keys[0].dim());
    for _ in 0..repeats {
        for (k, v) in keys.iter().zip(values) {
            let inputs = StepInputs::new(k.clone(), v.clone()).with_eta(eta);
            w = apply_rule(rule, &w, &inputs)?;
        }
    }
    Ok(keys.iter().map(|k| w.matvec(k)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_demos(rng: &mut ChaCha8Rng, t: usize, d_x: usize, d_y: usize) -> Vec<(Vector, Vector)> {
        (0..t)
            .map(|_| (Vector::uniform(d_x, 1.0, rng), Vector::uniform(d_y, 1.0, rng)))
            .collect()
    }

    #[test]
    fn block_form_scalar_case() {
        let c = build_gd_fwp(1, 1, &Mat::from_vec(1, 1, vec![0.1])).unwrap();
        assert_eq!(c.slow.wv, Mat::from_rows(&[&[0.0, 0.0], &[0.1, -1.0]]));
        assert_eq!(c.slow.wq, Mat::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
        assert_eq!(c.slow.wk, c.slow.wq);
        assert_eq!(c.readout, Mat::from_rows(&[&[0.0, -1.0]]));
    }

    #[test]
    fn projections_of_a_demo() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w0 = Mat::uniform(2, 3, 0.5, &mut rng);
        let c = build_gd_fwp(3, 2, &w0).unwrap();
        let z = Vector::uniform(3, 1.0, &mut rng);
        let f = Vector::uniform(2, 1.0, &mut rng);
        let x = Vector::concat(&[z.clone(), f.clone()]);
        let q = c.slow.wq.matvec(&x);
        let v = c.slow.wv.matvec(&x);
        assert_eq!(q, Vector::concat(&[z.clone(), Vector::zeros(2)]));
        assert_eq!(c.slow.wk.matvec(&x), q);
        let expect_v = Vector::concat(&[Vector::zeros(3), w0.matvec(&z).sub(&f)]);
        assert!(v.max_abs_diff(&expect_v) < 1e-15);
        let zero = build_gd_fwp(3, 2, &Mat::zeros(2, 3)).unwrap();
        assert_eq!(zero.slow.wv.matvec(&x), Vector::concat(&[Vector::zeros(3), f.scale(-1.0)]));
    }

    #[test]
    fn prediction_is_one_gd_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w0 = Mat::uniform(2, 3, 0.5, &mut rng);
        let c = build_gd_fwp(3, 2, &w0).unwrap();
        let demos = random_demos(&mut rng, 8, 3, 2);
        let query = Vector::uniform(3, 1.0, &mut rng);
        let run = run_gd_fwp(&c, &demos, &query).unwrap();
        let expected = gd_oracle(&demos, &w0, 1.0).matvec(&query);
        assert!(run.prediction.max_abs_diff(&expected) < 1e-10);
        assert!(run.approx_gap > 0.0);
    }

    #[test]
    fn trace_is_negative_accumulated_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = Mat::uniform(1, 2, 0.5, &mut rng);
        let c = build_gd_fwp(2, 1, &w0).unwrap();
        let demos = random_demos(&mut rng, 5, 2, 1);
        let run = run_gd_fwp(&c, &demos, &Vector::uniform(2, 1.0, &mut rng)).unwrap();
        for (t, block) in run.trace.iter().enumerate() {
            let expected = gd_oracle(&demos[..=t], &w0, 1.0).scale(-1.0);
            assert!(block.max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn no_demos_and_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w0 = Mat::uniform(2, 2, 0.5, &mut rng);
        let c = build_gd_fwp(2, 2, &w0).unwrap();
        let q = Vector::uniform(2, 1.0, &mut rng);
        assert_eq!(run_gd_fwp(&c, &[], &q).unwrap().prediction, Vector::zeros(2));
        let demos = random_demos(&mut rng, 4, 2, 2);
        let doubled: Vec<_> = demos.iter().chain(&demos).cloned().collect();
        let once = run_gd_fwp(&c, &demos, &q).unwrap().prediction;
        let twice = run_gd_fwp(&c, &doubled, &q).unwrap().prediction;
        assert!(twice.max_abs_diff(&once.scale(2.0)) < 1e-12);
    }

    #[test]
    fn oracle_edge_cases() {
        let w0 = Mat::from_rows(&[&[1.0, 2.0]]);
        let z = Vector::from(vec![0.5, -1.0]);
        let fitted = vec![(z.clone(), w0.matvec(&z))];
        assert_eq!(gd_oracle(&fitted, &w0, 1.0), Mat::zeros(1, 2));
        let demo = vec![(z.clone(), Vector::from(vec![3.0]))];
        // f − W0 z = 3 − (0.5 − 2) = 4.5
        assert_eq!(gd_oracle(&demo, &w0, 1.0), Mat::from_rows(&[&[2.25, -4.5]]));
        assert_eq!(gd_oracle(&demo, &w0, 0.5), Mat::from_rows(&[&[1.125, -2.25]]));
    }

    #[test]
    fn parity_examples() {
        let m = build_parity_machine();
        assert_eq!(m.classify("").unwrap(), ParityClass::Even);
        assert_eq!(m.classify("1101").unwrap(), ParityClass::Odd);
        assert_eq!(m.run("1101").unwrap().states, vec![2.0, 0.0, 0.0, 2.0]);
        assert!(matches!(m.classify("10a"), Err(FwpError::Input(_))));
    }

    #[test]
    fn parity_random_long_strings() {
        let m = build_parity_machine();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let bits: String = (0..200).map(|_| if rng.gen_bool(0.5) { '1' } else { '0' }).collect();
            let run = m.run(&bits).unwrap();
            assert!(run.states.iter().all(|&w| w == 0.0 || w == 2.0));
            let odd = bits.chars().filter(|&c| c == '1').count() % 2 == 1;
            assert_eq!(run.class == ParityClass::Odd, odd);
        }
    }

    #[test]
    fn memory_demo() {
        let keys = vec![Vector::one_hot(3, 0), Vector::one_hot(3, 1)];
        let values = vec![Vector::from(vec![1.0, -2.0]), Vector::from(vec![0.5, 4.0])];
        let once = memory_write_read_demo(&keys, &values, &UpdateRule::Additive, 1.0, 1).unwrap();
        assert_eq!(once, values);
        let twice = memory_write_read_demo(&keys, &values, &UpdateRule::Additive, 1.0, 2).unwrap();
        assert_eq!(twice[0], values[0].scale(2.0));
        let delta = memory_write_read_demo(&keys, &values, &UpdateRule::Delta, 1.0, 2).unwrap();
        for (r, v) in delta.iter().zip(&values) {
            assert!(r.max_abs_diff(v) < 1e-12);
        }
    }
}
