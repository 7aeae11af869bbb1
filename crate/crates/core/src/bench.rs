//! Wall-clock comparison of the recurrent, chunk-wise and quadratic forms.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::nosoftmax_attention;
use crate::chunkwise::{chunked_forward, layer_head_sequences, recurrent_forward, HeadSequence};
use crate::error::{config_err, FwpError, Result};
use crate::layer::{LayerConfig, SlowWeights};
use crate::rules::UpdateRule;
use crate::tensor::{Mat, Vector};

/// Largest disagreement tolerated between forms before timing.
pub const FORM_AGREEMENT_TOL: f64 = 1e-9;

pub const CSV_HEADER: &str =
    "form,rule,T,S,d_key,d_out,heads,median_ns,p10_ns,p90_ns,max_abs_diff_vs_recurrent";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Recurrent,
    Chunkwise,
    Quadratic,
}

impl Form {
    pub const ALL: [Form; 3] = [Form::Recurrent, Form::Chunkwise, Form::Quadratic];

    pub fn name(&self) -> &'static str {
        match self {
            Form::Recurrent => "recurrent",
            Form::Chunkwise => "chunkwise",
            Form::Quadratic => "quadratic",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub form: Form,
    pub rule: String,
    pub seq_len: usize,
    pub chunk: usize,
    pub d_key: usize,
    pub d_out: usize,
    pub heads: usize,
    pub median_ns: u128,
    pub p10_ns: u128,
    pub p90_ns: u128,
    pub max_abs_diff_vs_recurrent: f64,
}

impl BenchRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:e}",
            self.form.name(),
            self.rule,
            self.seq_len,
            self.chunk,
            self.d_key,
            self.d_out,
            self.heads,
            self.median_ns,
            self.p10_ns,
            self.p90_ns,
            self.max_abs_diff_vs_recurrent
        )
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv_line());
            out.push('\n');
        }
        out
    }

    fn median(&self, form: Form, seq_len: usize, chunk: usize) -> Option<u128> {
        self.rows
            .iter()
            .find(|r| r.form == form && r.seq_len == seq_len && r.chunk == chunk)
            .map(|r| r.median_ns)
    }

    /// Recurrent median over chunk-wise median; above 1 means chunking is faster.
    pub fn chunk_speedup(&self, seq_len: usize, chunk: usize) -> Option<f64> {
        let rec = self.median(Form::Recurrent, seq_len, chunk)?;
        let chk = self.median(Form::Chunkwise, seq_len, chunk)?;
        Some(rec as f64 / chk.max(1) as f64)
    }

    pub fn extend(&mut self, other: BenchReport) {
        self.rows.extend(other.rows);
    }
}

fn percentile(sorted: &[u128], p: f64) -> u128 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

fn time_runs<F: FnMut() -> Result<Mat>>(repetitions: usize, mut run: F) -> Result<(Vec<u128>, Mat)> {
    let mut times = Vec::with_capacity(repetitions);
    let mut last = run()?;
    for _ in 0..repetitions {
        let start = Instant::now();
        last = std::hint::black_box(run()?);
        times.push(start.elapsed().as_nanos());
    }
    times.sort_unstable();
    Ok((times, last))
}

fn stack_heads(per_head: Vec<Mat>) -> Mat {
    let cols = per_head.first().map_or(0, Mat::cols);
    let rows: usize = per_head.iter().map(Mat::rows).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut offset = 0;
    for m in per_head {
        for r in 0..m.rows() {
            for c in 0..cols {
                out.set(offset + r, c, m.get(r, c));
            }
        }
        offset += m.rows();
    }
    out
}

fn run_form(cfg: &LayerConfig, heads: &[HeadSequence], form: Form, chunk: usize) -> Result<Mat> {
    let w0 = Mat::zeros(cfg.head_out(), cfg.head_key());
    let mut outs = Vec::with_capacity(heads.len());
    for hs in heads {
        let y = match form {
            Form::Recurrent => recurrent_forward(&cfg.rule, &hs.q_feat, &hs.steps, &w0)?.0,
            Form::Chunkwise => chunked_forward(&cfg.rule, &hs.q_feat, &hs.steps, &w0, chunk)?.0,
            Form::Quadratic if cfg.rule == UpdateRule::Additive => {
                let k = Mat::from_columns(&hs.steps.iter().map(|s| s.k_feat.clone()).collect::<Vec<_>>());
                let v = Mat::from_columns(&hs.steps.iter().map(|s| s.v.clone()).collect::<Vec<_>>());
                nosoftmax_attention(&hs.q_feat, &k, &v)?
            }
            Form::Quadratic => chunked_forward(&cfg.rule, &hs.q_feat, &hs.steps, &w0, hs.steps.len().max(1))?.0,
        };
        outs.push(y);
    }
    Ok(stack_heads(outs))
}

/// Times every execution form on one random input of length `seq_len`.
///
/// All forms are run once and compared against the recurrent output before
/// any timing; a disagreement above [`FORM_AGREEMENT_TOL`] is an error.
pub fn bench_forms(cfg: &LayerConfig, seq_len: usize, chunk: usize, repetitions: usize, seed: u64) -> Result<BenchReport> {
    bench_selected_forms(cfg, &Form::ALL, seq_len, chunk, repetitions, seed)
}

/// [`bench_forms`] restricted to `forms`; the recurrent reference is always run.
pub fn bench_selected_forms(
    cfg: &LayerConfig,
    forms: &[Form],
    seq_len: usize,
    chunk: usize,
    repetitions: usize,
    seed: u64,
) -> Result<BenchReport> {
    if !(cfg.rule.is_decay_family() || cfg.rule == UpdateRule::Additive) || cfg.normalized {
        return Err(FwpError::UnsupportedRule(cfg.rule.name().to_string()));
    }
    if seq_len == 0 || repetitions == 0 {
        return Err(config_err("bench needs T ≥ 1 and at least one repetition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slow = SlowWeights::init(cfg, &mut rng);
    let xs: Vec<Vector> = (0..seq_len).map(|_| Vector::uniform(cfg.d_in, 1.0, &mut rng)).collect();
    let heads = layer_head_sequences(cfg, &slow, &xs)?;

    let reference = run_form(cfg, &heads, Form::Recurrent, chunk)?;
    let mut selected = vec![Form::Recurrent];
    selected.extend(forms.iter().copied().filter(|&f| f != Form::Recurrent));
    let forms = selected;
    let mut diffs = Vec::with_capacity(forms.len());
    for &form in &forms {
        let diff = run_form(cfg, &heads, form, chunk)?.max_abs_diff(&reference);
        if !(diff <= FORM_AGREEMENT_TOL) {
            return Err(FwpError::Numeric {
                step: seq_len,
                what: format!("{} form differs from recurrent by {diff:e}", form.name()),
            });
        }
        diffs.push(diff);
    }

    let mut report = BenchReport::default();
    for (form, diff) in forms.into_iter().zip(diffs) {
        let (times, _) = time_runs(repetitions, || run_form(cfg, &heads, form, chunk))?;
        report.rows.push(BenchRow {
            form,
            rule: cfg.rule.to_string(),
            seq_len,
            chunk,
            d_key: cfg.d_key,
            d_out: cfg.d_out,
            heads: cfg.heads,
            median_ns: percentile(&times, 0.5),
            p10_ns: percentile(&times, 0.1),
            p90_ns: percentile(&times, 0.9),
            max_abs_diff_vs_recurrent: diff,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::PhiMap;

    #[test]
    fn one_row_per_form() {
        let cfg = LayerConfig::new(8, 8, 8, 2, UpdateRule::Additive, PhiMap::Identity);
        let report = bench_forms(&cfg, 20, 4, 3, 1).unwrap();
        assert_eq!(report.rows.len(), 3);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        for line in csv.lines().skip(1) {
            assert_eq!(line.split(',').count(), 11);
        }
        assert!(report.chunk_speedup(20, 4).is_some());
    }

    #[test]
    fn decay_rule_forms_agree() {
        let cfg = LayerConfig::new(6, 4, 4, 1, UpdateRule::Gla, PhiMap::SiluL2norm);
        let report = bench_forms(&cfg, 17, 5, 1, 2).unwrap();
        assert!(report.rows.iter().all(|r| r.max_abs_diff_vs_recurrent <= FORM_AGREEMENT_TOL));
    }

    #[test]
    fn delta_rule_is_rejected() {
        let cfg = LayerConfig::new(4, 4, 4, 1, UpdateRule::Delta, PhiMap::Identity);
        assert!(matches!(bench_forms(&cfg, 4, 2, 1, 0), Err(FwpError::UnsupportedRule(_))));
    }
}
