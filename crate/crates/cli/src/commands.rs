use std::path::PathBuf;

use fwplab::autodiff::{gradcheck_suite, metrics_csv, model_for_task};
use fwplab::bench::{bench_selected_forms, BenchReport, Form};
use fwplab::constructions::{build_gd_fwp, build_parity_machine, gd_oracle, run_gd_fwp, ParityClass};
use fwplab::equiv::{run_equiv, Pair};
use fwplab::layer::{LayerConfig, PhiMap};
use fwplab::rng::{item_seed, split_seed};
use fwplab::tasks::generate;
use fwplab::{Mat, Vector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::config::{
    self, BenchConfig, Construction, ConstructConfig, DatagenConfig, EquivConfig, GdSettings, GradcheckConfig,
    ParitySettings, TrainRunConfig,
};
use crate::output::{to_json, write_atomic};
use crate::CliError;

pub struct Invocation {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl Invocation {
    fn load<T: DeserializeOwned + Default>(&self) -> Result<T, CliError> {
        match &self.config {
            None => Ok(T::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                config::parse(&text)
            }
        }
    }

    fn seed(&self, from_config: u64) -> u64 {
        self.seed.unwrap_or(from_config)
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn equiv(inv: &Invocation) -> Result<(), CliError> {
    let cfg: EquivConfig = inv.load()?;
    let lookup = |name: &str| Pair::from_name(name).ok_or_else(|| CliError::Config(format!("unknown pair `{name}`")));
    let pairs = if cfg.pairs.is_empty() {
        Pair::ALL.to_vec()
    } else {
        cfg.pairs.iter().map(|n| lookup(n)).collect::<Result<_, _>>()?
    };
    let fault = cfg.fault.as_deref().map(lookup).transpose()?;
    if cfg.seeds == 0 {
        return Err(CliError::Config("seeds must be positive".into()));
    }
    let report = run_equiv(&pairs, split_seed(inv.seed(cfg.seed), "equiv"), cfg.seeds, fault)?;
    write_atomic(&inv.out, "equiv_report.json", &to_json(&report)?)?;
    for p in &report.pairs {
        println!(
            "{} {} max_diff={:e} threshold={:e} worst_seed={}",
            verdict(p.passed),
            p.pair,
            p.max_diff,
            p.threshold,
            p.worst_seed
        );
    }
    if report.passed {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|p| p.pair.as_str()).collect();
        Err(CliError::Threshold(format!("pairs over threshold: {}", names.join(", "))))
    }
}

pub fn gradcheck(inv: &Invocation) -> Result<(), CliError> {
    let cfg: GradcheckConfig = inv.load()?;
    if !(cfg.eps > 0.0) {
        return Err(CliError::Config("eps must be positive".into()));
    }
    let base = split_seed(inv.seed(cfg.seed), "gradcheck");
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| item_seed(base, i)).collect();
    let results = gradcheck_suite(cfg.width, cfg.heads, cfg.seq_len, &seeds, cfg.eps)?;
    let mut csv = String::from("subject,seed,max_rel_error,entries_checked,passed\n");
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.max_rel_error < cfg.threshold;
        csv.push_str(&format!("{},{},{},{},{}\n", r.subject, r.seed, r.max_rel_error, r.entries_checked, ok));
        println!("{} {} seed={} max_rel_error={:e}", verdict(ok), r.subject, r.seed, r.max_rel_error);
        if !ok {
            failed.push(r.subject.clone());
        }
    }
    write_atomic(&inv.out, "gradcheck.csv", &csv)?;
    if failed.is_empty() {
        Ok(())
    } else {
        failed.dedup();
        Err(CliError::Threshold(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn construct(inv: &Invocation, which: Option<&str>) -> Result<(), CliError> {
    let cfg: ConstructConfig = inv.load()?;
    let construction = match which {
        None => cfg.construction,
        Some("gd") => Construction::Gd,
        Some("parity") => Construction::Parity,
        Some(other) => return Err(CliError::Config(format!("unknown construction `{other}`"))),
    };
    let seed = inv.seed(cfg.seed);
    match construction {
        Construction::Gd => construct_gd(inv, &cfg.gd, seed),
        Construction::Parity => construct_parity(inv, &cfg.parity),
    }
}

fn construct_gd(inv: &Invocation, s: &GdSettings, seed: u64) -> Result<(), CliError> {
    if s.d_x == 0 || s.d_y == 0 || s.problems == 0 {
        return Err(CliError::Config("d_x, d_y and problems must be positive".into()));
    }
    let base = split_seed(seed, "construct_gd");
    let mut max_pred = 0.0f64;
    let mut max_trace = 0.0f64;
    let mut max_gap = 0.0f64;
    for p in 0..s.problems as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(base, p));
        let w0 = Mat::uniform(s.d_y, s.d_x, s.w0_scale, &mut rng);
        let hidden = Mat::uniform(s.d_y, s.d_x, 1.0, &mut rng);
        let demos: Vec<(Vector, Vector)> = (0..s.demos)
            .map(|_| {
                let z = Vector::uniform(s.d_x, 1.0, &mut rng);
                let y = hidden.matvec(&z);
                (z, y)
            })
            .collect();
        let query = Vector::uniform(s.d_x, 1.0, &mut rng);
        let c = build_gd_fwp(s.d_x, s.d_y, &w0)?;
        let run = run_gd_fwp(&c, &demos, &query)?;
        let expected = gd_oracle(&demos, &w0, 1.0).matvec(&query);
        max_pred = max_pred.max(run.prediction.max_abs_diff(&expected));
        for (t, block) in run.trace.iter().enumerate() {
            let delta = gd_oracle(&demos[..=t], &w0, 1.0).scale(-1.0);
            max_trace = max_trace.max(block.max_abs_diff(&delta));
        }
        max_gap = max_gap.max(run.approx_gap);
    }
    let ok = max_pred < s.threshold && max_trace < s.threshold;
    let summary = json!({
        "construction": "gd",
        "problems": s.problems,
        "max_deviation": max_pred,
        "max_trace_deviation": max_trace,
        "max_approx_gap": max_gap,
        "threshold": s.threshold,
        "passed": ok,
    });
    write_atomic(&inv.out, "construct_gd.json", &to_json(&summary)?)?;
    println!("max deviation {max_pred:e}");
    println!("max trace deviation {max_trace:e}");
    println!("zero-target query gap {max_gap:e} (reported only)");
    println!("{}", verdict(ok));
    if ok {
        Ok(())
    } else {
        Err(CliError::Threshold(format!("gd construction deviates by {max_pred:e}")))
    }
}

fn construct_parity(inv: &Invocation, s: &ParitySettings) -> Result<(), CliError> {
    if s.max_len == 0 || s.max_len > 24 {
        return Err(CliError::Config("parity max_len must be in 1..=24".into()));
    }
    let machine = build_parity_machine();
    let mut total = 0usize;
    let mut agree = 0usize;
    for len in 1..=s.max_len {
        for bits in 0u32..(1 << len) {
            let text: String = (0..len).map(|i| if bits >> i & 1 == 1 { '1' } else { '0' }).collect();
            let odd = bits.count_ones() % 2 == 1;
            let got = machine.classify(&text)? == ParityClass::Odd;
            total += 1;
            agree += usize::from(got == odd);
        }
    }
    let ok = agree == total;
    let summary = json!({ "construction": "parity", "max_len": s.max_len, "total": total, "agree": agree, "passed": ok });
    write_atomic(&inv.out, "construct_parity.json", &to_json(&summary)?)?;
    println!("agreement {agree}/{total}");
    println!("{}", verdict(ok));
    if ok {
        Ok(())
    } else {
        Err(CliError::Threshold(format!("parity machine disagrees on {} strings", total - agree)))
    }
}

pub fn train(inv: &Invocation) -> Result<(), CliError> {
    let cfg: TrainRunConfig = inv.load()?;
    let seed = inv.seed(cfg.seed);
    let model = model_for_task(&cfg.task, cfg.model.d_model, cfg.model.blocks, cfg.model.mixer.clone())?;
    let outcome = fwplab::autodiff::train(&cfg.task, &model, &cfg.train, seed)?;
    write_atomic(&inv.out, "metrics.csv", &metrics_csv(&outcome.metrics))?;
    write_atomic(&inv.out, "checkpoint.json", &outcome.checkpoint.to_json()?)?;
    let final_eval = outcome.final_eval();
    write_atomic(&inv.out, "summary.json", &to_json(&json!({ "seed": seed, "final_eval": final_eval }))?)?;
    for r in final_eval {
        match r.accuracy {
            Some(a) => println!("eval len<={} loss={:.4} accuracy={a:.4}", r.seq_len_bucket.unwrap_or(0), r.loss),
            None => println!("eval loss={:.6}", r.loss),
        }
    }
    Ok(())
}

pub fn bench(inv: &Invocation) -> Result<(), CliError> {
    let cfg: BenchConfig = inv.load()?;
    let seed = split_seed(inv.seed(cfg.seed), "bench");
    let mut report = BenchReport::default();
    for rule in &cfg.rules {
        let layer = LayerConfig::new(cfg.d_key, cfg.d_key, cfg.d_out, cfg.heads, *rule, PhiMap::SiluL2norm);
        layer.validate()?;
        for &t in &cfg.seq_lens {
            for &s in &cfg.chunks {
                let forms: Vec<Form> = Form::ALL
                    .into_iter()
                    .filter(|&f| f != Form::Quadratic || t <= cfg.quadratic_max_len)
                    .collect();
                let part = bench_selected_forms(&layer, &forms, t, s, cfg.repetitions, seed)?;
                if let Some(ratio) = part.chunk_speedup(t, s) {
                    println!("{rule} T={t} S={s} chunkwise speedup over recurrent: {ratio:.2}x");
                }
                report.extend(part);
            }
        }
    }
    write_atomic(&inv.out, "bench.csv", &report.to_csv())?;
    Ok(())
}

pub fn datagen(inv: &Invocation) -> Result<(), CliError> {
    let cfg: DatagenConfig = inv.load()?;
    let data = generate(&cfg.task, split_seed(inv.seed(cfg.seed), "datagen"), cfg.samples)?;
    let path = write_atomic(&inv.out, "dataset.jsonl", &data.to_jsonl(&cfg.task))?;
    println!("wrote {} items to {}", data.len(), path.display());
    Ok(())
}
