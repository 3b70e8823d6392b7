//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The decoupling criteria pretrain 4 variants plus an untrained baseline on
//! 3 seeds for the full default schedule, so this target takes a while.
//! `HDC_ACCEPT_STEPS` shortens that schedule for a smoke run; the verdict
//! lines then say so and do not count as an acceptance pass.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use hdc::Result;
use hdc::config::RunConfig;
use hdc::dataset::generate_videos;
use hdc::encoder::{EncoderConfig, Params, init_params};
use hdc::evaluator::{AblationReport, GridRow, LabelMode, mean_sd, run_ablation_grid};
use hdc::seeding::{derive_seed, stream};
use hdc::trainer::{TrainOutputs, checkpoint_path, pretrain};
use hdc::verify::{
    gradcheck_suite, info_nce_oracle_gap, pooling_law, retrieval_against_oracle,
    uniform_similarity_gaps, weight_scaling_gaps,
};

struct Verdict {
    id: u32,
    passed: bool,
    detail: String,
}

fn verdict(id: u32, passed: bool, detail: String) -> Verdict {
    Verdict { id, passed, detail }
}

fn gradient_fidelity() -> Result<Verdict> {
    let start = Instant::now();
    let reports = gradcheck_suite()?;
    let secs = start.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .map(|r| r.max_rel_error())
        .fold(0.0, f64::max);
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.label.as_str())
        .collect();
    Ok(verdict(
        1,
        failed.is_empty() && secs < 60.0,
        format!(
            "{} checks, worst rel err {worst:.2e}, {secs:.1}s, failed {failed:?}",
            reports.len()
        ),
    ))
}

fn loss_oracle() -> Result<Verdict> {
    let gap = info_nce_oracle_gap(1000, 2)?;
    Ok(verdict(
        2,
        gap <= 1e-10,
        format!("1000 instances, max |diff| {gap:.2e}"),
    ))
}

fn analytic_anchors() -> Result<Verdict> {
    let uniform = uniform_similarity_gaps(&[2, 4, 8])?
        .iter()
        .map(|g| g.1)
        .fold(0.0, f64::max);
    let linear = weight_scaling_gaps(&[0.0, 0.5, 2.0, 7.0])?
        .iter()
        .map(|g| g.1)
        .fold(0.0, f64::max);

    let mut cfg = RunConfig::default();
    cfg.trainer.steps = 5;
    cfg.loss.alphas.values_mut().for_each(|a| *a = 0.0);
    cfg.loss.betas.values_mut().for_each(|b| *b = 0.0);
    let videos = generate_videos(&cfg.dataset, cfg.seed)?;
    let init: Params<f32> = init_params(&cfg.encoder, derive_seed(&[cfg.seed, stream::INIT]))?;
    let run = pretrain(&cfg, &videos, &TrainOutputs::default(), None)?;
    let zero_total = run.log.iter().all(|r| r.losses.total == 0.0);
    let unchanged = run.params == init && run.state.velocity.is_empty();

    Ok(verdict(
        3,
        uniform <= 1e-6 && linear <= 1e-12 && zero_total && unchanged,
        format!(
            "B ln B gap {uniform:.2e}, scaling gap {linear:.2e}, zero-weight total 0: {zero_total}, params unchanged: {unchanged}"
        ),
    ))
}

fn shape_law() -> Result<Verdict> {
    let (counts, gap) = pooling_law(&EncoderConfig::default(), [8, 32, 32], 0)?;
    let n: Vec<usize> = counts.iter().map(|c| c.1).collect();
    let matches_time = counts.iter().all(|(_, n, t)| n == t);
    Ok(verdict(
        4,
        n == [2, 1, 1] && matches_time && gap <= 1e-6,
        format!("N_3,N_4,N_5 = {n:?}, pooling gap {gap:.2e}"),
    ))
}

fn determinism() -> Result<Verdict> {
    let dir = std::env::temp_dir().join(format!("hdc-accept-{}", std::process::id()));
    fs::create_dir_all(&dir).map_err(|e| hdc::HdcError::io(&dir, e))?;
    let mut cfg = RunConfig::default();
    cfg.trainer.steps = 100;
    cfg.trainer.checkpoint_every = 50;
    let videos = generate_videos(&cfg.dataset, cfg.seed)?;
    let mut csv = Vec::new();
    let mut finals = Vec::new();
    for run in ["a", "b"] {
        let outputs = TrainOutputs {
            metrics: Some(dir.join(format!("{run}.csv"))),
            checkpoint_dir: Some(dir.join(run)),
        };
        fs::create_dir_all(dir.join(run)).map_err(|e| hdc::HdcError::io(&dir, e))?;
        let r = pretrain(&cfg, &videos, &outputs, None)?;
        csv.push(fs::read(dir.join(format!("{run}.csv"))).map_err(|e| hdc::HdcError::io(&dir, e))?);
        finals.push(r.params);
    }
    let identical = csv[0] == csv[1] && finals[0] == finals[1];

    let mid = hdc::checkpoint::load_checkpoint::<f32>(&checkpoint_path(&dir.join("a"), 50))?;
    let resumed = pretrain(&cfg, &videos, &TrainOutputs::default(), Some(mid))?;
    let resume_ok = resumed.params == finals[0];
    let _ = fs::remove_dir_all(&dir);
    Ok(verdict(
        5,
        identical && resume_ok,
        format!(
            "100-step metrics byte-identical: {identical}, resume at 50 equals uninterrupted: {resume_ok}"
        ),
    ))
}

fn variant_rows() -> Vec<(&'static str, GridRow)> {
    vec![
        ("untrained", GridRow::new(&[3, 4, 5], &[3, 4, 5], &[0.0; 3], &[0.0; 3])),
        ("SC only", GridRow::new(&[5], &[], &[1.0], &[])),
        ("TC only", GridRow::new(&[], &[5], &[], &[1.0])),
        ("SC+TC", GridRow::new(&[5], &[5], &[1.0], &[1.0])),
        (
            "full",
            GridRow::new(&[3, 4, 5], &[3, 4, 5], &[0.25, 0.5, 1.0], &[0.25, 0.5, 1.0]),
        ),
    ]
}

fn decoupling(report: &AblationReport, names: &[&str], secs: f64, note: &str) -> [Verdict; 2] {
    let mean = |row: usize, mode: LabelMode| mean_sd(&report.top1(row, mode)).0;
    let comp: Vec<f64> = (0..names.len()).map(|r| mean(r, LabelMode::Composite)).collect();
    let (base, sc, tc, sctc, full) = (comp[0], comp[1], comp[2], comp[3], comp[4]);
    let beats = comp[1..].iter().all(|c| c - base >= 10.0);
    let joint = sctc >= sc.max(tc) - 2.0;
    let hier = full >= sctc - 2.0;
    let in_budget = secs <= 45.0 * 60.0;
    let table: Vec<String> = names
        .iter()
        .zip(&comp)
        .map(|(n, c)| format!("{n} {c:.1}"))
        .collect();
    let six = verdict(
        6,
        beats && joint && hier && in_budget && note.is_empty(),
        format!(
            "composite top-1 % [{}]; (a) +10 over untrained: {beats}, (b) SC+TC vs best single: {joint}, (c) full vs SC+TC: {hier}; {:.1} min (budget 45): {in_budget}{note}",
            table.join(", "),
            secs / 60.0
        ),
    );
    let (sc_app, sc_mot) = (mean(1, LabelMode::Appearance), mean(1, LabelMode::Motion));
    let (tc_app, tc_mot) = (mean(2, LabelMode::Appearance), mean(2, LabelMode::Motion));
    let seven = verdict(
        7,
        sc_app > sc_mot && tc_mot > tc_app && note.is_empty(),
        format!(
            "SC only appearance {sc_app:.1} vs motion {sc_mot:.1}; TC only appearance {tc_app:.1} vs motion {tc_mot:.1}{note}"
        ),
    );
    [six, seven]
}

fn retrieval_checks(report: Option<&AblationReport>) -> Result<Verdict> {
    let mut mismatches = 0;
    for seed in 0..50 {
        let (got, want) = retrieval_against_oracle(seed, 20)?;
        mismatches += usize::from(got != want);
    }
    let mut reports = 0;
    let mut non_monotone = 0;
    for r in report.iter().flat_map(|r| r.results.iter().flatten()) {
        for rr in r.retrieval.values() {
            reports += 1;
            non_monotone += usize::from(rr.accuracy.windows(2).any(|w| w[0] > w[1]));
        }
    }
    Ok(verdict(
        8,
        mismatches == 0 && non_monotone == 0,
        format!(
            "oracle mismatches {mismatches}/50 on 20-element galleries; non-monotone reports {non_monotone}/{reports}"
        ),
    ))
}

fn run() -> Result<Vec<Verdict>> {
    let mut out = vec![
        gradient_fidelity()?,
        loss_oracle()?,
        analytic_anchors()?,
        shape_law()?,
        determinism()?,
    ];

    let mut base = RunConfig::default();
    let mut note = String::new();
    if let Ok(s) = std::env::var("HDC_ACCEPT_STEPS") {
        base.trainer.steps = s.parse().expect("HDC_ACCEPT_STEPS must be an integer");
        note = format!(" [shortened to {} steps]", base.trainer.steps);
    }
    let (names, rows): (Vec<&str>, Vec<GridRow>) = variant_rows().into_iter().unzip();
    let start = Instant::now();
    let report = run_ablation_grid(&base, &rows, &[0, 1, 2], |_, _| TrainOutputs::default())?;
    let secs = start.elapsed().as_secs_f64();
    print!("{}", report.to_table());
    out.extend(decoupling(&report, &names, secs, &note));
    out.push(retrieval_checks(Some(&report))?);
    Ok(out)
}

fn main() -> ExitCode {
    let verdicts = match run() {
        Ok(v) => v,
        Err(e) => {
            println!("acceptance aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut all = true;
    for v in &verdicts {
        all &= v.passed;
        println!(
            "criterion {}: {} - {}",
            v.id,
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
