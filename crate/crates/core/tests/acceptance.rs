//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion outside [`KNOWN_FAILURES`] fails. Runs the
//! full training recipes from `configs/`, so expect about an hour on one core.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use fewstep::harness::checkpoint::load_checkpoint;
use fewstep::harness::config::{RescaleRun, RunConfig};
use fewstep::harness::data::gen_dataset;
use fewstep::harness::train::{run_training, CHECKPOINT_FILE, LOG_FILE, METRICS_FILE};
use fewstep::metrics::{identity_report, MetricReport, REFERENCE_METHOD};
use fewstep::network::{max_grid_discrepancy, rescale_distill};
use serde::Deserialize;

const DISTILL_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Criteria that fail for a documented reason (see README, "Known
/// failures"). They still print FAIL; only failures outside this list make
/// the suite exit non-zero.
const KNOWN_FAILURES: &[&str] = &["4b"];

struct Line {
    id: &'static str,
    // None marks a report-only line
    passed: Option<bool>,
    detail: String,
}

#[derive(Default)]
struct Board(Vec<Line>);

impl Board {
    fn record(&mut self, id: &'static str, passed: Option<bool>, detail: impl Into<String>) {
        let line = Line {
            id,
            passed,
            detail: detail.into(),
        };
        let tag = match line.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "INFO",
        };
        println!("{tag} [{}] {}", line.id, line.detail);
        self.0.push(line);
    }

    fn failures(&self) -> Vec<&'static str> {
        self.0.iter().filter(|l| l.passed == Some(false)).map(|l| l.id).collect()
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> PathBuf {
    repo_root().join("configs").join(name)
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("  .. {}", msg.as_ref());
}

fn load_run(name: &str, sets: &[String]) -> RunConfig {
    RunConfig::load(&config(name), sets).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Method MMD^2 at `nfe` and the teacher reference MMD^2.
fn lookup(rows: &[MetricReport], nfe: usize) -> f64 {
    rows.iter()
        .find(|r| r.method != REFERENCE_METHOD && r.nfe == nfe)
        .map_or(f64::NAN, |r| r.mmd2)
}

fn reference(rows: &[MetricReport]) -> f64 {
    rows.iter()
        .find(|r| r.method == REFERENCE_METHOD)
        .map_or(f64::NAN, |r| r.mmd2)
}

fn identities(board: &mut Board) {
    let out = Command::new(env!("CARGO_BIN_EXE_fewstep"))
        .args(["verify-identities", "--seed", "0"])
        .output()
        .expect("spawn fewstep");
    board.record(
        "1",
        Some(out.status.code() == Some(0)),
        format!("verify-identities exit status {:?}", out.status.code()),
    );
    let report = identity_report(0);
    for (id, name) in [
        ("1a", "time_state_round_trip"),
        ("1b", "double_wrap"),
        ("1c", "cross_framework_sampling"),
        ("1d", "fm_meanflow_reduction"),
        ("1e", "scm_meanflow_gradient"),
        ("1f", "imm_cm_reduction"),
    ] {
        match report.suite(name) {
            Some(s) => board.record(
                id,
                Some(s.passed),
                format!("{name}: max error {:.3e} (tolerance {:.0e})", s.max_error, s.tolerance),
            ),
            None => board.record(id, Some(false), format!("{name}: suite missing")),
        }
    }
}

fn autodiff(board: &mut Board) {
    let start = Instant::now();
    let (rev, fwd) = common::random_net_errors(50, 2024);
    let secs = start.elapsed().as_secs_f64();
    board.record(
        "2",
        Some(rev < 1e-4 && fwd < 1e-4 && secs < 10.0),
        format!("50 random nets: reverse {rev:.2e}, forward {fwd:.2e} vs finite differences in {secs:.2}s"),
    );
}

#[derive(Deserialize)]
struct Fixture {
    threshold: f64,
    mean: f64,
    std: f64,
}

/// Trains the teacher recipe and returns its checkpoint path.
fn teacher(board: &mut Board, work: &Path) -> Option<PathBuf> {
    let dir = work.join("teacher");
    let cfg = load_run("fm_teacher.json", &[format!("output_dir={}", dir.display())]);
    progress(format!("training FM teacher ({} steps)", cfg.steps));
    let start = Instant::now();
    let run = run_training(&cfg);
    let secs = start.elapsed().as_secs_f64();
    let fixture: Fixture = serde_json::from_str(
        &fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/teacher_mmd2.json")).unwrap(),
    )
    .unwrap();
    match run {
        Ok(run) => {
            let m = reference(&run.metrics);
            board.record(
                "3",
                Some(m < fixture.threshold && secs < 15.0 * 60.0),
                format!(
                    "teacher MMD^2 {m:.4e} at NFE=100 (threshold {:.4e} = {:.3e} + 3 x {:.3e}); trained+evaluated in {secs:.0}s",
                    fixture.threshold, fixture.mean, fixture.std
                ),
            );
            Some(dir.join(CHECKPOINT_FILE))
        }
        Err(e) => {
            board.record("3", Some(false), format!("teacher training failed: {e}"));
            None
        }
    }
}

/// Per-seed metric rows for a distillation recipe, `None` for failed runs.
fn distill_runs(name: &str, teacher: &Path, work: &Path) -> Vec<Option<Vec<MetricReport>>> {
    DISTILL_SEEDS
        .iter()
        .map(|&seed| {
            let stem = name.trim_end_matches(".json");
            let dir = work.join(format!("{stem}_{seed}"));
            let cfg = load_run(
                name,
                &[
                    format!("teacher={}", teacher.display()),
                    format!("seed={seed}"),
                    format!("output_dir={}", dir.display()),
                ],
            );
            progress(format!("{stem} seed {seed} ({} steps)", cfg.steps));
            match run_training(&cfg) {
                Ok(run) => Some(run.metrics),
                Err(e) => {
                    progress(format!("{stem} seed {seed} failed: {e}"));
                    None
                }
            }
        })
        .collect()
}

fn fmt_seed(rows: &Option<Vec<MetricReport>>) -> String {
    match rows {
        Some(r) => format!(
            "[{:.2e} {:.2e} {:.2e} | ref {:.2e}]",
            lookup(r, 1),
            lookup(r, 2),
            lookup(r, 4),
            reference(r)
        ),
        None => "[failed]".into(),
    }
}

fn majority(votes: &[bool]) -> bool {
    2 * votes.iter().filter(|v| **v).count() > votes.len()
}

fn distillation(board: &mut Board, teacher: Option<&Path>, work: &Path) {
    let Some(teacher) = teacher else {
        for id in ["4a", "4b", "4c"] {
            board.record(id, Some(false), "no teacher checkpoint");
        }
        return;
    };

    let scm = distill_runs("acceptance_scm.json", teacher, work);
    let votes: Vec<bool> = scm
        .iter()
        .map(|r| {
            r.as_ref().is_some_and(|r| {
                let (n1, n2, t) = (lookup(r, 1), lookup(r, 2), reference(r));
                n1 <= 3.0 * t && n2 <= 3.0 * t && n2 <= n1
            })
        })
        .collect();
    let detail: Vec<String> = scm.iter().map(fmt_seed).collect();
    board.record(
        "4a",
        Some(majority(&votes)),
        format!(
            "sCM NFE1,2 <= 3x teacher and NFE2 <= NFE1 on {}/5 seeds; MMD^2 [nfe1 nfe2 nfe4]: {}",
            votes.iter().filter(|v| **v).count(),
            detail.join(" ")
        ),
    );

    let mf = distill_runs("acceptance_meanflow.json", teacher, work);
    let votes: Vec<bool> = mf
        .iter()
        .map(|r| {
            r.as_ref().is_some_and(|r| {
                let (n1, n2, n4, t) = (lookup(r, 1), lookup(r, 2), lookup(r, 4), reference(r));
                n1 > n2 && n2 > n4 && n4 <= 2.0 * t
            })
        })
        .collect();
    let detail: Vec<String> = mf.iter().map(fmt_seed).collect();
    board.record(
        "4b",
        Some(majority(&votes)),
        format!(
            "MeanFlow strictly decreasing 1>2>4 and NFE4 <= 2x teacher on {}/5 seeds; MMD^2: {}",
            votes.iter().filter(|v| **v).count(),
            detail.join(" ")
        ),
    );

    let g2 = distill_runs("acceptance_meanflow_gamma2.json", teacher, work);
    let mean_at = |runs: &[Option<Vec<MetricReport>>], nfe: usize| {
        let v: Vec<f64> = runs.iter().flatten().map(|r| lookup(r, nfe)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    board.record(
        "4c",
        None,
        format!(
            "MeanFlow mean MMD^2 over seeds, gamma=1 vs gamma=2: NFE1 {:.2e} vs {:.2e}, NFE2 {:.2e} vs {:.2e}, NFE4 {:.2e} vs {:.2e}",
            mean_at(&mf, 1),
            mean_at(&g2, 1),
            mean_at(&mf, 2),
            mean_at(&g2, 2),
            mean_at(&mf, 4),
            mean_at(&g2, 4)
        ),
    );
}

fn rescale(board: &mut Board, teacher: Option<&Path>, work: &Path) {
    let Some(teacher_path) = teacher else {
        board.record("5", Some(false), "no teacher checkpoint");
        return;
    };
    let run = RescaleRun::load(
        &config("acceptance_rescale.json"),
        &[
            format!("teacher={}", teacher_path.display()),
            format!("output={}", work.join("rescaled.fslb").display()),
        ],
    )
    .unwrap();
    progress(format!("rescale distillation ({} steps)", run.distill.steps));
    let result = (|| -> fewstep::Result<(f64, f64, f64)> {
        let teacher = load_checkpoint(&run.teacher)?;
        let pool = gen_dataset(run.dataset, run.pool_size, run.data_seed)?.points;
        let student = teacher.rescaled_copy(run.student_t_scale)?;
        let out = rescale_distill(&teacher, student, &pool, &run.distill)?;
        let gap = max_grid_discrepancy(&teacher, &out.student, &pool, run.grid_points, run.grid_times, run.data_seed)?;
        Ok((out.initial_loss, out.final_loss, gap))
    })();
    match result {
        Ok((l0, l1, gap)) => board.record(
            "5",
            Some(gap < 1e-2),
            format!(
                "t_scale {} -> {}: loss {l0:.3e} -> {l1:.3e}, max grid discrepancy {gap:.3e}",
                load_checkpoint(teacher_path).map(|t| t.config().t_scale).unwrap_or(f64::NAN),
                run.student_t_scale
            ),
        ),
        Err(e) => board.record("5", Some(false), format!("rescale distillation failed: {e}")),
    }
}

fn determinism(board: &mut Board, work: &Path) {
    let exe = env!("CARGO_BIN_EXE_fewstep");
    let artifacts = |tag: &str| -> Vec<(String, Vec<u8>)> {
        let teacher_dir = work.join(format!("det_{tag}/teacher"));
        let student_dir = work.join(format!("det_{tag}/student"));
        let mut files = Vec::new();
        for (cfg, dir, extra) in [
            ("acceptance_determinism_teacher.json", &teacher_dir, None),
            (
                "acceptance_determinism_student.json",
                &student_dir,
                Some(teacher_dir.join(CHECKPOINT_FILE)),
            ),
        ] {
            let mut cmd = Command::new(exe);
            cmd.arg("train")
                .arg("--config")
                .arg(config(cfg))
                .arg("--set")
                .arg(format!("output_dir={}", dir.display()));
            if let Some(t) = &extra {
                cmd.arg("--set").arg(format!("teacher={}", t.display()));
            }
            let out = cmd.output().expect("spawn fewstep");
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            for f in [LOG_FILE, CHECKPOINT_FILE, METRICS_FILE] {
                files.push((format!("{cfg}:{f}"), fs::read(dir.join(f)).unwrap()));
            }
        }
        files
    };
    progress("determinism: two identical teacher+student pipelines");
    let a = artifacts("a");
    let b = artifacts("b");
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    board.record(
        "6",
        Some(differing.is_empty() && !a.is_empty()),
        if differing.is_empty() {
            format!("{} artifacts (logs, checkpoints, metrics) bitwise equal across runs", a.len())
        } else {
            format!("differing artifacts: {}", differing.join(", "))
        },
    );
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let work = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&work);
    fs::create_dir_all(&work).unwrap();

    let mut board = Board::default();
    identities(&mut board);
    autodiff(&mut board);
    let teacher = teacher(&mut board, &work);
    distillation(&mut board, teacher.as_deref(), &work);
    rescale(&mut board, teacher.as_deref(), &work);
    determinism(&mut board, &work);

    let failed = board.failures();
    let scored = board.0.iter().filter(|l| l.passed.is_some()).count();
    println!("acceptance: {}/{} passed", scored - failed.len(), scored);
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
    }
    let unexpected: Vec<&str> = failed.into_iter().filter(|id| !KNOWN_FAILURES.contains(id)).collect();
    if !unexpected.is_empty() {
        println!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
