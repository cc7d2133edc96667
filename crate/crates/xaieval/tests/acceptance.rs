//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::json;
use xaieval::adapter::AdapterProvider;
use xaieval::exec::{available_jobs, Parallel};
use xaieval::render;
use xaieval_core::cam::{explain, CamMethod};
use xaieval_core::eval::{
    run_consistency, run_fidelity_incremental_deletion, run_fidelity_randomization, run_fidelity_single_deletion,
    run_fidelity_whitebox, run_plausibility, DoseMode, Evaluation, Harness, IncrementalOptions, PipelineConfig,
    RandomizationOptions,
};
use xaieval_core::grid::{Heatmap, Mask, MetricParams, Roi};
use xaieval_core::metrics::{iou_box, iou_mask, mse, spearman, spearman_values, ssim, Metric};
use xaieval_core::perturb::PerturbationSpec;
use xaieval_core::phantom::{Case, PhantomConfig};
use xaieval_core::provider::{Provider, RefProvider};
use xaieval_core::refmodel::{HeadWeights, RandomizationMode, RefModel};
use xaieval_core::seed;

const BIN: &str = env!("CARGO_BIN_EXE_xaieval");
const REFADAPTER: &str = env!("CARGO_BIN_EXE_xaieval-refadapter");
const MASTER: u64 = 7;

type Outcome = Result<String, String>;
type Check = (&'static str, &'static str, u64, fn(&Ctx) -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

struct Ctx {
    tmp: tempfile::TempDir,
    exec: Parallel,
    provider: RefProvider,
}

impl Ctx {
    fn harness(&self) -> Harness<'_, Parallel> {
        Harness::new(&self.provider, &self.exec)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }
}

fn cases(n: usize, lesion_fraction: f64) -> Vec<Case> {
    xaieval::dataset::generate(PhantomConfig::default(), n, lesion_fraction, MASTER)
        .unwrap()
        .1
}

fn mean(e: &Evaluation, variant: &str, metric: Metric) -> f64 {
    e.run
        .row(variant, metric)
        .unwrap_or_else(|| panic!("{} has no {variant}/{} row", e.run.protocol, metric.name()))
        .mean
}

fn values<'a>(e: &'a Evaluation, variant: &'a str, metric: Metric) -> impl Iterator<Item = Option<f64>> + 'a {
    e.records
        .iter()
        .filter(move |r| r.variant == variant && r.metric == metric)
        .map(|r| r.value)
}

fn map(w: usize, h: usize, v: Vec<f32>) -> Heatmap {
    Heatmap::new(w, h, v).unwrap()
}

/// Closed-form and brute-force cases for the four metrics.
fn ac1(_: &Ctx) -> Outcome {
    let p = MetricParams::default();
    let zero = map(16, 16, vec![0.0; 256]);
    let one = map(16, 16, vec![1.0; 256]);
    let c1 = (p.ssim_k1 * p.dynamic_range).powi(2);
    let s = ssim(&zero, &one, &p).unwrap();
    ensure!(
        (s - c1 / (1.0 + c1)).abs() < 1e-6 && (s - 9.999e-5).abs() < 1e-6,
        "constant SSIM {s}"
    );

    let a = Roi::new(0, 0, 4, 4).unwrap();
    let b = Roi::new(2, 2, 6, 6).unwrap();
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..6 {
        for c in 0..6 {
            inter += usize::from(a.contains(r, c) && b.contains(r, c));
            union += usize::from(a.contains(r, c) || b.contains(r, c));
        }
    }
    let iou = iou_box(&a, &b);
    ensure!(
        (iou - inter as f64 / union as f64).abs() < 1e-6 && (iou - 1.0 / 7.0).abs() < 1e-6,
        "box IoU {iou}"
    );
    let ma = Mask::from_roi(6, 6, &a);
    let mb = Mask::from_roi(6, 6, &b);
    ensure!((iou_mask(&ma, &mb).unwrap() - 1.0 / 7.0).abs() < 1e-6, "mask IoU");

    let x = [1.0, 2.0, 3.0, 4.0];
    let y = [1.0, 2.0, 4.0, 3.0];
    let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
    let rho = spearman_values(&x, &y).unwrap();
    ensure!(
        (rho - (1.0 - 6.0 * d2 / 60.0)).abs() < 1e-6 && (rho - 0.8).abs() < 1e-6,
        "Spearman {rho}"
    );

    let ramp = map(32, 32, (0..1024).map(|i| ((i * 7) % 31) as f32 / 30.0).collect());
    ensure!(ssim(&ramp, &ramp, &p).unwrap() == 1.0, "identity SSIM");
    ensure!(mse(&ramp, &ramp).unwrap() == 0.0, "identity MSE");
    ensure!(
        iou_box(&a, &a) == 1.0 && iou_mask(&ma, &ma).unwrap() == 1.0,
        "identity IoU"
    );
    ensure!(
        (spearman(&ramp, &ramp).unwrap() - 1.0).abs() < 1e-12,
        "identity Spearman"
    );
    Ok(format!("ssim(0,1)={s:.6e} iou={iou:.6} rho={rho:.6}"))
}

/// Identity levels of every axis reproduce the original heatmap.
fn ac2(ctx: &Ctx) -> Outcome {
    let cases = cases(20, 0.5);
    let h = ctx.harness();
    let mut n = 0;
    for method in [CamMethod::Eigen, CamMethod::Ablation] {
        for spec in [
            PerturbationSpec::dose(&[1.0]),
            PerturbationSpec::rotation(&[0.0]),
            PerturbationSpec::shift(&[0.0]),
        ] {
            let e = run_consistency(&h, &cases, method, &spec, DoseMode::Phantom).unwrap();
            let v = spec.variant(spec.levels[0]);
            for s in values(&e, &v, Metric::Ssim) {
                ensure!(s.is_some_and(|s| (s - 1.0).abs() <= 1e-9), "{method} {v}: SSIM {s:?}");
                n += 1;
            }
            ensure!(
                values(&e, &v, Metric::Mse).all(|m| m == Some(0.0)),
                "{method} {v}: MSE not 0"
            );
            ensure!(
                values(&e, &v, Metric::IouMask).all(|m| m == Some(1.0)),
                "{method} {v}: IoU not 1"
            );
        }
    }
    ensure!(n == 2 * 3 * 20, "expected 120 identity comparisons, saw {n}");
    Ok(format!("{n} identity comparisons exact"))
}

/// Lower dose and larger rotations do not improve the explanation.
fn ac3(ctx: &Ctx) -> Outcome {
    let cases = cases(50, 0.5);
    let h = ctx.harness();
    let dose = run_consistency(
        &h,
        &cases,
        CamMethod::Ablation,
        &PerturbationSpec::dose(&[1.0, 0.25]),
        DoseMode::Phantom,
    )
    .unwrap();
    let (s1, s25) = (
        mean(&dose, "dose=1", Metric::Ssim),
        mean(&dose, "dose=0.25", Metric::Ssim),
    );
    ensure!(s1 - s25 >= 0.02, "SSIM dose 1 {s1:.4} vs 0.25 {s25:.4}");
    let rot = run_consistency(
        &h,
        &cases,
        CamMethod::Ablation,
        &PerturbationSpec::rotation(&[0.0, 50.0]),
        DoseMode::Phantom,
    )
    .unwrap();
    let (a0, a50) = (
        mean(&rot, "rot=0", Metric::Accuracy),
        mean(&rot, "rot=50", Metric::Accuracy),
    );
    ensure!(a50 <= a0, "accuracy rot 0 {a0} < rot 50 {a50}");
    Ok(format!(
        "SSIM {s1:.4} -> {s25:.4} (dose 0.25); accuracy {a0:.2} -> {a50:.2} (50 deg)"
    ))
}

/// Ablation CAM localizes lesions better than Eigen CAM.
fn ac4(ctx: &Ctx) -> Outcome {
    let cases = cases(50, 1.0);
    let h = ctx.harness();
    let iou = |m| mean(&run_plausibility(&h, &cases, m).unwrap(), "direct", Metric::IouBox);
    let (ab, ei) = (iou(CamMethod::Ablation), iou(CamMethod::Eigen));
    ensure!(ab - ei >= 0.15, "iou_box ablation {ab:.4} eigen {ei:.4}");
    Ok(format!("iou_box ablation {ab:.4} eigen {ei:.4} (gap {:.4})", ab - ei))
}

/// Head re-initialization leaves Eigen CAM untouched while the detector
/// degrades to chance; Ablation CAM follows the weights.
fn ac5(ctx: &Ctx) -> Outcome {
    let cases = cases(50, 0.5);
    let h = ctx.harness();
    let opts = RandomizationOptions {
        modes: vec![RandomizationMode::HeadReinit],
        sigma: 1.0,
        seeds: RandomizationOptions::derive_seeds(seed::substream(MASTER, seed::RANDOMIZATION_CHECK), 20),
    };
    let v = RandomizationMode::HeadReinit.name();
    let eigen = run_fidelity_randomization(&h, &cases, CamMethod::Eigen, &opts).unwrap();
    let n = values(&eigen, v, Metric::Ssim).count();
    ensure!(n == 20 * 50, "expected 1000 eigen comparisons, saw {n}");
    ensure!(
        values(&eigen, v, Metric::Ssim).all(|s| s == Some(1.0)),
        "eigen SSIM not exactly 1"
    );
    let acc = mean(&eigen, v, Metric::Accuracy);
    ensure!((0.35..=0.65).contains(&acc), "randomized accuracy {acc:.4}");
    let ablation = run_fidelity_randomization(&h, &cases, CamMethod::Ablation, &opts).unwrap();
    let s = mean(&ablation, v, Metric::Ssim);
    ensure!(s < 0.9, "ablation SSIM {s:.4}");
    Ok(format!("eigen SSIM 1 on {n}; accuracy {acc:.4}; ablation SSIM {s:.4}"))
}

/// Deleting what the explanation points at removes the finding.
fn ac6(ctx: &Ctx) -> Outcome {
    let all = cases(50, 0.5);
    let h = ctx.harness();
    let pipeline = PipelineConfig::default().seeded(MASTER);
    let single = run_fidelity_single_deletion(&h, &all, CamMethod::Ablation, &pipeline.single_deletion).unwrap();
    let drops: Vec<f64> = values(&single, "peak-roi", Metric::ScoreDrop)
        .map(|v| v.unwrap())
        .collect();
    let lesions = all.iter().filter(|c| c.has_lesion).count();
    ensure!(
        drops.len() == lesions,
        "{} peak records for {lesions} lesion cases",
        drops.len()
    );
    let hit = drops.iter().filter(|&&d| d >= 0.5).count() as f64 / drops.len() as f64;
    ensure!(
        hit >= 0.9,
        "peak deletion halves the score on {:.1}% of lesion cases",
        100.0 * hit
    );
    let (peak, random) = (
        mean(&single, "peak-roi", Metric::ScoreDrop),
        mean(&single, "random-roi", Metric::ScoreDrop),
    );
    ensure!(peak > random, "mean drop peak {peak:.4} random {random:.4}");

    let twenty: Vec<Case> = all.iter().filter(|c| c.has_lesion).take(20).cloned().collect();
    ensure!(twenty.len() == 20, "need 20 lesion cases");
    let opts = IncrementalOptions {
        curves: false,
        ..pipeline.incremental_deletion
    };
    let inc = run_fidelity_incremental_deletion(&h, &twenty, CamMethod::Ablation, &opts).unwrap();
    let area = |o| mean(&inc, o, Metric::DeletionArea);
    let (imp, rnd, rev) = (area("importance"), area("random"), area("reverse"));
    ensure!(
        imp < rnd && rnd < rev,
        "areas importance {imp:.4} random {rnd:.4} reverse {rev:.4}"
    );
    Ok(format!(
        "peak drop >= 50% on {:.0}%; drops {peak:.3} vs {random:.3}; areas {imp:.3} < {rnd:.3} < {rev:.3}",
        100.0 * hit
    ))
}

/// Agreement with the transparent detector's own attribution.
fn ac7(ctx: &Ctx) -> Outcome {
    let all = cases(50, 0.5);
    let h = ctx.harness();
    let rho = |m| {
        mean(
            &run_fidelity_whitebox(&h, &all, m).unwrap(),
            "whitebox",
            Metric::Spearman,
        )
    };
    let (ab, ei) = (rho(CamMethod::Ablation), rho(CamMethod::Eigen));
    ensure!(ab - ei >= 0.1, "Spearman ablation {ab:.4} eigen {ei:.4}");

    let img = &all.iter().find(|c| c.has_lesion).unwrap().image;
    let mut worst = 0.0f32;
    for k in 0..7 {
        let mut weights = vec![0.0; 7];
        weights[k] = 1.0;
        let provider = RefProvider::new(RefModel {
            head: HeadWeights {
                weights,
                bias: 0.0,
                threshold: 0.5,
            },
            ..RefModel::default()
        });
        let mut s = provider.session().unwrap();
        let a = explain(s.as_mut(), CamMethod::Ablation, img).unwrap();
        let w = explain(s.as_mut(), CamMethod::Whitebox, img).unwrap();
        for (x, y) in a.values().iter().zip(w.values()) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure!(worst <= 1e-6, "one-hot chain differs by {worst:e}");
    Ok(format!(
        "Spearman ablation {ab:.4} eigen {ei:.4}; one-hot chain max diff {worst:e}"
    ))
}

fn xaieval(args: &[&str]) -> (i32, String) {
    let o = Command::new(BIN).args(args).output().unwrap();
    (
        o.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

/// Gating stops the chain; outputs do not depend on the worker count.
fn ac8(ctx: &Ctx) -> Outcome {
    let ds = ctx.path("ds");
    let (code, err) = xaieval(&["gen", "--out", s(&ds), "--cases", "10", "--seed", "7"]);
    ensure!(code == 0, "gen failed: {err}");

    let strict = ctx.path("strict.json");
    let cfg = json!({"gates": {"consistency": {"min_mean_ssim": 1.01}}, "methods": ["ablation"]});
    fs::write(&strict, cfg.to_string()).unwrap();
    let gated = ctx.path("gated");
    let (code, err) = xaieval(&[
        "pipeline",
        "--dataset",
        s(&ds),
        "--config",
        s(&strict),
        "--out",
        s(&gated),
    ]);
    ensure!(code == 1, "unsatisfiable gate exited {code}: {err}");
    let names: Vec<String> = tree(&gated).into_iter().map(|(p, _)| p.display().to_string()).collect();
    ensure!(
        names == ["aggregate.csv", "consistency.csv", "run.json"],
        "gated outputs {names:?}"
    );
    let run = xaieval::cli::load_run(&gated).unwrap();
    ensure!(
        run.runs.iter().all(|r| r.protocol.starts_with("consistency/")),
        "downstream runs present"
    );

    let mut trees = Vec::new();
    for jobs in ["1", "8"] {
        let out = ctx.path(&format!("run-j{jobs}"));
        let (code, err) = xaieval(&[
            "pipeline",
            "--dataset",
            s(&ds),
            "--seed",
            "7",
            "--jobs",
            jobs,
            "--out",
            s(&out),
        ]);
        ensure!(code == 0 || code == 1, "pipeline --jobs {jobs} exited {code}: {err}");
        trees.push(tree(&out));
    }
    ensure!(trees[0].len() == 5, "expected 5 outputs, saw {}", trees[0].len());
    for ((pa, a), (pb, b)) in trees[0].iter().zip(&trees[1]) {
        ensure!(
            pa == pb && a == b,
            "{} differs between --jobs 1 and --jobs 8",
            pa.display()
        );
    }
    ensure!(trees[0].len() == trees[1].len(), "file sets differ");
    Ok(format!(
        "gate exit 1 with consistency only; {} files byte-identical across --jobs 1/8",
        trees[0].len()
    ))
}

/// Canonical JSON, the descriptive headings and tables faithful to the CSVs.
fn ac9(ctx: &Ctx) -> Outcome {
    let run = ctx.path("run-j1");
    if !run.join("run.json").exists() {
        return Err("needs the pipeline run of the gating check".into());
    }
    let out = ctx.path("card");
    let (code, err) = xaieval(&["scorecard", "--run", s(&run), "--method", "ablation", "--out", s(&out)]);
    ensure!(code == 0, "scorecard exited {code}: {err}");

    let text = fs::read_to_string(out.join("scorecard.json")).unwrap();
    let card = render::from_json(&text).map_err(|e| e.to_string())?;
    ensure!(render::to_json(&card) == text, "JSON is not canonical");
    ensure!(
        render::from_json(&render::to_json(&card)).unwrap() == card,
        "JSON does not round-trip"
    );

    let md = fs::read_to_string(out.join("scorecard.md")).unwrap();
    for heading in [
        "Overview",
        "Context of use",
        "Limitations and recommendations",
        "Validation setting",
    ] {
        ensure!(
            md.lines().any(|l| l == format!("## {heading}")),
            "markdown lacks `{heading}`"
        );
    }

    // Markdown rows: | protocol | variant | metric | mean | std | n | missing | pass |
    let rows: Vec<Vec<String>> = md
        .lines()
        .filter(|l| l.starts_with("| ") && !l.starts_with("| protocol"))
        .map(|l| l.trim_matches('|').split(" | ").map(|c| c.trim().to_string()).collect())
        .collect();
    let mut checked = 0;
    for entry in fs::read_dir(out.join("tables")).unwrap() {
        let mut r = csv::Reader::from_path(entry.unwrap().path()).unwrap();
        for rec in r.records() {
            let rec = rec.unwrap();
            let (protocol, variant, metric) = (&rec[0], &rec[2], &rec[3]);
            let row = rows
                .iter()
                .find(|m| m[0] == protocol && m[1] == variant && m[2] == metric)
                .ok_or_else(|| format!("no markdown row for {protocol} {variant} {metric}"))?;
            for (col, md_col) in [(4, 3), (5, 4)] {
                let exact: f64 = rec[col].parse().unwrap();
                let shown: f64 = row[md_col]
                    .parse()
                    .map_err(|_| format!("unparsable cell {:?}", row[md_col]))?;
                // Six significant digits: within half a unit of the sixth.
                let unit = if exact == 0.0 {
                    0.0
                } else {
                    10f64.powf(exact.abs().log10().floor() - 5.0)
                };
                ensure!(
                    (exact - shown).abs() <= 0.5 * unit * (1.0 + 1e-9),
                    "{protocol} {variant} {metric}: {shown} vs {exact}"
                );
            }
            ensure!(row[5] == rec[6], "n differs for {protocol} {variant} {metric}");
            checked += 1;
        }
    }
    ensure!(checked > 50, "only {checked} table rows checked");
    Ok(format!(
        "canonical JSON; 4 descriptive headings; {checked} table rows match CSV"
    ))
}

/// Host side of the adapter protocol: a consistency run through the
/// reference adapter equals the built-in run.
fn ac10(ctx: &Ctx) -> Outcome {
    let cases = cases(10, 0.5);
    let adapter = AdapterProvider::connect(REFADAPTER, Duration::from_secs(60)).map_err(|e| e.to_string())?;
    let via = Harness::new(&adapter, &ctx.exec);
    let mut worst = 0.0f64;
    let mut n = 0;
    for spec in PerturbationSpec::default_grids() {
        for method in [CamMethod::Eigen, CamMethod::Ablation] {
            let a = run_consistency(&ctx.harness(), &cases, method, &spec, DoseMode::Phantom).unwrap();
            let b = run_consistency(&via, &cases, method, &spec, DoseMode::Phantom).unwrap();
            ensure!(a.run.rows.len() == b.run.rows.len(), "row counts differ");
            for (x, y) in a.run.rows.iter().zip(&b.run.rows) {
                ensure!(x.variant == y.variant && x.metric == y.metric, "row order differs");
                worst = worst.max((x.mean - y.mean).abs()).max((x.std - y.std).abs());
                n += 1;
            }
        }
    }
    ensure!(worst <= 1e-5, "max aggregate difference {worst:e}");
    Ok(format!("{n} aggregate rows, max difference {worst:e}"))
}

fn main() {
    let ctx = Ctx {
        tmp: tempfile::tempdir().unwrap(),
        exec: Parallel::new(available_jobs()),
        provider: RefProvider::default(),
    };
    let checks: [Check; 10] = [
        ("AC1", "metric oracles", 5, ac1),
        ("AC2", "consistency identity", 30, ac2),
        ("AC3", "consistency degradation direction", 180, ac3),
        ("AC4", "plausibility ordering", 120, ac4),
        ("AC5", "fidelity randomization signature", 300, ac5),
        ("AC6", "deletion checks", 300, ac6),
        ("AC7", "white-box check", 300, ac7),
        ("AC8", "pipeline gating and determinism", 600, ac8),
        ("AC9", "scorecard rendering", 60, ac9),
        ("AC10", "adapter host parity (reference adapter)", 300, ac10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, budget, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(|| check(&ctx)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let secs = start.elapsed().as_secs_f64();
        let result = result.and_then(|detail| {
            if secs <= budget as f64 {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {secs:.1}s, budget {budget}s"))
            }
        });
        match result {
            Ok(detail) => println!("{id:<4} PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("{id:<4} FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
