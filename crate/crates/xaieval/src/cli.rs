//! The `xaieval` command line.
//!
//! Exit codes: 0 success, 1 a gate failed, 2 usage or configuration error,
//! 3 provider or adapter fault.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use xaieval_core::cam::{self, CamMethod};
use xaieval_core::eval::{
    required_capabilities, run_consistency, run_fidelity_incremental_deletion, run_fidelity_randomization,
    run_fidelity_single_deletion, run_fidelity_whitebox, run_pipeline, run_plausibility, DoseMode, Evaluation,
    GateConfig, Harness, RunResult, RunStatus,
};
use xaieval_core::metrics::Criterion;
use xaieval_core::perturb::PerturbationKind;
use xaieval_core::phantom::{Case, PhantomConfig};
use xaieval_core::provider::{Capability, Provider};
use xaieval_core::scorecard::{build_scorecard, DescriptiveSection, Provenance};

use crate::config::{ProviderSpec, RunConfig};
use crate::dataset::{self, ImageFormat};
use crate::error::{Error, Result};
use crate::exec::{available_jobs, Parallel};
use crate::formats::{self, read_json, write_bytes, write_json};
use crate::records::{aggregate_csv, records_csv};
use crate::render;

pub const EXIT_GATE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_PROVIDER: u8 = 3;

pub const RUN_FILE: &str = "run.json";
pub const RUN_SCHEMA: &str = "xaieval-run/1";

#[derive(Parser)]
#[command(
    name = "xaieval",
    version,
    about = "Evaluate saliency-map explanations of a lesion detector"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a seeded phantom dataset.
    Gen(GenArgs),
    /// Write heatmaps for dataset cases.
    Explain(ExplainArgs),
    /// Explanation stability under dose, rotation and shift.
    Consistency(RunArgs),
    /// Heatmap agreement with the lesion ground truth.
    Plausibility(RunArgs),
    /// Randomization and deletion checks of the explanation.
    Fidelity(RunArgs),
    /// All criteria in order, gated.
    Pipeline(RunArgs),
    /// Render a scorecard from a finished run.
    Scorecard(ScorecardArgs),
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub cases: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lesion_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ImageFormat::F32)]
    pub format: ImageFormat,
    /// Phantom configuration (JSON); its seed is replaced by a substream of
    /// `--seed`.
    #[arg(long)]
    pub phantom: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long = "method", value_delimiter = ',', default_value = "eigen,ablation")]
    pub methods: Vec<CamMethod>,
    /// Case ids; all cases when omitted.
    #[arg(long = "case")]
    pub cases: Vec<String>,
    /// Shell command of an external model adapter.
    #[arg(long)]
    pub adapter: Option<String>,
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Run configuration (JSON). Without one, both methods run on the
    /// reference detector under the shipped gates.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "method", value_delimiter = ',')]
    pub methods: Vec<CamMethod>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Shell command of an external model adapter.
    #[arg(long)]
    pub adapter: Option<String>,
    /// Evaluate without gates.
    #[arg(long)]
    pub no_gates: bool,
}

#[derive(Args)]
pub struct ScorecardArgs {
    /// Output directory of a finished run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub method: CamMethod,
    #[arg(
        long = "format",
        value_enum,
        value_delimiter = ',',
        default_value = "json,markdown,csv-bundle"
    )]
    pub formats: Vec<render::Format>,
    /// Descriptive section (JSON); built-in text for the method otherwise.
    #[arg(long)]
    pub descriptive: Option<PathBuf>,
    /// Defaults to the run directory.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub schema: String,
    pub version: String,
    pub command: String,
    pub model_id: String,
    /// Effective configuration with derived seeds filled in.
    pub config: RunConfig,
    pub runs: Vec<RunResult>,
    pub gate_failed: bool,
    pub provider_fault: bool,
}

/// What a successful invocation reports back for the exit code.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Outcome {
    pub gate_failed: bool,
    pub provider_fault: bool,
}

pub fn exit_code(result: &Result<Outcome>) -> u8 {
    match result {
        Ok(o) if o.provider_fault => EXIT_PROVIDER,
        Ok(o) if o.gate_failed => EXIT_GATE,
        Ok(_) => 0,
        Err(e) if e.provider().is_some() => EXIT_PROVIDER,
        Err(_) => EXIT_USAGE,
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("xaieval: {e}");
    }
    ExitCode::from(exit_code(&result))
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Explain(a) => explain(a),
        Command::Consistency(a) => evaluate(a, Some(Criterion::Consistency)),
        Command::Plausibility(a) => evaluate(a, Some(Criterion::Plausibility)),
        Command::Fidelity(a) => evaluate(a, Some(Criterion::Fidelity)),
        Command::Pipeline(a) => evaluate(a, None),
        Command::Scorecard(a) => scorecard(a),
    }
}

fn gen(a: GenArgs) -> Result<Outcome> {
    let cfg: PhantomConfig = match &a.phantom {
        Some(p) => read_json(p)?,
        None => PhantomConfig::default(),
    };
    let (generator, cases) = dataset::generate(cfg, a.cases, a.lesion_fraction, a.seed)?;
    dataset::write(&a.out, Some(generator), &cases, a.format)?;
    let lesions = cases.iter().filter(|c| c.has_lesion).count();
    eprintln!(
        "wrote {} cases ({lesions} with a lesion) to {}",
        cases.len(),
        a.out.display()
    );
    Ok(Outcome::default())
}

fn check_capabilities(provider: &dyn Provider, methods: &[CamMethod]) -> Result<()> {
    let caps = provider.capabilities();
    for &m in methods {
        if let Some(c) = required_capabilities(m).iter().find(|&&c| !caps.has(c)) {
            return Err(xaieval_core::Error::Capability(format!("method {m} needs `{}`", c.name())).into());
        }
    }
    Ok(())
}

fn explain(a: ExplainArgs) -> Result<Outcome> {
    let data = dataset::load(&a.dataset)?;
    let spec = a.adapter.map(ProviderSpec::external).unwrap_or_default();
    let provider = spec.connect()?;
    check_capabilities(provider.as_ref(), &a.methods)?;
    let selected: Vec<&Case> = if a.cases.is_empty() {
        data.cases.iter().collect()
    } else {
        a.cases
            .iter()
            .map(|id| {
                data.cases
                    .iter()
                    .find(|c| &c.id == id)
                    .ok_or_else(|| Error::Usage(format!("no case `{id}` in the dataset")))
            })
            .collect::<Result<_>>()?
    };
    let mut session = provider.session()?;
    for case in selected {
        for &m in &a.methods {
            let h = cam::explain(session.as_mut(), m, &case.image)?;
            formats::write_heatmap(&a.out.join(format!("{}-{m}.f32", case.id)), &h)?;
        }
    }
    Ok(Outcome::default())
}

fn resolve_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.dataset.is_some() {
        cfg.dataset = a.dataset.clone();
    }
    if !a.methods.is_empty() {
        cfg.methods = a.methods.clone();
    }
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    if let Some(cmd) = &a.adapter {
        cfg.provider = ProviderSpec {
            timeout_ms: cfg.provider.timeout_ms,
            ..ProviderSpec::external(cmd.clone())
        };
    }
    if a.no_gates {
        cfg.gates = None;
    }
    if a.jobs == Some(0) {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gate(run: &mut RunResult, gates: Option<&GateConfig>) {
    run.pass = gates.and_then(|g| g.gate(run.criterion)).and_then(|g| g.check(run));
}

/// Every protocol of one criterion, for each method, without chaining.
fn run_criterion(
    harness: &Harness<'_, Parallel>,
    cases: &[Case],
    criterion: Criterion,
    cfg: &RunConfig,
    pipeline: &xaieval_core::eval::PipelineConfig,
) -> Result<Vec<Evaluation>> {
    let caps = harness.provider.capabilities();
    let mut out = Vec::new();
    for &method in &cfg.methods {
        match criterion {
            Criterion::Consistency => {
                for spec in &pipeline.perturbations {
                    out.push(run_consistency(harness, cases, method, spec, pipeline.dose_mode)?);
                }
            }
            Criterion::Plausibility => out.push(run_plausibility(harness, cases, method)?),
            Criterion::Fidelity => {
                out.push(if caps.has(Capability::Randomize) {
                    run_fidelity_randomization(harness, cases, method, &pipeline.randomization)?
                } else {
                    Evaluation::not_supported(
                        "fidelity/randomization",
                        Criterion::Fidelity,
                        method,
                        harness.provider,
                        "provider cannot randomize its weights",
                    )
                });
                out.push(run_fidelity_single_deletion(
                    harness,
                    cases,
                    method,
                    &pipeline.single_deletion,
                )?);
                out.push(run_fidelity_incremental_deletion(
                    harness,
                    cases,
                    method,
                    &pipeline.incremental_deletion,
                )?);
                if pipeline.whitebox {
                    out.push(if caps.has(Capability::Attribution) {
                        run_fidelity_whitebox(harness, cases, method)?
                    } else {
                        Evaluation::not_supported(
                            "fidelity/whitebox",
                            Criterion::Fidelity,
                            method,
                            harness.provider,
                            "provider has no attribution oracle",
                        )
                    });
                }
            }
        }
        if out.iter().any(|e| e.run.status == RunStatus::Invalid) {
            break;
        }
    }
    Ok(out)
}

fn evaluate(a: RunArgs, criterion: Option<Criterion>) -> Result<Outcome> {
    let mut cfg = resolve_config(&a)?;
    let dir = cfg
        .dataset
        .clone()
        .ok_or_else(|| Error::Usage("no dataset: pass --dataset or set `dataset` in the configuration".into()))?;
    let data = dataset::load(&dir)?;
    let uses_dose = cfg
        .pipeline
        .perturbations
        .iter()
        .any(|p| p.kind == PerturbationKind::Dose);
    let needs_dose = matches!(criterion, None | Some(Criterion::Consistency));
    if needs_dose && uses_dose && cfg.pipeline.dose_mode == DoseMode::Phantom && !data.has_phantom_provenance() {
        return Err(Error::Usage(
            "dose re-noising needs a generated phantom dataset; set pipeline.dose_mode to \"additive\"".into(),
        ));
    }
    let provider = cfg.provider.connect()?;
    check_capabilities(provider.as_ref(), &cfg.methods)?;
    let exec = Parallel::new(a.jobs.unwrap_or_else(available_jobs));
    let mut harness = Harness::new(provider.as_ref(), &exec);
    harness.metric = cfg.metric;
    let pipeline = cfg.seeded_pipeline();

    let evaluations = match criterion {
        None => {
            let gates = cfg.gates.clone().unwrap_or_default();
            run_pipeline(&harness, &data.cases, &cfg.methods, &pipeline, &gates)?.evaluations
        }
        Some(c) => {
            let mut evals = run_criterion(&harness, &data.cases, c, &cfg, &pipeline)?;
            for e in &mut evals {
                gate(&mut e.run, cfg.gates.as_ref());
            }
            evals
        }
    };

    let outcome = Outcome {
        gate_failed: evaluations.iter().any(|e| e.run.pass == Some(false)),
        provider_fault: evaluations.iter().any(|e| e.run.status == RunStatus::Invalid),
    };
    for e in &evaluations {
        let r = &e.run;
        let pass = match r.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "-",
        };
        let status = serde_json::to_value(r.status).expect("status serializes");
        eprintln!(
            "{:<32} {:<9} {:<14} {pass}",
            r.protocol,
            r.method.name(),
            status.as_str().unwrap_or("")
        );
        if let Some(err) = &r.error {
            eprintln!("    {err}");
        }
    }

    for c in Criterion::ORDER {
        let records: Vec<_> = evaluations
            .iter()
            .filter(|e| e.run.criterion == c)
            .flat_map(|e| e.records.iter().cloned())
            .collect();
        if evaluations.iter().any(|e| e.run.criterion == c) {
            write_bytes(&a.out.join(format!("{c}.csv")), &records_csv(&records)?)?;
        }
    }
    let runs: Vec<RunResult> = evaluations.into_iter().map(|e| e.run).collect();
    write_bytes(&a.out.join("aggregate.csv"), &aggregate_csv(&runs)?)?;
    let model_id = provider.model_id();
    cfg.pipeline = pipeline;
    let file = RunFile {
        schema: RUN_SCHEMA.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: criterion.map_or("pipeline", |c| c.name()).into(),
        model_id,
        config: cfg,
        runs,
        gate_failed: outcome.gate_failed,
        provider_fault: outcome.provider_fault,
    };
    write_json(&a.out.join(RUN_FILE), &file)?;
    Ok(outcome)
}

pub fn load_run(dir: &Path) -> Result<RunFile> {
    let path = dir.join(RUN_FILE);
    let file: RunFile = read_json(&path)?;
    if file.schema != RUN_SCHEMA {
        return Err(Error::format(&path, format!("unsupported schema {:?}", file.schema)));
    }
    Ok(file)
}

fn compact<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("configuration serializes")
}

/// Provenance of `method`'s runs in `file`.
pub fn provenance(file: &RunFile, runs: &[RunResult]) -> Provenance {
    let mut seeds = BTreeMap::new();
    for r in runs {
        for (k, v) in &r.seeds {
            seeds.insert(format!("{}/{k}", r.protocol), *v);
        }
    }
    let c = &file.config;
    let mut config = BTreeMap::new();
    config.insert("command".to_string(), file.command.clone());
    config.insert("provider".to_string(), compact(&c.provider));
    config.insert("methods".to_string(), compact(&c.methods));
    config.insert("pipeline".to_string(), compact(&c.pipeline));
    config.insert("gates".to_string(), compact(&c.gates));
    config.insert("metric".to_string(), compact(&c.metric));
    if let Some(d) = &c.dataset {
        config.insert("dataset".to_string(), d.display().to_string());
    }
    Provenance {
        artifact_version: file.version.clone(),
        model_id: file.model_id.clone(),
        master_seed: Some(c.master_seed),
        seeds,
        config,
    }
}

fn scorecard(a: ScorecardArgs) -> Result<Outcome> {
    let file = load_run(&a.run)?;
    let desc = match &a.descriptive {
        Some(p) => read_json(p)?,
        None => DescriptiveSection::for_method(a.method),
    };
    let runs: Vec<RunResult> = file.runs.iter().filter(|r| r.method == a.method).cloned().collect();
    if runs.is_empty() {
        eprintln!("warning: the run has no results for method {}", a.method);
    }
    let prov = provenance(&file, &runs);
    let card = build_scorecard(desc, runs, prov)?;
    let out = a.out.unwrap_or(a.run);
    for f in a.formats {
        for p in render::write(&card, f, &out)? {
            eprintln!("wrote {}", p.display());
        }
    }
    Ok(Outcome::default())
}
