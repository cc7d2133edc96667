//! Scorecard renderings: canonical JSON, markdown and a bundle of CSV
//! tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use xaieval_core::eval::RunStatus;
use xaieval_core::scorecard::Scorecard;

use crate::error::{Error, Result};
use crate::formats::write_bytes;
use crate::records::aggregate_csv;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Markdown,
    CsvBundle,
}

/// Pretty JSON with a trailing newline; parses back to an equal card.
pub fn to_json(card: &Scorecard) -> String {
    let mut s = serde_json::to_string_pretty(card).expect("scorecards serialize");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> Result<Scorecard> {
    serde_json::from_str(text).map_err(|e| Error::json("<scorecard>", e))
}

/// Six significant digits.
fn sig6(v: f64) -> String {
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted floats parse");
    format!("{rounded}")
}

fn cell(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

pub fn to_markdown(card: &Scorecard) -> String {
    let d = &card.descriptive;
    let o = &d.overview;
    let mut s = String::new();
    let title = if o.abbreviation.is_empty() {
        &o.name
    } else {
        &o.abbreviation
    };
    let _ = writeln!(s, "# Scorecard: {title}\n");
    if card.incomplete {
        let _ = writeln!(s, "> **Incomplete:** some criterion has no completed run.\n");
    }

    let _ = writeln!(s, "## Overview\n");
    for (k, v) in [
        ("Name", &o.name),
        ("Abbreviation", &o.abbreviation),
        ("Description", &o.description),
        ("Type", &o.method_type),
        ("Citation", &o.citation),
        ("Software", &o.software),
    ] {
        if !v.is_empty() {
            let _ = writeln!(s, "- **{k}:** {v}");
        }
    }

    let c = &d.context_of_use;
    let _ = writeln!(s, "\n## Context of use\n");
    for (k, v) in [("Audience", &c.audience), ("Task", &c.task), ("Model", &c.model)] {
        if !v.is_empty() {
            let _ = writeln!(s, "- **{k}:** {v}");
        }
    }

    let _ = writeln!(s, "\n## Limitations and recommendations\n");
    if d.limitations_and_recommendations.is_empty() {
        let _ = writeln!(s, "None recorded.");
    }
    for l in &d.limitations_and_recommendations {
        let _ = writeln!(s, "- {l}");
    }

    let _ = writeln!(s, "\n## Validation setting\n\n{}", d.validation_setting);

    let _ = writeln!(s, "\n## Usefulness\n");
    match &d.usefulness_notes {
        Some(n) => {
            let _ = writeln!(s, "{n}");
        }
        None => {
            let _ = writeln!(s, "Not assessed. Usefulness needs user studies and is not computed.");
        }
    }

    for table in &card.quantitative {
        let _ = writeln!(s, "\n## {}\n", capitalized(table.criterion.name()));
        if table.runs.is_empty() {
            let _ = writeln!(s, "Not evaluated.");
            continue;
        }
        let _ = writeln!(s, "| protocol | variant | metric | mean | std | n | missing | pass |");
        let _ = writeln!(s, "|---|---|---|---:|---:|---:|---:|---|");
        for run in &table.runs {
            let pass = match run.pass {
                Some(true) => "pass",
                Some(false) => "fail",
                None => "",
            };
            if run.status != RunStatus::Complete {
                let status = match run.status {
                    RunStatus::NotSupported => "not supported",
                    _ => "invalid",
                };
                let why = run.error.as_deref().unwrap_or("");
                let _ = writeln!(
                    s,
                    "| {} | {} ({}) | | | | | | {pass} |",
                    run.protocol,
                    status,
                    cell(why)
                );
            }
            for row in &run.rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {} | {} | {pass} |",
                    run.protocol,
                    cell(&row.variant),
                    row.metric.name(),
                    sig6(row.mean),
                    sig6(row.std),
                    row.n,
                    row.missing
                );
            }
        }
        let gated: Vec<String> = table
            .runs
            .iter()
            .filter_map(|r| r.gate_value.map(|g| format!("{} = {}", r.protocol, sig6(g))))
            .collect();
        if !gated.is_empty() {
            let _ = writeln!(s, "\nGate values: {}.", gated.join(", "));
        }
    }

    let p = &card.provenance;
    let _ = writeln!(s, "\n## Provenance\n");
    let _ = writeln!(s, "- **Artifact version:** {}", p.artifact_version);
    let _ = writeln!(s, "- **Model:** {}", p.model_id);
    if let Some(m) = p.master_seed {
        let _ = writeln!(s, "- **Master seed:** {m}");
    }
    for (k, v) in &p.seeds {
        let _ = writeln!(s, "- **Seed `{k}`:** {v}");
    }
    s
}

fn capitalized(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// `tables/<criterion>.csv`, one per criterion with runs.
pub fn csv_bundle(card: &Scorecard) -> Result<Vec<(String, Vec<u8>)>> {
    card.quantitative
        .iter()
        .filter(|t| !t.runs.is_empty())
        .map(|t| Ok((format!("tables/{}.csv", t.criterion.name()), aggregate_csv(&t.runs)?)))
        .collect()
}

/// Writes `card` under `dir`; returns the files written.
pub fn write(card: &Scorecard, format: Format, dir: &Path) -> Result<Vec<PathBuf>> {
    let files: Vec<(String, Vec<u8>)> = match format {
        Format::Json => vec![("scorecard.json".into(), to_json(card).into_bytes())],
        Format::Markdown => vec![("scorecard.md".into(), to_markdown(card).into_bytes())],
        Format::CsvBundle => csv_bundle(card)?,
    };
    let mut out = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        write_bytes(&path, &bytes)?;
        out.push(path);
    }
    Ok(out)
}
