//! Serves the built-in reference detector over the adapter protocol on
//! standard input and output.

use std::io;
use std::process::ExitCode;

use clap::Parser;
use xaieval::adapter::serve;
use xaieval::xaieval_core::provider::{Capability, Provider, RefProvider};

#[derive(Parser)]
#[command(
    name = "xaieval-refadapter",
    version,
    about = "Reference detector behind the adapter protocol"
)]
struct Args {
    /// Methods to advertise; others are answered with "method not found".
    #[arg(long, value_delimiter = ',', value_parser = parse_capability)]
    supports: Option<Vec<Capability>>,
}

fn parse_capability(s: &str) -> Result<Capability, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown capability `{s}`"))
}

fn main() -> ExitCode {
    let args = Args::parse();
    let provider = RefProvider::default();
    let supports = args.supports.unwrap_or_else(|| provider.capabilities().supports);
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    match serve(&provider, &supports, stdin, stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("xaieval-refadapter: {e}");
            ExitCode::FAILURE
        }
    }
}
