use std::process::ExitCode;

fn main() -> ExitCode {
    xaieval::cli::main_with(std::env::args_os())
}
