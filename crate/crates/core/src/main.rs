use std::process::ExitCode;

fn main() -> ExitCode {
    earlyclass::cli::run(std::env::args_os())
}
