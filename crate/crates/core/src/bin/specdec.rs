use std::process::ExitCode;

fn main() -> ExitCode {
    specdec::cli::run(std::env::args_os())
}
