use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(stube_cli::run(std::env::args_os()) as u8)
}
