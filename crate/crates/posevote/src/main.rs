use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(posevote::cli::run(std::env::args_os()))
}
