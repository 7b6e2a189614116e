use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(revert_field::cli::run(std::env::args_os()))
}
