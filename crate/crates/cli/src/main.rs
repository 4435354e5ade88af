use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(homlab_cli::dispatch(std::env::args_os()) as u8)
}
