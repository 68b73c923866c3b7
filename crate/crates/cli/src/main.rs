use std::process::ExitCode;

fn main() -> ExitCode {
    gridgsp_cli::run(std::env::args_os())
}
