use std::process::ExitCode;

fn main() -> ExitCode {
    lur::cli::run(std::env::args_os())
}
