use std::process::ExitCode;

fn main() -> ExitCode {
    cmlab::cli::run()
}
