use std::process::ExitCode;

fn main() -> ExitCode {
    fhm::cli::run()
}
