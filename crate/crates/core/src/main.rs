use std::process::ExitCode;

fn main() -> ExitCode {
    fairlm::cli::main_with(std::env::args_os().skip(1))
}
