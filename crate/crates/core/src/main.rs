use std::process::ExitCode;

fn main() -> ExitCode {
    loopnest::cli::main_with(std::env::args_os())
}
