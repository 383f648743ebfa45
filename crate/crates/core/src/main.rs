use std::process::ExitCode;

fn main() -> ExitCode {
    isac_sim::cli::main_entry()
}
