use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(trusted_tickets::cli::run() as u8)
}
