use std::process::ExitCode;

use anyhow::Context;
use tricloud_cli::{execute, parse_flags, CliError, EXIT_RUNTIME};

fn try_main() -> anyhow::Result<()> {
    let inv = parse_flags(std::env::args_os())?;
    execute(&inv).with_context(|| format!("run writing to {}", inv.out.display()))
}

fn main() -> ExitCode {
    let Err(err) = try_main() else {
        return ExitCode::SUCCESS;
    };
    let code = match err.downcast_ref::<CliError>() {
        Some(CliError::UnknownFlag(e)) if !e.use_stderr() => {
            let _ = e.print();
            0
        }
        Some(e) => e.exit_code(),
        None => EXIT_RUNTIME,
    };
    if code != 0 {
        eprintln!("tricloud: {err:#}");
    }
    ExitCode::from(code as u8)
}
