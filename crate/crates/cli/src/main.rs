use std::io::Write;
use std::process::ExitCode;

use spvim_cli::{error_json, run};

fn main() -> ExitCode {
    match run(std::env::args_os()) {
        Ok(Ok(summary)) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            ExitCode::SUCCESS
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let message = rendered.trim().lines().next().unwrap_or("invalid arguments").to_string();
            eprintln!("{}", error_json("usage", &message));
            ExitCode::from(2)
        }
    }
}
