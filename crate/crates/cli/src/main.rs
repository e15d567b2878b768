use clap::Parser;
use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = ifcert_cli::Cli::parse();
    match ifcert_cli::run(cli) {
        Ok(out) => {
            let text = serde_json::to_string_pretty(&out.output).expect("output serializes");
            // a closed pipe on stdout is not worth a panic
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::from(out.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
