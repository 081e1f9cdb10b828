use std::process::ExitCode;

use ihcq::Error;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    match ihcq::cli::run(&args) {
        Ok(outcome) => {
            for line in &outcome.stdout {
                println!("{line}");
            }
            println!("{}", outcome.report_path.display());
            ExitCode::SUCCESS
        }
        Err(Error::Help(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_record());
            ExitCode::from(e.exit_code())
        }
    }
}
