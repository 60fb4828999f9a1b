use clap::Parser;
use uqkit::cli::{error_json, exit_code, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                e.exit();
            }
            let message = e.to_string();
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": message.trim(), "exit_code": 2 }));
            std::process::exit(2);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", error_json(&e));
        std::process::exit(exit_code(&e));
    }
}
