use clap::Parser;
use wavescale::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("serialisable"));
        }
        Err(e) => {
            let record = serde_json::json!({ "error": e.record() });
            eprintln!("{record}");
            std::process::exit(e.exit_code());
        }
    }
}
