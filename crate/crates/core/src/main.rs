use clap::Parser;

fn main() {
    let cli = ssod::cli::Cli::parse();
    if let Err(e) = ssod::cli::run_cli(cli) {
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error: {}: {msg}", e.kind());
        std::process::exit(1);
    }
}
