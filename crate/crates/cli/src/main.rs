use clap::Parser;
use p2p_cli::cli::Cli;

fn main() {
    p2p_cli::init_logging();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    if let Err(e) = p2p_cli::run(cli, args) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
