use clap::Parser;

fn main() {
    std::process::exit(linda_cli::run(linda_cli::Cli::parse()));
}
