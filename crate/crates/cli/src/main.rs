use clap::Parser;

fn main() {
    let cli = bilevel_cli::app::Cli::parse();
    std::process::exit(bilevel_cli::app::main(cli));
}
