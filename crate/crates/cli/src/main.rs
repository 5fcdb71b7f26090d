use clap::Parser;

fn main() {
    let cli = embspec_cli::Cli::parse();
    std::process::exit(embspec_cli::run(&cli));
}
