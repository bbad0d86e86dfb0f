use clap::Parser;

fn main() {
    let cli = mmea::cli::Cli::parse();
    std::process::exit(mmea::cli::run(cli));
}
