use clap::Parser;

fn main() {
    let cli = relprop::cli::Cli::parse();
    std::process::exit(relprop::cli::run(cli));
}
