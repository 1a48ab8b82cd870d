use clap::Parser;
use fracphase::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
