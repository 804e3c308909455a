use clap::Parser;
use harnesskit::cli::{main_with, Cli};
use harnesskit::config::HarnessPaths;

#[tokio::main]
async fn main() {
    let cli = Cli::parse();
    let code = main_with(cli, HarnessPaths::from_env()).await;
    std::process::exit(code);
}
