use clap::Parser;

fn main() {
    let cli = cs_ssim::cli::Cli::parse();
    if let Err(e) = cs_ssim::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
