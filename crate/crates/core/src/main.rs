use clap::Parser;

fn main() {
    let cli = beammatch::cli::Cli::parse();
    if let Err(e) = beammatch::cli::run(&cli) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}
