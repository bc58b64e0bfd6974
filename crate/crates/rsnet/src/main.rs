use clap::Parser;

fn main() {
    let cli = rsnet::cli::Cli::parse();
    if let Err(err) = rsnet::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.kind().exit_code());
    }
}
