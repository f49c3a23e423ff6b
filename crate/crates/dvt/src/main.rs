use clap::Parser;

fn main() {
    let cli = match dvt::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1 per the documented contract; --help and
            // --version are successes.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dvt::cli::run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code() as i32);
    }
}
