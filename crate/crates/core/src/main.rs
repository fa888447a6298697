use std::process::exit;

fn main() {
    if let Err(e) = artifix::cli::run() {
        eprintln!("{}", artifix::cli::error_line(&e));
        exit(e.exit_code());
    }
}
