fn main() {
    std::process::exit(backchain_cli::run(std::env::args_os()));
}
