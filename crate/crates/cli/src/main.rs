fn main() {
    std::process::exit(ebmdmo_cli::run(std::env::args_os()));
}
