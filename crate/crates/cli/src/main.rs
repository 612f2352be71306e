fn main() {
    std::process::exit(kolmo_cli::run(std::env::args_os()));
}
