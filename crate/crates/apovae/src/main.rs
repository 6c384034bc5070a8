fn main() {
    std::process::exit(apovae::cli::run(std::env::args_os()));
}
