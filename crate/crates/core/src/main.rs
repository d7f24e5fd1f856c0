fn main() {
    std::process::exit(dyncloud::cli::run(std::env::args_os()));
}
