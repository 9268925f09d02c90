fn main() {
    std::process::exit(hvae::cli::run(std::env::args_os()));
}
