fn main() {
    std::process::exit(wordintel::cli::run(std::env::args_os()));
}
