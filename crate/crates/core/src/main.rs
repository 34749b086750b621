fn main() {
    std::process::exit(spunge::cli::run(std::env::args_os()));
}
