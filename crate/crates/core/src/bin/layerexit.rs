fn main() {
    std::process::exit(layerexit::harness::cli::run(std::env::args_os()));
}
