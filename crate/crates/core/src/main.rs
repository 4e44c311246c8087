fn main() {
    std::process::exit(rgvlm::cli::run(std::env::args().collect()));
}
