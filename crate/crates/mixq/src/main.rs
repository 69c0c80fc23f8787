fn main() {
    std::process::exit(mixq::cli::run());
}
