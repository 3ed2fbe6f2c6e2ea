fn main() {
    std::process::exit(rbc2d::cli::run());
}
