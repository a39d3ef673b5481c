fn main() {
    std::process::exit(voldiff::cli::run());
}
