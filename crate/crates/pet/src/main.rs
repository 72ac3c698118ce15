fn main() {
    std::process::exit(pet::cli::run());
}
