fn main() {
    std::process::exit(sfusion::cli::run());
}
