fn main() {
    std::process::exit(wsidg::cli::run());
}
