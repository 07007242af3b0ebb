fn main() {
    std::process::exit(spin_lab::cli::run());
}
