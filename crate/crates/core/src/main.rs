fn main() {
    std::process::exit(sscd::cli::main());
}
