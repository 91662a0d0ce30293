fn main() {
    std::process::exit(hlvar::cli::main());
}
