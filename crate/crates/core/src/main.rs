fn main() {
    std::process::exit(kinkreg::cli::main());
}
