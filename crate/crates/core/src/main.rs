fn main() {
    std::process::exit(qsieve::cli::main_with(std::env::args()));
}
