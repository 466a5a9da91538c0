fn main() {
    std::process::exit(cjst::cli::main_with_args(std::env::args().collect()));
}
