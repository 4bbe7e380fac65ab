fn main() {
    std::process::exit(lai_valuation::cli::run(std::env::args_os()));
}
