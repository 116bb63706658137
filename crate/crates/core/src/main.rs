fn main() {
    std::process::exit(chanprune::cli::parse_and_run(std::env::args_os()));
}
