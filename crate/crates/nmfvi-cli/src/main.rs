fn main() {
    std::process::exit(nmfvi_cli::run(std::env::args()));
}
