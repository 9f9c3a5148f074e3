fn main() {
    std::process::exit(hcn::cli::run(std::env::args().collect()));
}
