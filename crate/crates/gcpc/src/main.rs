fn main() {
    std::process::exit(gcpc::cli::run_cli(std::env::args().skip(1)));
}
