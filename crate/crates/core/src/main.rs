fn main() {
    std::process::exit(speclab::cli::run(std::env::args_os()));
}
