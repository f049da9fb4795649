fn main() {
    std::process::exit(tsgen_cli::run(std::env::args_os()));
}
