fn main() {
    std::process::exit(iwvi_cli::run(std::env::args_os()));
}
