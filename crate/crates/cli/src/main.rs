fn main() {
    std::process::exit(mambamir_cli::run_cli(std::env::args_os()));
}
