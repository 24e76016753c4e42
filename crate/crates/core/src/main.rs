fn main() {
    std::process::exit(stratsim::cli::run_cli(std::env::args_os()));
}
