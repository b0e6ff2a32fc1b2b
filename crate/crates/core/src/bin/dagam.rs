fn main() {
    std::process::exit(dagam::cli::run_cli(std::env::args_os()));
}
