fn main() {
    std::process::exit(unitavg::cli::run_cli(std::env::args_os()));
}
