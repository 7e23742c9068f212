fn main() {
    std::process::exit(rmppi_cli::parse_and_dispatch(std::env::args_os()));
}
