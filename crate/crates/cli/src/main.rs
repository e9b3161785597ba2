fn main() {
    std::process::exit(dcr_cli::parse_and_dispatch(std::env::args_os()));
}
