fn main() {
    std::process::exit(carid_cli::dispatch(std::env::args_os()));
}
