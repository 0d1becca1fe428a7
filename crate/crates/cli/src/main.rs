fn main() {
    std::process::exit(contextnav_cli::run_cli(std::env::args_os()));
}
