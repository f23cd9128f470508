fn main() {
    std::process::exit(dhcal_cli::main_with_args(std::env::args_os()));
}
