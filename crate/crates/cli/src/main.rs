fn main() {
    std::process::exit(fltac_cli::main_with_args(std::env::args_os()));
}
