fn main() {
    std::process::exit(fbsde::cli::main_with_args(std::env::args_os()));
}
