fn main() {
    std::process::exit(rsde::cli::main_with_args(std::env::args_os()));
}
