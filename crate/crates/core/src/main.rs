fn main() {
    std::process::exit(exprag::cli::main_with_args(std::env::args_os()));
}
