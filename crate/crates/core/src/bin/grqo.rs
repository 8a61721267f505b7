fn main() {
    std::process::exit(grqo::cli::main_with_args(std::env::args_os()));
}
