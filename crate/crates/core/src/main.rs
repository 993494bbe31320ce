fn main() {
    std::process::exit(icql::cli::main_with_args(std::env::args_os()));
}
