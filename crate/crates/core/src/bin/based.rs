fn main() {
    std::process::exit(based::cli::main_with_args(std::env::args_os()));
}
