fn main() {
    std::process::exit(qflow::cli::main_with_args(std::env::args_os()));
}
