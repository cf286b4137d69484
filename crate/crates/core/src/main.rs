fn main() {
    std::process::exit(varsig::cli::main_with_args(std::env::args_os()));
}
