fn main() {
    std::process::exit(gunsight::cli::main_with_args(std::env::args_os()));
}
