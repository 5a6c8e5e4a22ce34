fn main() {
    std::process::exit(catgrad_cli::main_with_args(std::env::args_os()));
}
