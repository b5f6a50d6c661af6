fn main() {
    std::process::exit(derain_cli::main_with_args(std::env::args_os()));
}
