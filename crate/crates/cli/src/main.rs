fn main() {
    std::process::exit(btw_cli::main_with_args(std::env::args_os()));
}
