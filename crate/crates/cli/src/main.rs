fn main() {
    std::process::exit(funedit_cli::main_with_args(std::env::args_os()));
}
