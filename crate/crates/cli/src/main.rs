fn main() {
    std::process::exit(gsc_cli::main_with_args(std::env::args_os()));
}
