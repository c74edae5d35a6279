fn main() {
    std::process::exit(volrep_cli::main_with_args(std::env::args_os()));
}
