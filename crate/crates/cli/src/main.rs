fn main() {
    std::process::exit(videmb_cli::main_with_args(std::env::args_os()));
}
