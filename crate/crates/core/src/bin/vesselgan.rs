fn main() {
    std::process::exit(vesselgan::cli::main_with_args(std::env::args_os()));
}
