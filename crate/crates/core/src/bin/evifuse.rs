fn main() {
    std::process::exit(evifuse::cli::main_with_args(std::env::args_os()));
}
