fn main() {
    std::process::exit(chordrec::cli::main_with_args(std::env::args_os()));
}
