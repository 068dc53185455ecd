fn main() {
    std::process::exit(metasched::cli::main_with(std::env::args_os()));
}
