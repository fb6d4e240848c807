fn main() {
    std::process::exit(nasforge_cli::main_with(std::env::args_os()));
}
