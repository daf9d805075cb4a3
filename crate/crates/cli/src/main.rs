fn main() {
    std::process::exit(mmpack_cli::run(std::env::args_os()));
}
