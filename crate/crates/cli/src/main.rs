fn main() {
    std::process::exit(fsgcc_cli::run(std::env::args_os()));
}
