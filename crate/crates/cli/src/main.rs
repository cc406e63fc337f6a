fn main() {
    std::process::exit(iml_cli::run(std::env::args_os()));
}
