fn main() {
    std::process::exit(gje_cli::run(std::env::args_os()));
}
