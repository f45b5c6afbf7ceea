fn main() {
    std::process::exit(mcbo_cli::run(std::env::args_os()));
}
