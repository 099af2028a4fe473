fn main() {
    std::process::exit(simcse_cli::run(std::env::args_os()));
}
