fn main() {
    std::process::exit(avgzsl_cli::run(std::env::args_os()));
}
