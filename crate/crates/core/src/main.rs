fn main() {
    std::process::exit(hose::cli::run(std::env::args_os()));
}
