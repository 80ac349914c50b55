fn main() {
    std::process::exit(ofakd::cli::run(std::env::args_os()));
}
