fn main() {
    std::process::exit(attnlab::cli::run(std::env::args_os()));
}
