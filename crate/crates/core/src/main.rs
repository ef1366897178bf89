fn main() {
    std::process::exit(c3de::cli::run(std::env::args_os()));
}
