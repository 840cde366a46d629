fn main() {
    std::process::exit(thermoyolo::cli::run(std::env::args_os()));
}
