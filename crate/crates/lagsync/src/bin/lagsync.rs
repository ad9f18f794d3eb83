fn main() {
    std::process::exit(lagsync::cli::run(std::env::args_os()));
}
