fn main() {
    std::process::exit(moda::cli::run(std::env::args_os()));
}
