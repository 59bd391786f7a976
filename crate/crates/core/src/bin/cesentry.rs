fn main() {
    std::process::exit(cesentry::cli::run(std::env::args_os()));
}
