fn main() {
    std::process::exit(clearhug::cli::run(std::env::args_os()));
}
