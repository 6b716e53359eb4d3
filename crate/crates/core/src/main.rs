fn main() {
    std::process::exit(vlkit::cli::run(std::env::args_os()));
}
