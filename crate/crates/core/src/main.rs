fn main() {
    std::process::exit(mogle::cli::run_from(std::env::args_os()));
}
