fn main() {
    std::process::exit(medfuse::cli::run(std::env::args_os()));
}
