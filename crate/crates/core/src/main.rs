fn main() {
    std::process::exit(pfld::cli::run(std::env::args_os()));
}
