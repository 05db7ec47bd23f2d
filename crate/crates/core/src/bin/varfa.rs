fn main() {
    std::process::exit(varfa::cli::run(std::env::args_os()));
}
