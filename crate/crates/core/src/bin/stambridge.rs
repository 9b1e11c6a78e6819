fn main() {
    std::process::exit(stambridge::cli::run(std::env::args_os()));
}
