fn main() {
    std::process::exit(chair_core::cli::run(std::env::args_os()));
}
