fn main() {
    std::process::exit(red_core::cli::run(std::env::args_os()));
}
