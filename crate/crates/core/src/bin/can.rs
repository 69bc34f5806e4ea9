fn main() {
    std::process::exit(can_core::cli::run(std::env::args_os()));
}
