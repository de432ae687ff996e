fn main() {
    std::process::exit(robust_dataset::cli::run(std::env::args_os()));
}
