fn main() {
    std::process::exit(oslsel::cli::run(std::env::args_os()));
}
