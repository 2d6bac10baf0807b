fn main() {
    std::process::exit(arbq::cli::run(std::env::args_os()));
}
