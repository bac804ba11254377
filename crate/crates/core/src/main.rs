fn main() {
    std::process::exit(rnnadv::cli::run(std::env::args_os()));
}
