fn main() {
    fmc::cli::init_logging();
    std::process::exit(fmc::cli::run(std::env::args_os()));
}
