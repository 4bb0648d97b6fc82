fn main() {
    std::process::exit(udma::cli::run(std::env::args_os()));
}
