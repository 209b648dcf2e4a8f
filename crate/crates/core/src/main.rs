fn main() {
    std::process::exit(dpdkit::cli::run(std::env::args_os()));
}
