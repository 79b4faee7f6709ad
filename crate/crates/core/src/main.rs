fn main() {
    std::process::exit(gdvdm::cli::run(std::env::args_os()));
}
