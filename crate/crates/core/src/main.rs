fn main() {
    std::process::exit(pneumoseg::cli::run(std::env::args_os()));
}
