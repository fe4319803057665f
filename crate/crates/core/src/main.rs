fn main() {
    std::process::exit(hetsngp::cli::run(std::env::args_os()));
}
