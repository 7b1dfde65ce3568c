fn main() {
    std::process::exit(gridline::cli::run(std::env::args_os()));
}
