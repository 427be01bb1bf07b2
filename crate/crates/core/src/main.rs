fn main() {
    std::process::exit(medvqa::cli::run(std::env::args_os()));
}
