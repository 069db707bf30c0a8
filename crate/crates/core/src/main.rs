fn main() {
    std::process::exit(textvid::cli::run(std::env::args_os()));
}
