fn main() {
    std::process::exit(oxel::cli::run(std::env::args_os()));
}
