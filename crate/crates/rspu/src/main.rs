fn main() {
    std::process::exit(rspu::cli::run(std::env::args_os()));
}
