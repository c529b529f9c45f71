fn main() {
    std::process::exit(ivimuq_cli::run(std::env::args_os()));
}
