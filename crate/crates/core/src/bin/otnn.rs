fn main() {
    std::process::exit(otnn::cli::run_command(std::env::args_os()));
}
