fn main() {
    std::process::exit(logpeft_cli::run(std::env::args_os()));
}
