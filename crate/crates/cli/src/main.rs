fn main() {
    std::process::exit(avseg_cli::run(std::env::args_os()));
}
