fn main() {
    std::process::exit(filab_cli::run(std::env::args_os()));
}
