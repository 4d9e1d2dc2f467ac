fn main() {
    std::process::exit(mvjump_cli::run(std::env::args_os()));
}
