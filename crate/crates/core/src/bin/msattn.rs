fn main() {
    std::process::exit(msattn::cli::run(std::env::args_os().collect()));
}
