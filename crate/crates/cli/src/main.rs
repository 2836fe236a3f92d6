fn main() {
    std::process::exit(vidalign_cli::run(std::env::args_os()));
}
