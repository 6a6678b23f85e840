fn main() {
    std::process::exit(cmcm_cli::run(std::env::args_os()));
}
