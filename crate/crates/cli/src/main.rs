fn main() {
    std::process::exit(spe_cli::app::run(std::env::args_os()));
}
