fn main() {
    std::process::exit(jebm_cli::run(std::env::args_os()));
}
