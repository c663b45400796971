fn main() {
    std::process::exit(snapddm_cli::run(std::env::args_os()));
}
