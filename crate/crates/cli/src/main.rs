fn main() {
    std::process::exit(molrg_cli::run(std::env::args_os()));
}
