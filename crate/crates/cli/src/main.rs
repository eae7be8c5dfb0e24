fn main() {
    std::process::exit(cycletrack_cli::run(std::env::args_os()));
}
