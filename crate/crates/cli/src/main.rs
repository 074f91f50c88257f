fn main() {
    std::process::exit(memebench_cli::run(std::env::args_os()));
}
