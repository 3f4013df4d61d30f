fn main() {
    std::process::exit(epimatch_cli::run(std::env::args_os()));
}
