fn main() {
    std::process::exit(skim::cli::run_cli(std::env::args_os()));
}
