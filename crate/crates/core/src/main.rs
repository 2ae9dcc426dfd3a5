fn main() {
    std::process::exit(diffsens::harness::cli::cli_main(std::env::args_os()));
}
