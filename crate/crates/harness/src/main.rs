fn main() {
    std::process::exit(wsnn_harness::cli::main_with(std::env::args_os().collect()));
}
