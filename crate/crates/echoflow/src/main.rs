fn main() {
    std::process::exit(echoflow::cli::main_from(std::env::args_os()));
}
