fn main() {
    std::process::exit(beliefnet_cli::main_with(std::env::args_os()));
}
