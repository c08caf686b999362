fn main() {
    std::process::exit(linklearn::runner::main_with(std::env::args_os()));
}
