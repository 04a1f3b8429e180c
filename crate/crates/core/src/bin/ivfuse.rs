fn main() {
    std::process::exit(ivfuse_core::cli::main_with_args(std::env::args_os()));
}
