fn main() {
    std::process::exit(proto_adapt::cli::main_with_args(std::env::args_os()));
}
