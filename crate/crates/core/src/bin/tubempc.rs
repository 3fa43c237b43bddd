fn main() {
    std::process::exit(tubempc::cli::main_with_args(std::env::args_os()));
}
