fn main() {
    std::process::exit(recovery_service::cli::main_with_args(std::env::args_os()));
}
