fn main() -> std::process::ExitCode {
    qnet_interferometry::cli::main_with_args(std::env::args_os())
}
