fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(nisp_cli::cli::run_args(std::env::args_os()))
}
