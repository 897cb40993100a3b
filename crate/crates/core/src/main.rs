use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("HOI_LOG", "warn")).init();
    ExitCode::from(hoi_core::cli::run(std::env::args_os()))
}
