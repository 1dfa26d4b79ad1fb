fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MTR_LOG", "info")).init();
    std::process::exit(mtr_cli::run(std::env::args_os()));
}
