fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MARKET_LOG_LEVEL", "warn")).init();
    std::process::exit(datamarket::cli::main_with(std::env::args_os()));
}
