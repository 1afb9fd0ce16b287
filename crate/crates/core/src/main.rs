fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ibm_sim::par::init_from_env();
    std::process::exit(ibm_sim::cli::run(std::env::args_os()));
}
