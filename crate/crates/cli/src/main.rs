fn main() {
    // Let every level through the logger itself; `run` sets the effective
    // maximum from flags and config. RUST_LOG still wins when set.
    let mut builder = env_logger::Builder::new();
    builder.filter_level(log::LevelFilter::Trace).format_timestamp(None).parse_default_env();
    builder.init();
    if std::env::var_os("RUST_LOG").is_none() {
        log::set_max_level(log::LevelFilter::Info);
    }
    std::process::exit(driftlab_cli::run(std::env::args_os()));
}
