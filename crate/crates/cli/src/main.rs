fn main() {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(tracing::Level::INFO)
        .init();
    let code = piimask_cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
